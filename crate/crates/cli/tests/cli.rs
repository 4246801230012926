use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "core", "tests", "fixtures", name].iter().collect()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphosyn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small, fast configuration.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{"max_epochs": 3, "eval_each_epoch": false,
            "model": {"shared_hidden": 48, "cwi_hidden": 16, "arc_hidden": 24, "rel_hidden": 12,
                      "encoder": {"dim": 32, "hash_buckets": 65536}}}"#,
    )
    .unwrap();
    path
}

fn trained(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let config = small_config(dir);
    let mut args = vec!["--config", p(&config)];
    args.extend_from_slice(extra);
    trained_with(dir, name, &args)
}

fn trained_with(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let toy = fixture("toy50.conllu");
    let mut args = vec!["train", "--train", p(&toy), "--dev", p(&toy), "--out", p(&out)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn token_lines(text: &str) -> Vec<String> {
    text.lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

#[test]
fn train_with_preset_writes_checkpoint_and_log() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path(), "m.ckpt", &["--preset", "turkish", "--seed", "3"]);
    assert!(fs::read_to_string(&ckpt).unwrap().starts_with("morphosyn-checkpoint"));
    let log: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("m.ckpt.log.json")).unwrap()).unwrap();
    let c = &log["config"];
    assert_eq!((c["w_parser"].as_f64(), c["w_morph"].as_f64(), c["w_cwi"].as_f64()), (Some(2.0), Some(2.0), Some(1.5)));
    assert_eq!(c["seed"], 3);
    assert_eq!(log["epochs"].as_array().unwrap().len(), log["stop_epoch"].as_u64().unwrap() as usize);
}

#[test]
fn train_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = trained(dir.path(), "a.ckpt", &[]);
    let b = trained(dir.path(), "b.ckpt", &[]);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn train_rejects_missing_files_and_unknown_presets() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m.ckpt");
    let o = run(&["train", "--train", "/nonexistent.conllu", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent.conllu"));
    let toy = fixture("toy50.conllu");
    let o = run(&["train", "--train", p(&toy), "--preset", "klingon", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));
    assert!(!out.exists());
}

#[test]
fn bad_data_reports_the_line() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.conllu");
    fs::write(&bad, "1\tword\t_\n").unwrap();
    let o = run(&["evaluate", "--gold", p(&bad), "--system", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
}

#[test]
fn predict_plain_text_and_conllu_agree() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path(), "m.ckpt", &[]);
    let story = fixture("ap_story.conllu");
    let text = dir.path().join("in.txt");
    fs::write(&text, "From the AP comes this story :\n").unwrap();
    let from_conllu = dir.path().join("a.conllu");
    let from_text = dir.path().join("b.conllu");
    let o = run(&["predict", "--model", p(&ckpt), "--input", p(&story), "--out", p(&from_conllu)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("1 sentences"));
    let o = run(&["predict", "--model", p(&ckpt), "--input", p(&text), "--out", p(&from_text), "--threads", "2"]);
    assert!(o.status.success());
    let a = fs::read_to_string(from_conllu).unwrap();
    let b = fs::read_to_string(from_text).unwrap();
    assert_eq!(token_lines(&a), token_lines(&b));
    assert!(token_lines(&b).iter().filter(|l| !l.is_empty()).all(|l| l.split('\t').count() == 10));
}

#[test]
fn predict_after_overfit_scores_high() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained_with(dir.path(), "m.ckpt", &["--max-epochs", "10"]);
    let toy = fixture("toy50.conllu");
    let sys = dir.path().join("sys.conllu");
    assert!(run(&["predict", "--model", p(&ckpt), "--input", p(&toy), "--out", p(&sys)]).status.success());
    let o = run(&["evaluate", "--gold", p(&toy), "--system", p(&sys), "--json"]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["las"]["f1"].as_f64().unwrap() >= 95.0, "{}", r);
}

#[test]
fn predict_empty_input_and_bad_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path(), "m.ckpt", &["--max-epochs", "1"]);
    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let o = run(&["predict", "--model", p(&ckpt), "--input", p(&empty)]);
    assert!(o.status.success());
    assert!(o.stdout.is_empty());

    let broken = dir.path().join("broken.ckpt");
    let text = fs::read_to_string(&ckpt).unwrap();
    fs::write(&broken, &text[..text.len() / 2]).unwrap();
    let o = run(&["predict", "--model", p(&broken), "--input", p(&empty)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn evaluate_fixtures() {
    let gold = fixture("ap_story.conllu");
    let o = run(&["evaluate", "--gold", p(&gold), "--system", p(&gold)]);
    assert!(o.status.success());
    let table = stdout(&o);
    assert_eq!(table.matches("100.0").count(), 9, "{}", table);

    let o = run(&["evaluate", "--gold", p(&gold), "--system", p(&fixture("eval/las75.conllu")), "--json"]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["las"]["f1"], 75.0);
    let o = run(&[
        "evaluate",
        "--gold",
        p(&fixture("eval/mslas50_gold.conllu")),
        "--system",
        p(&fixture("eval/mslas50_sys.conllu")),
        "--json",
    ]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!((r["mslas"]["p"].as_f64(), r["mslas"]["r"].as_f64()), (Some(50.0), Some(50.0)));
}

#[test]
fn evaluate_mismatch_exits_2() {
    let o = run(&[
        "evaluate",
        "--gold",
        p(&fixture("toy50.conllu")),
        "--system",
        p(&fixture("ap_story.conllu")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

const OBL_GOLD: &str = "# sent_id = o1
1\tsat\tsit\tVERB\t_\tTense=Past\t0\troot\t_\t_
2\ton\ton\tADP\t_\t_\t_\t_\t_\t_
3\tmats\tmat\tNOUN\t_\tNumber=Plur\t1\tobl\t_\t_
4\tin\tin\tADP\t_\t_\t_\t_\t_\t_
5\thalls\thall\tNOUN\t_\tNumber=Plur\t1\tobl\t_\t_
6\tby\tby\tADP\t_\t_\t_\t_\t_\t_
7\tdoors\tdoor\tNOUN\t_\tNumber=Plur\t1\tnsubj\t_\t_

";

#[test]
fn analyze_reports_top_confusion() {
    let dir = TempDir::new().unwrap();
    let gold = dir.path().join("gold.conllu");
    let sys = dir.path().join("sys.conllu");
    fs::write(&gold, OBL_GOLD).unwrap();
    let swapped = OBL_GOLD.replacen("\tobl\t", "\tnmod\t", 2).replace("\tnsubj\t", "\tobj\t");
    fs::write(&sys, swapped).unwrap();
    let o = run(&["analyze", "--gold", p(&gold), "--system", p(&sys), "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let top = &r["deprels"]["top"][0];
    assert_eq!((top["count"].as_u64(), top["gold"].as_str(), top["predicted"].as_str()), (Some(2), Some("obl"), Some("nmod")));
    let o = run(&["analyze", "--gold", p(&gold), "--system", p(&sys), "--json", "--top-k", "1"]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["deprels"]["top"].as_array().unwrap().len(), 1);

    let spatial = dir.path().join("spatial.txt");
    fs::write(&spatial, "Ine, Ill\nAbl\n").unwrap();
    let toy = fixture("toy50.conllu");
    let o = run(&["analyze", "--gold", p(&toy), "--system", p(&toy), "--spatial-cases", p(&spatial), "--json"]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["deprels"]["top"].as_array().unwrap().is_empty());
    assert!(r["features"].as_array().unwrap().iter().all(|t| t["errors"].as_array().unwrap().is_empty()));
    assert_eq!(r["spatial"]["f1"], 100.0);
}

#[test]
fn split_ten_sentences_nine_one() {
    let dir = TempDir::new().unwrap();
    let toy = fs::read_to_string(fixture("toy50.conllu")).unwrap();
    let ten: Vec<&str> = toy.split("\n\n").filter(|b| !b.trim().is_empty()).take(10).collect();
    let input = dir.path().join("ten.conllu");
    fs::write(&input, ten.join("\n\n") + "\n\n").unwrap();
    let o = run(&["split", "--input", p(&input), "--ratio", "0.9", "--seed", "4"]);
    assert!(o.status.success());
    let count = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap().matches("# sent_id").count();
    assert_eq!((count("ten.train.conllu"), count("ten.dev.conllu")), (9, 1));
}

#[test]
fn tune_sorts_by_mslas_and_accepts_singleton_grid() {
    let dir = TempDir::new().unwrap();
    let config = small_config(dir.path());
    let toy = fixture("toy50.conllu");
    let grid = dir.path().join("grid.json");
    fs::write(&grid, r#"[[2.0, 1.5, 1.0], {"parser": 1.0, "morph": 0.5, "cwi": 0.5}]"#).unwrap();
    let best = dir.path().join("best.json");
    let args = ["tune", "--train", p(&toy), "--dev", p(&toy), "--grid", p(&grid), "--config", p(&config)];
    let o = run(&[&args[..], &["--json", "--max-epochs", "1", "--out", p(&best)]].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let scores: Vec<f64> = r["rows"].as_array().unwrap().iter().map(|x| x["dev_mslas"].as_f64().unwrap()).collect();
    assert_eq!(scores.len(), 2);
    assert!(scores[0] >= scores[1]);
    let best: serde_json::Value = serde_json::from_str(&fs::read_to_string(best).unwrap()).unwrap();
    assert_eq!(best["w_parser"], r["rows"][0]["weights"]["parser"]);

    fs::write(&grid, "[[1.0, 2.0, 3.0]]").unwrap();
    let o = run(&[&args[..], &["--json", "--max-epochs", "1"]].concat());
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["best"]["w_cwi"], 3.0);
}

#[test]
fn inspect_checkpoint_and_defaults() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path(), "m.ckpt", &["--max-epochs", "1"]);
    let o = run(&["inspect", "--model", p(&ckpt)]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["config"]["shared_hidden"], 48);
    assert!(r["parameters"].as_u64().unwrap() > 0);
    let o = run(&["inspect", "--defaults"]);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["batch_size"], 16);
    assert!(stdout(&run(&["inspect", "--presets"])).contains("turkish"));
}

/// Deterministic pseudo-vectors, one block per sentence.
fn embeddings_for(conllu: &str, dim: usize) -> String {
    let mut out = String::new();
    for block in conllu.split("\n\n").filter(|b| b.lines().any(|l| !l.starts_with('#'))) {
        for line in block.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
            let form = line.split('\t').nth(1).unwrap();
            let h = form.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
            let v: Vec<String> = (0..dim).map(|k| format!("{:.3}", ((h >> (k * 5)) % 17) as f64 / 8.0 - 1.0)).collect();
            out.push_str(&format!("{}\t{}\n", form, v.join(" ")));
        }
        out.push('\n');
    }
    out
}

#[test]
fn external_embeddings_end_to_end() {
    let dir = TempDir::new().unwrap();
    let toy = fixture("toy50.conllu");
    let emb = dir.path().join("toy.vec");
    fs::write(&emb, embeddings_for(&fs::read_to_string(&toy).unwrap(), 6)).unwrap();
    let config = small_config(dir.path());
    let ckpt = dir.path().join("ext.ckpt");
    let o = run(&["train", "--train", p(&toy), "--train-embeddings", p(&emb), "--config", p(&config), "--max-epochs", "1", "--out", p(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&stdout(&run(&["inspect", "--model", p(&ckpt)]))).unwrap();
    assert_eq!(r["config"]["encoder"]["provider"], "external_file");
    assert_eq!(r["config"]["encoder"]["dim"], 6);

    let o = run(&["train", "--train", p(&toy), "--dev", p(&toy), "--train-embeddings", p(&emb), "--out", p(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["predict", "--model", p(&ckpt), "--input", p(&toy)]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["predict", "--model", p(&ckpt), "--input", p(&toy), "--embeddings", p(&emb)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).matches("# sent_id").count(), 50);
    let t1 = fixture("ap_story.conllu");
    let o = run(&["predict", "--model", p(&ckpt), "--input", p(&t1), "--embeddings", p(&emb)]);
    assert_eq!(o.status.code(), Some(1), "sentence count mismatch must be rejected");
}
