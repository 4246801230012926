use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use morphosyn::analysis::{analyze, parse_value_list, AnalysisOptions};
use morphosyn::data::{parse_conllu, serialize_corpus, split_corpus, Corpus};
use morphosyn::encoder::{ExternalEmbeddings, Provider};
use morphosyn::eval::evaluate;
use morphosyn::model::{LossWeights, Model};
use morphosyn::numkern::Parameterized;
use morphosyn::pipeline::{forms_only, parse_plain_text, predict, EmptyFeats, PipelineConfig};
use morphosyn::trainer::{default_grid, grid_search_weights, preset, train_datasets, Dataset, TrainConfig, PRESETS};
use morphosyn::Error;

#[derive(Parser)]
#[command(name = "morphosyn", version, about = "Joint morphosyntactic parsing over content words")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a JSON training log.
    Train(TrainArgs),
    /// Annotate plain text or CoNLL-U with a trained model.
    Predict(PredictArgs),
    /// Score a system file against gold: MSLAS, LAS, Feats.
    Evaluate(EvalArgs),
    /// Error analyses: confusions, top deprel errors, distances, directions.
    Analyze(AnalyzeArgs),
    /// Shuffle and split a corpus into train and dev parts.
    Split(SplitArgs),
    /// Grid search over the loss weights, scored by dev MSLAS.
    Tune(TuneArgs),
    /// Show a checkpoint's configuration, or the default configuration.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TrainConfig JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Language preset for the loss weights (e.g. turkish).
    #[arg(long)]
    preset: Option<String>,
    /// Seed for initialization, shuffling and dropout.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Development set for early stopping; without it the training loss is monitored.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Precomputed vectors for the training set (external provider).
    #[arg(long)]
    train_embeddings: Option<PathBuf>,
    #[arg(long)]
    dev_embeddings: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log path; defaults to the checkpoint path with `.log.json` appended.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputFormat {
    Auto,
    Conllu,
    Text,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CoNLL-U (forms are read, annotations ignored) or one tokenized sentence per line; `-` for stdin.
    #[arg(long)]
    input: PathBuf,
    /// Output CoNLL-U; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "auto")]
    format: InputFormat,
    /// Precomputed vectors for the input (external provider).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0.6)]
    relabel_threshold: f64,
    /// Write empty predicted feature sets as `_` instead of `|`.
    #[arg(long)]
    underscore_empty: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    system: PathBuf,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    system: PathBuf,
    /// File listing Case values counted as spatial (whitespace or comma separated).
    #[arg(long)]
    spatial_cases: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Feature class to tabulate; repeatable. Defaults to every gold class.
    #[arg(long = "class")]
    classes: Vec<String>,
    /// Bucket attachment errors by signed rather than absolute distance.
    #[arg(long)]
    signed: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    ratio: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Defaults to `<input stem>.train.conllu` next to the input.
    #[arg(long)]
    train_out: Option<PathBuf>,
    #[arg(long)]
    dev_out: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// JSON list of weight triples, as objects or `[parser, morph, cwi]` arrays.
    /// Defaults to the distinct preset triples.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the winning TrainConfig here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to describe.
    #[arg(long, required_unless_present_any = ["defaults", "presets"])]
    model: Option<PathBuf>,
    /// Print the default TrainConfig JSON.
    #[arg(long)]
    defaults: bool,
    /// List the language presets.
    #[arg(long)]
    presets: bool,
}

/// A failure with its exit code: 1 for input or configuration problems, 2
/// when gold and system cannot be matched.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn input(msg: impl Into<String>) -> Self {
        Failure { code: 1, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::input(e.to_string())
    }
}

/// Scoring errors: gold and system that cannot be matched exit with 2.
fn scoring(e: Error) -> Failure {
    let code = match e {
        Error::Eval(_) | Error::Alignment(_) => 2,
        _ => 1,
    };
    Failure { code, msg: e.to_string() }
}

type CliResult<T = ()> = Result<T, Failure>;

/// Write to stdout; a closed pipe (e.g. `| head`) ends the process quietly.
fn emit(text: &str) {
    let mut out = io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() == io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: stdout: {}", e);
        std::process::exit(1);
    }
}

macro_rules! out {
    ($($arg:tt)*) => { emit(&format!($($arg)*)) };
}

macro_rules! outln {
    ($($arg:tt)*) => { emit(&format!("{}\n", format_args!($($arg)*))) };
}

fn context(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.msg = format!("{}: {}", path.display(), f.msg);
        f
    }
}

fn read(path: &Path) -> CliResult<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        io::stdin()
            .read_to_string(&mut s)
            .map_err(|e| Failure::input(format!("stdin: {}", e)))?;
        return Ok(s);
    }
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {}", path.display(), e)))
}

fn write(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::input(format!("{}: {}", path.display(), e)))
}

fn load_corpus(path: &Path) -> CliResult<Corpus> {
    parse_conllu(&read(path)?).map_err(context(path))
}

fn load_embeddings(path: Option<&PathBuf>) -> CliResult<Option<ExternalEmbeddings>> {
    path.map(|p| ExternalEmbeddings::load(p).map_err(context(p))).transpose()
}

fn resolve_config(args: &ConfigArgs) -> CliResult<TrainConfig> {
    let mut config = match &args.config {
        Some(p) => TrainConfig::from_json(&read(p)?).map_err(context(p))?,
        None => TrainConfig::default(),
    };
    if let Some(name) = &args.preset {
        let w = preset(name).ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            Failure::input(format!("unknown preset {:?}; known presets: {}", name, known.join(", ")))
        })?;
        config = config.with_weights(w);
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
        config.model.seed = seed;
    }
    if let Some(n) = args.max_epochs {
        config.max_epochs = n;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let config = resolve_config(&a.config)?;
    let train = load_corpus(&a.train)?;
    let dev = match &a.dev {
        Some(p) => load_corpus(p)?,
        None => Vec::new(),
    };
    let train_emb = load_embeddings(a.train_embeddings.as_ref())?;
    let dev_emb = load_embeddings(a.dev_embeddings.as_ref())?;
    if config.model.encoder.provider == Provider::ExternalFile && train_emb.is_none() {
        return Err(Failure::input("the external provider needs --train-embeddings"));
    }
    if train_emb.is_some() && !dev.is_empty() && dev_emb.is_none() {
        return Err(Failure::input("--train-embeddings also needs --dev-embeddings for the dev set"));
    }
    log::info!("training on {} sentences, {} dev sentences", train.len(), dev.len());
    let (mut model, log) = train_datasets(
        &Dataset {
            corpus: &train,
            inputs: train_emb.as_ref(),
        },
        &Dataset {
            corpus: &dev,
            inputs: dev_emb.as_ref(),
        },
        &config,
    )?;
    write(&a.out, &model.to_checkpoint()?)?;
    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.json");
        p.into()
    });
    let mut log_value = serde_json::to_value(&log).map_err(|e| Failure::input(e.to_string()))?;
    log_value["config"] = serde_json::to_value(&config).map_err(|e| Failure::input(e.to_string()))?;
    let log_json = serde_json::to_string_pretty(&log_value).unwrap();
    write(&log_path, &log_json)?;
    outln!(
        "best epoch {} of {} ({}); checkpoint {}; log {}",
        log.best_epoch,
        log.stop_epoch,
        log.stop_reason,
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

fn looks_like_conllu(text: &str) -> bool {
    text.lines()
        .map(str::trim_end)
        .find(|l| !l.is_empty())
        .is_some_and(|l| l.starts_with('#') || l.contains('\t'))
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let model = Model::from_checkpoint(&read(&a.model)?).map_err(context(&a.model))?;
    let text = read(&a.input)?;
    let conllu = match a.format {
        InputFormat::Conllu => true,
        InputFormat::Text => false,
        InputFormat::Auto => looks_like_conllu(&text),
    };
    let input: Corpus = if conllu {
        parse_conllu(&text).map_err(context(&a.input))?.iter().map(forms_only).collect()
    } else {
        parse_plain_text(&text)
    };
    let emb = load_embeddings(a.embeddings.as_ref())?;
    if model.config.encoder.provider == Provider::ExternalFile && emb.is_none() && !input.is_empty() {
        return Err(Failure::input("this model uses the external provider; pass --embeddings"));
    }
    let config = PipelineConfig {
        relabel_threshold: a.relabel_threshold,
        empty_feats: if a.underscore_empty { EmptyFeats::Underscore } else { EmptyFeats::Pipe },
        threads: a.threads.max(1),
    };
    let (out, summary) = predict(&model, &input, emb.as_ref(), &config)?;
    let text = serialize_corpus(&out);
    match &a.out {
        Some(p) => write(p, &text)?,
        None => emit(&text),
    }
    eprintln!(
        "{} sentences; {} tokens relabeled as function words; {} sentences used the single-root fallback",
        summary.sentences, summary.relabeled_tokens, summary.fallback_sentences
    );
    Ok(())
}

fn cmd_evaluate(a: EvalArgs) -> CliResult {
    let gold = load_corpus(&a.gold)?;
    let sys = load_corpus(&a.system)?;
    let r = evaluate(&gold, &sys).map_err(scoring)?;
    if a.json {
        outln!("{}", serde_json::to_string_pretty(&r).map_err(|e| Failure::input(e.to_string()))?);
    } else {
        out!("{}", r);
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs) -> CliResult {
    let gold = load_corpus(&a.gold)?;
    let sys = load_corpus(&a.system)?;
    let spatial = match &a.spatial_cases {
        Some(p) => Some(parse_value_list(&read(p)?).map_err(context(p))?),
        None => None,
    };
    let opts = AnalysisOptions {
        classes: a.classes,
        top_k: a.top_k,
        signed: a.signed,
        spatial,
    };
    let report = analyze(&gold, &sys, &opts).map_err(scoring)?;
    if a.json {
        outln!("{}", serde_json::to_string_pretty(&report.to_json()).unwrap());
    } else {
        out!("{}", report);
    }
    Ok(())
}

fn sibling(input: &Path, suffix: &str) -> PathBuf {
    let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    input.with_file_name(format!("{}.{}.conllu", stem, suffix))
}

fn cmd_split(a: SplitArgs) -> CliResult {
    let corpus = load_corpus(&a.input)?;
    let (train, dev) = split_corpus(&corpus, a.ratio, a.seed)?;
    let train_out = a.train_out.unwrap_or_else(|| sibling(&a.input, "train"));
    let dev_out = a.dev_out.unwrap_or_else(|| sibling(&a.input, "dev"));
    write(&train_out, &serialize_corpus(&train))?;
    write(&dev_out, &serialize_corpus(&dev))?;
    outln!(
        "{} train sentences -> {}\n{} dev sentences -> {}",
        train.len(),
        train_out.display(),
        dev.len(),
        dev_out.display()
    );
    Ok(())
}

fn parse_grid(text: &str) -> Result<Vec<LossWeights>, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let items = v.as_array().ok_or("the grid must be a JSON list")?;
    items
        .iter()
        .map(|item| match item {
            serde_json::Value::Array(xs) => match xs.iter().map(|x| x.as_f64()).collect::<Option<Vec<_>>>() {
                Some(w) if w.len() == 3 => Ok(LossWeights {
                    parser: w[0],
                    morph: w[1],
                    cwi: w[2],
                }),
                _ => Err(format!("expected three numbers, got {}", item)),
            },
            _ => serde_json::from_value(item.clone()).map_err(|e| format!("{}: {}", item, e)),
        })
        .collect()
}

fn cmd_tune(a: TuneArgs) -> CliResult {
    let base = resolve_config(&a.config)?;
    let grid = match &a.grid {
        Some(p) => parse_grid(&read(p)?).map_err(|e| Failure::input(format!("{}: {}", p.display(), e)))?,
        None => default_grid(),
    };
    let train = load_corpus(&a.train)?;
    let dev = load_corpus(&a.dev)?;
    let result = grid_search_weights(&train, &dev, &base, &grid)?;
    let mut rows = result.rows.clone();
    rows.sort_by(|x, y| y.dev_mslas.total_cmp(&x.dev_mslas));
    if a.json {
        let v = serde_json::json!({"rows": rows, "best": result.best});
        outln!("{}", serde_json::to_string_pretty(&v).unwrap());
    } else {
        outln!("{:>8} {:>8} {:>8}  {:>7} {:>7} {:>7}", "w_parser", "w_morph", "w_cwi", "MSLAS", "LAS", "Feats");
        for r in &rows {
            outln!(
                "{:>8} {:>8} {:>8}  {:>7.1} {:>7.1} {:>7.1}",
                r.weights.parser, r.weights.morph, r.weights.cwi, r.dev_mslas, r.dev_las, r.dev_feats
            );
        }
    }
    if let Some(p) = &a.out {
        write(p, &serde_json::to_string_pretty(&result.best).unwrap())?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    if a.defaults {
        outln!("{}", serde_json::to_string_pretty(&TrainConfig::default()).unwrap());
    }
    if a.presets {
        for (name, w) in PRESETS {
            outln!("{:<12} {} {} {}", name, w.parser, w.morph, w.cwi);
        }
    }
    if let Some(p) = &a.model {
        let mut model = Model::from_checkpoint(&read(p)?).map_err(context(p))?;
        let mut params = 0usize;
        let mut tensors = 0usize;
        model.visit_params(&mut |_, q| {
            params += q.len();
            tensors += 1;
        });
        let v = serde_json::json!({
            "config": model.config,
            "features": model.vocab.num_features(),
            "deprels": model.vocab.deprels,
            "class_weights": model.class_weights,
            "tensors": tensors,
            "parameters": params,
        });
        outln!("{}", serde_json::to_string_pretty(&v).unwrap());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Split(a) => cmd_split(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
