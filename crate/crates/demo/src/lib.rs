//! Browser demo. Every export takes and returns JSON text; failures come back
//! as `{"error": "..."}` so the page never has to catch exceptions.

use morphosyn::data::{parse_conllu, CONTENT, FUNCTION};
use morphosyn::eval::evaluate;
use morphosyn::numkern::Matrix;
use morphosyn::pipeline::{all_function_fallback, relabel_low_confidence};
use morphosyn::treecrf::{enumerate_projective_trees, marginals, viterbi_decode, ArcScores};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| error_json(&e.to_string())),
        Err(e) => error_json(&e),
    }
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

#[derive(Serialize)]
pub struct TreeView {
    pub n: usize,
    pub log_z: f64,
    /// `marginals[h][d-1]`: probability that word `d` attaches to `h` (0 = root).
    pub marginals: Vec<Vec<f64>>,
    pub viterbi: Vec<usize>,
    pub viterbi_score: f64,
    /// Number of projective single-root trees, for short sentences.
    pub trees: Option<usize>,
}

pub fn tree_view(scores_json: &str, temperature: f64) -> Result<TreeView, String> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(format!("temperature must be positive, got {}", temperature));
    }
    let rows: Vec<Vec<f64>> = serde_json::from_str(scores_json).map_err(|e| e.to_string())?;
    let mut m = Matrix::from_rows(&rows).map_err(|e| e.to_string())?;
    if m.rows != m.cols + 1 {
        return Err(format!("expected n+1 rows of n scores, got {}x{}", m.rows, m.cols));
    }
    m.scale(1.0 / temperature);
    let s = ArcScores::new(m).map_err(|e| e.to_string())?;
    let dist = marginals(&s).map_err(|e| e.to_string())?;
    let viterbi = viterbi_decode(&s).map_err(|e| e.to_string())?;
    let n = s.len();
    Ok(TreeView {
        n,
        log_z: dist.log_z,
        marginals: (0..=n).map(|h| dist.marginals.row(h).to_vec()).collect(),
        viterbi_score: s.tree_score(&viterbi) * temperature,
        viterbi,
        trees: if n <= 8 {
            enumerate_projective_trees(n).ok().map(|t| t.len())
        } else {
            None
        },
    })
}

/// Arc-factored tree distribution for a score matrix given as `n+1` rows
/// (row 0 is the root) of `n` columns, sharpened or flattened by `temperature`.
#[wasm_bindgen]
pub fn tree_marginals(scores_json: &str, temperature: f64) -> String {
    respond(tree_view(scores_json, temperature))
}

#[derive(Deserialize)]
pub struct CwiInput {
    pub forms: Vec<String>,
    /// Probability that each token is a content word.
    pub content: Vec<f64>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.6
}

#[derive(Serialize)]
pub struct CwiToken {
    pub form: String,
    pub initial: &'static str,
    pub confidence: f64,
    pub label: &'static str,
    pub relabeled: bool,
}

#[derive(Serialize)]
pub struct CwiView {
    pub tokens: Vec<CwiToken>,
    /// Set when no content word survived and the first token was promoted.
    pub fallback: bool,
}

fn label_name(l: usize) -> &'static str {
    if l == CONTENT {
        "content"
    } else {
        "function"
    }
}

pub fn cwi_view(input_json: &str) -> Result<CwiView, String> {
    let input: CwiInput = serde_json::from_str(input_json).map_err(|e| e.to_string())?;
    if input.forms.len() != input.content.len() {
        return Err(format!("{} forms but {} probabilities", input.forms.len(), input.content.len()));
    }
    if let Some(p) = input.content.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(format!("probability {} outside [0, 1]", p));
    }
    let initial: Vec<usize> = input.content.iter().map(|&p| if p >= 0.5 { CONTENT } else { FUNCTION }).collect();
    let confidence: Vec<f64> = input.content.iter().map(|&p| p.max(1.0 - p)).collect();
    let (mut labels, flipped) = relabel_low_confidence(&initial, &confidence, input.threshold);
    let fallback = all_function_fallback(&mut labels);
    Ok(CwiView {
        tokens: input
            .forms
            .into_iter()
            .enumerate()
            .map(|(i, form)| CwiToken {
                form,
                initial: label_name(initial[i]),
                confidence: confidence[i],
                label: label_name(labels[i]),
                relabeled: flipped[i],
            })
            .collect(),
        fallback,
    })
}

/// Post-process content-word probabilities: low-confidence relabeling, then
/// the single-root fallback.
#[wasm_bindgen]
pub fn cwi_postprocess(input_json: &str) -> String {
    respond(cwi_view(input_json))
}

/// Score two CoNLL-U documents: MSLAS, LAS and Feats.
#[wasm_bindgen]
pub fn evaluate_conllu(gold: &str, system: &str) -> String {
    respond((|| {
        let g = parse_conllu(gold).map_err(|e| format!("gold: {}", e))?;
        let s = parse_conllu(system).map_err(|e| format!("system: {}", e))?;
        evaluate(&g, &s).map_err(|e| e.to_string())
    })())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_word_tree() {
        let v = tree_view("[[0,0],[0,0],[0,0]]", 1.0).unwrap();
        assert_eq!(v.trees, Some(2));
        assert!((v.log_z - 2f64.ln()).abs() < 1e-12);
        assert!((v.marginals[0][0] - 0.5).abs() < 1e-12);
        assert_eq!(v.viterbi, vec![0, 1]);
    }

    #[test]
    fn low_temperature_concentrates_mass() {
        let scores = "[[0,3,0],[1,0,0],[0,2,0.5],[0,0,2]]";
        let warm = tree_view(scores, 5.0).unwrap();
        let cold = tree_view(scores, 0.05).unwrap();
        let mass = |v: &TreeView| -> f64 { (0..3).map(|d| v.marginals[v.viterbi[d]][d]).product() };
        assert!(mass(&cold) > 0.99);
        assert!(mass(&warm) < mass(&cold));
        assert_eq!(warm.viterbi, cold.viterbi);
    }

    #[test]
    fn bad_matrices_are_reported() {
        assert!(tree_marginals("[[0,0],[0,0]]", 1.0).contains("error"));
        assert!(tree_marginals("[[0]]", 0.0).contains("temperature"));
        assert!(tree_marginals("nope", 1.0).contains("error"));
    }

    #[test]
    fn relabel_and_fallback() {
        let v = cwi_view(r#"{"forms": ["the", "cat", "of"], "content": [0.1, 0.55, 0.2]}"#).unwrap();
        let labels: Vec<&str> = v.tokens.iter().map(|t| t.label).collect();
        assert_eq!(labels, ["content", "function", "function"]);
        assert!(v.tokens[1].relabeled);
        assert!(v.fallback);
        let v = cwi_view(r#"{"forms": ["a", "b"], "content": [0.1, 0.2]}"#).unwrap();
        assert_eq!(v.tokens[0].label, "content");
        assert!(v.fallback);
        assert!(cwi_postprocess(r#"{"forms": ["a"], "content": []}"#).contains("error"));
    }

    #[test]
    fn evaluation_round_trip() {
        let doc = "# sent_id = 1\n1\tdogs\tdog\tNOUN\t_\tNumber=Plur\t2\tnsubj\t_\t_\n2\tbark\tbark\tVERB\t_\tMood=Ind\t0\troot\t_\t_\n\n";
        let r: serde_json::Value = serde_json::from_str(&evaluate_conllu(doc, doc)).unwrap();
        assert_eq!(r["mslas"]["f1"], 100.0);
        assert!(evaluate_conllu(doc, "").contains("error"));
    }
}
