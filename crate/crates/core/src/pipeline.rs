//! Inference over pre-tokenized sentences: CWI, post-processing, parsing of
//! the predicted content words and feature prediction.

use serde::{Deserialize, Serialize};

use crate::data::{recompose_feats, Corpus, FeatureSet, Sentence, CONTENT};
use crate::decoders::cwi_decision;
use crate::encoder::ExternalEmbeddings;
use crate::error::Result;
use crate::model::Model;
use crate::numkern::Matrix;

/// How an empty feature set on a content word is written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyFeats {
    /// The literal `|`, which keeps the word readable as content.
    Pipe,
    Underscore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub relabel_threshold: f64,
    pub empty_feats: EmptyFeats,
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            relabel_threshold: 0.6,
            empty_feats: EmptyFeats::Pipe,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenPrediction {
    pub cwi_label: usize,
    pub confidence: f64,
    /// Token id of the head (0 = root); content words only.
    pub head: Option<usize>,
    pub deprel: Option<String>,
    pub feats: Option<FeatureSet>,
    pub relabeled_by_rule: bool,
    pub forced_fallback: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub tokens: Vec<TokenPrediction>,
}

impl Prediction {
    pub fn relabeled(&self) -> usize {
        self.tokens.iter().filter(|t| t.relabeled_by_rule).count()
    }

    pub fn forced_fallback(&self) -> bool {
        self.tokens.iter().any(|t| t.forced_fallback)
    }
}

/// Instrumentation of one annotated sentence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictTrace {
    pub shared_passes: usize,
    /// Token positions handed to the parser.
    pub parser_rows: Vec<usize>,
}

/// Flip an interior token whose confidence is below `threshold` when both
/// neighbours carry the other label. One left-to-right pass; neighbours are
/// read after earlier flips.
pub fn relabel_low_confidence(labels: &[usize], confidences: &[f64], threshold: f64) -> (Vec<usize>, Vec<bool>) {
    let mut out = labels.to_vec();
    let mut flipped = vec![false; labels.len()];
    for i in 1..labels.len().saturating_sub(1) {
        let other = 1 - out[i];
        if confidences[i] < threshold && out[i - 1] == other && out[i + 1] == other {
            out[i] = other;
            flipped[i] = true;
        }
    }
    (out, flipped)
}

/// When no token is content, make the first one content. Returns whether the
/// rule fired.
pub fn all_function_fallback(labels: &mut [usize]) -> bool {
    if labels.is_empty() || labels.contains(&CONTENT) {
        return false;
    }
    labels[0] = CONTENT;
    true
}

/// Annotate one sentence given its shared representation and CWI probabilities.
pub fn annotate(
    model: &Model,
    h: &Matrix,
    cwi_probs: &[[f64; 2]],
    config: &PipelineConfig,
    trace: Option<&mut PredictTrace>,
) -> Result<Prediction> {
    let (labels, confidences): (Vec<usize>, Vec<f64>) = cwi_probs.iter().map(cwi_decision).unzip();
    let (mut labels, flipped) = relabel_low_confidence(&labels, &confidences, config.relabel_threshold);
    let forced = all_function_fallback(&mut labels);
    let mut tokens: Vec<TokenPrediction> = (0..labels.len())
        .map(|i| TokenPrediction {
            cwi_label: labels[i],
            confidence: confidences[i],
            head: None,
            deprel: None,
            feats: None,
            relabeled_by_rule: flipped[i],
            forced_fallback: false,
        })
        .collect();
    if forced {
        let t = &mut tokens[0];
        t.head = Some(0);
        t.deprel = Some("root".into());
        t.feats = Some(FeatureSet::new());
        t.forced_fallback = true;
        return Ok(Prediction { tokens });
    }
    let content: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == CONTENT).collect();
    if let Some(t) = trace {
        t.parser_rows = content.clone();
    }
    if content.is_empty() {
        return Ok(Prediction { tokens });
    }
    let (heads, rels, feats) = model.parse_content(h, &content)?;
    for (k, &i) in content.iter().enumerate() {
        let t = &mut tokens[i];
        t.head = Some(if heads[k] == 0 { 0 } else { content[heads[k] - 1] + 1 });
        t.deprel = Some(
            model
                .vocab
                .deprels
                .get(rels[k])
                .cloned()
                .unwrap_or_else(|| "dep".into()),
        );
        t.feats = Some(feats[k].clone());
    }
    Ok(Prediction { tokens })
}

/// Write a prediction into a copy of the input sentence.
pub fn apply_prediction(input: &Sentence, p: &Prediction, config: &PipelineConfig) -> Sentence {
    let mut out = input.clone();
    for (t, tp) in out.tokens.iter_mut().zip(&p.tokens) {
        t.is_content = tp.cwi_label == CONTENT;
        t.head = tp.head;
        t.deprel = tp.deprel.clone();
        match &tp.feats {
            Some(f) if t.is_content => {
                t.feats = f.clone();
                t.feats_raw = if f.is_empty() {
                    match config.empty_feats {
                        EmptyFeats::Pipe => "|".into(),
                        EmptyFeats::Underscore => "_".into(),
                    }
                } else {
                    recompose_feats(f)
                };
            }
            _ => {
                t.feats = FeatureSet::new();
                t.feats_raw = "_".into();
            }
        }
        if t.feats_raw == "_" {
            t.is_content = false;
        }
    }
    out
}

/// Annotate one sentence end to end.
pub fn predict_sentence(
    model: &Model,
    sentence: &Sentence,
    input: Option<&Matrix>,
    config: &PipelineConfig,
    trace: Option<&mut PredictTrace>,
) -> Result<(Sentence, Prediction)> {
    if sentence.tokens.is_empty() {
        return Ok((sentence.clone(), Prediction::default()));
    }
    let h = model.shared_repr(&sentence.forms(), input)?;
    let probs = model.cwi_probs(&h)?;
    let trace = trace.map(|t| {
        t.shared_passes += 1;
        &mut *t
    });
    let p = annotate(model, &h, &probs, config, trace)?;
    Ok((apply_prediction(sentence, &p, config), p))
}

/// Counts of post-processing interventions over a corpus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub sentences: usize,
    pub relabeled_tokens: usize,
    pub fallback_sentences: usize,
}

/// Annotate a corpus, optionally on several threads. Output order follows input.
pub fn predict(
    model: &Model,
    sentences: &[Sentence],
    inputs: Option<&ExternalEmbeddings>,
    config: &PipelineConfig,
) -> Result<(Corpus, PredictSummary)> {
    if let Some(ext) = inputs {
        ext.check_alignment(sentences)?;
    }
    let run = |range: std::ops::Range<usize>| -> Result<Vec<(Sentence, Prediction)>> {
        range
            .map(|i| {
                let input = inputs.map(|e| &e.sentences[i].1);
                predict_sentence(model, &sentences[i], input, config, None)
            })
            .collect()
    };
    let threads = config.threads.max(1).min(sentences.len().max(1));
    let results: Vec<(Sentence, Prediction)> = if threads == 1 {
        run(0..sentences.len())?
    } else {
        let chunk = sentences.len().div_ceil(threads);
        let parts: Vec<Result<Vec<_>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let lo = (t * chunk).min(sentences.len());
                    let hi = ((t + 1) * chunk).min(sentences.len());
                    scope.spawn(move || run(lo..hi))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("prediction thread panicked")).collect()
        });
        let mut all = Vec::with_capacity(sentences.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    let mut summary = PredictSummary {
        sentences: results.len(),
        ..Default::default()
    };
    let mut corpus = Vec::with_capacity(results.len());
    for (s, p) in results {
        summary.relabeled_tokens += p.relabeled();
        summary.fallback_sentences += usize::from(p.forced_fallback());
        corpus.push(s);
    }
    Ok((corpus, summary))
}

/// One pre-tokenized sentence per non-empty line, tokens separated by whitespace.
pub fn parse_plain_text(text: &str) -> Corpus {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let forms: Vec<&str> = line.split_whitespace().collect();
            let mut s = Sentence::from_forms((i + 1).to_string(), &forms);
            s.text = Some(forms.join(" "));
            s
        })
        .collect()
}

/// Strip annotations, leaving forms and comments.
pub fn forms_only(s: &Sentence) -> Sentence {
    let mut out = s.clone();
    for t in &mut out.tokens {
        t.lemma = "_".into();
        t.upos = "_".into();
        t.xpos = "_".into();
        t.feats_raw = "_".into();
        t.feats = FeatureSet::new();
        t.head = None;
        t.deprel = None;
        t.deps = "_".into();
        t.misc = "_".into();
        t.is_content = false;
    }
    out
}

/// Labels implied by a gold sentence, handy for stub CWI probabilities.
pub fn gold_cwi_probs(s: &Sentence) -> Vec<[f64; 2]> {
    s.tokens
        .iter()
        .map(|t| if t.is_content { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect()
}
