//! MSLAS, LAS and Feats F1 over content words, with token alignment by
//! character spans.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSet, Sentence};
use crate::error::{Error, Result};

/// Matched token indices (0-based) and the leftovers on each side.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_gold: Vec<usize>,
    pub unmatched_sys: Vec<usize>,
}

/// Spans over the sentence's non-whitespace characters.
fn nonspace_spans(s: &Sentence) -> (Vec<(usize, usize)>, String) {
    let mut offset = 0;
    let mut all = String::new();
    let spans = s
        .tokens
        .iter()
        .map(|t| {
            let chars: String = t.form.chars().filter(|c| !c.is_whitespace()).collect();
            let len = chars.chars().count();
            all.push_str(&chars);
            let span = (offset, offset + len);
            offset += len;
            span
        })
        .collect();
    (spans, all)
}

/// Align two tokenizations of the same character string. Tokens align when
/// they cover exactly the same characters; as spans are ordered this longest
/// common subsequence is a single merge.
pub fn align_tokens(gold: &Sentence, sys: &Sentence) -> Result<Alignment> {
    let (gs, gtext) = nonspace_spans(gold);
    let (ss, stext) = nonspace_spans(sys);
    let mut out = Alignment::default();
    if gold.tokens.is_empty() || sys.tokens.is_empty() {
        out.unmatched_gold = (0..gs.len()).collect();
        out.unmatched_sys = (0..ss.len()).collect();
        return Ok(out);
    }
    if gtext != stext {
        return Err(Error::Alignment(format!(
            "sentence {}: gold and system text differ ({:?} vs {:?})",
            gold.sent_id, gtext, stext
        )));
    }
    let (mut i, mut j) = (0, 0);
    while i < gs.len() && j < ss.len() {
        if gs[i] == ss[j] {
            out.pairs.push((i, j));
            i += 1;
            j += 1;
        } else if gs[i].1 < ss[j].1 || (gs[i].1 == ss[j].1 && gs[i].0 > ss[j].0) {
            out.unmatched_gold.push(i);
            i += 1;
        } else {
            out.unmatched_sys.push(j);
            j += 1;
        }
    }
    out.unmatched_gold.extend(i..gs.len());
    out.unmatched_sys.extend(j..ss.len());
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    fn ratio(num: usize, den: usize, empty: bool) -> f64 {
        if den == 0 {
            if empty {
                100.0
            } else {
                0.0
            }
        } else {
            100.0 * num as f64 / den as f64
        }
    }

    fn empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    /// Percentages; with nothing to score at all every value is 100.
    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp, self.empty())
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_, self.empty())
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn set_compare(&mut self, gold: &FeatureSet, sys: &FeatureSet) {
        let tp = gold.intersection(sys).count();
        self.tp += tp;
        self.fp += sys.len() - tp;
        self.fn_ += gold.len() - tp;
    }

    pub fn score(&self) -> Score {
        Score {
            p: round1(self.precision()),
            r: round1(self.recall()),
            f1: round1(self.f1()),
            counts: *self,
        }
    }
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Rounded percentages plus raw counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub counts: Counts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub mslas: Counts,
    pub las: Counts,
    pub feats: Counts,
}

impl EvalCounts {
    pub fn add(&mut self, o: &EvalCounts) {
        self.mslas.add(o.mslas);
        self.las.add(o.las);
        self.feats.add(o.feats);
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            mslas: self.mslas.score(),
            las: self.las.score(),
            feats: self.feats.score(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mslas: Score,
    pub las: Score,
    pub feats: Score,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8}{:>10}{:>10}{:>10}", "Metric", "Precision", "Recall", "F1")?;
        for (name, s) in [("MSLAS", self.mslas), ("LAS", self.las), ("Feats", self.feats)] {
            writeln!(f, "{:<8}{:>10.1}{:>10.1}{:>10.1}", name, s.p, s.r, s.f1)?;
        }
        Ok(())
    }
}

/// Per-token LAS verdicts for an aligned pair (indexed by gold token).
pub fn las_correct(gold: &Sentence, sys: &Sentence, al: &Alignment) -> Vec<bool> {
    let sys_to_gold: HashMap<usize, usize> = al.pairs.iter().map(|&(g, s)| (s, g)).collect();
    let mut ok = vec![false; gold.tokens.len()];
    for &(g, s) in &al.pairs {
        let (gt, st) = (&gold.tokens[g], &sys.tokens[s]);
        if !(gt.is_content && st.is_content) {
            continue;
        }
        let head_ok = match (gt.head, st.head) {
            (Some(0), Some(0)) => true,
            (Some(gh), Some(sh)) if gh > 0 && sh > 0 => sys_to_gold.get(&(sh - 1)) == Some(&(gh - 1)),
            _ => false,
        };
        ok[g] = head_ok && gt.deprel.is_some() && gt.deprel == st.deprel;
    }
    ok
}

fn content_feats(t: &crate::data::Token) -> FeatureSet {
    if t.is_content {
        t.feats.clone()
    } else {
        FeatureSet::new()
    }
}

pub fn evaluate_sentence(gold: &Sentence, sys: &Sentence) -> Result<EvalCounts> {
    let al = align_tokens(gold, sys)?;
    let correct = las_correct(gold, sys, &al);
    let mut c = EvalCounts::default();
    let tp = correct.iter().filter(|&&x| x).count();
    c.las = Counts {
        tp,
        fp: sys.content_count() - tp,
        fn_: gold.content_count() - tp,
    };
    for &(g, s) in &al.pairs {
        let (gf, sf) = (content_feats(&gold.tokens[g]), content_feats(&sys.tokens[s]));
        c.feats.set_compare(&gf, &sf);
        if correct[g] {
            c.mslas.set_compare(&gf, &sf);
        } else {
            c.mslas.fp += sf.len();
            c.mslas.fn_ += gf.len();
        }
    }
    for &g in &al.unmatched_gold {
        let n = content_feats(&gold.tokens[g]).len();
        c.feats.fn_ += n;
        c.mslas.fn_ += n;
    }
    for &s in &al.unmatched_sys {
        let n = content_feats(&sys.tokens[s]).len();
        c.feats.fp += n;
        c.mslas.fp += n;
    }
    Ok(c)
}

/// Pair sentences by `sent_id` when both sides carry the same complete set of
/// ids, otherwise by position.
pub fn pair_sentences<'a>(
    gold: &'a [Sentence],
    sys: &'a [Sentence],
) -> Result<Vec<(&'a Sentence, &'a Sentence)>> {
    let ids = |c: &[Sentence]| -> Option<BTreeSet<String>> {
        let set: BTreeSet<String> = c.iter().map(|s| s.sent_id.clone()).collect();
        (set.len() == c.len() && !set.contains("")).then_some(set)
    };
    if let (Some(g), Some(s)) = (ids(gold), ids(sys)) {
        if g == s {
            let by_id: HashMap<&str, &Sentence> = sys.iter().map(|s| (s.sent_id.as_str(), s)).collect();
            return Ok(gold.iter().map(|g| (g, by_id[g.sent_id.as_str()])).collect());
        }
    }
    if gold.len() != sys.len() {
        let list = |c: &[Sentence]| {
            c.iter()
                .enumerate()
                .map(|(i, s)| if s.sent_id.is_empty() { format!("#{}", i + 1) } else { s.sent_id.clone() })
                .collect::<Vec<_>>()
                .join(", ")
        };
        return Err(Error::Eval(format!(
            "{} gold sentences [{}] vs {} system sentences [{}]",
            gold.len(),
            list(gold),
            sys.len(),
            list(sys)
        )));
    }
    Ok(gold.iter().zip(sys).collect())
}

pub fn evaluate_counts(gold: &[Sentence], sys: &[Sentence]) -> Result<EvalCounts> {
    let mut total = EvalCounts::default();
    for (g, s) in pair_sentences(gold, sys)? {
        total.add(&evaluate_sentence(g, s)?);
    }
    Ok(total)
}

/// Corpus-level micro-averaged report.
pub fn evaluate(gold: &[Sentence], sys: &[Sentence]) -> Result<MetricReport> {
    Ok(evaluate_counts(gold, sys)?.report())
}

pub fn las(gold: &[Sentence], sys: &[Sentence]) -> Result<Score> {
    Ok(evaluate(gold, sys)?.las)
}

pub fn feats_f1(gold: &[Sentence], sys: &[Sentence]) -> Result<Score> {
    Ok(evaluate(gold, sys)?.feats)
}

pub fn mslas(gold: &[Sentence], sys: &[Sentence]) -> Result<Score> {
    Ok(evaluate(gold, sys)?.mslas)
}

/// Parse both files' contents and evaluate.
pub fn report(gold_text: &str, sys_text: &str) -> Result<MetricReport> {
    let gold = crate::data::parse_conllu(gold_text)?;
    let sys = crate::data::parse_conllu(sys_text)?;
    evaluate(&gold, &sys)
}
