//! Error analysis: feature and relation confusions, attachment distance and
//! direction of head errors, and Case metrics over a chosen value subset.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Sentence, Token};
use crate::error::{Error, Result};
use crate::eval::{align_tokens, pair_sentences, Counts, Score};

/// Canonical label of one class's values in a raw FEATS cell, keeping
/// syncretic `,` groups together. `_` when the class is absent.
pub fn class_label(feats_raw: &str, class: &str) -> String {
    let mut groups: Vec<String> = feats_raw
        .split('|')
        .filter_map(|e| e.split_once('='))
        .filter(|(c, _)| *c == class)
        .flat_map(|(_, v)| v.split(';'))
        .map(|g| {
            let mut parts: Vec<&str> = g.split(',').collect();
            parts.sort_unstable();
            parts.join(",")
        })
        .collect();
    if groups.is_empty() {
        return "_".into();
    }
    groups.sort();
    groups.dedup();
    groups.join(";")
}

type AlignedPair<'a> = (&'a Sentence, &'a Sentence, Vec<(usize, usize)>);

/// Aligned (gold, system) token pairs of every sentence.
fn aligned<'a>(gold: &'a [Sentence], sys: &'a [Sentence]) -> Result<Vec<AlignedPair<'a>>> {
    pair_sentences(gold, sys)?
        .into_iter()
        .map(|(g, s)| Ok((g, s, align_tokens(g, s)?.pairs)))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub scope: String,
    /// (gold, predicted) → count.
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
}

impl ConfusionTable {
    pub fn add(&mut self, gold: &str, pred: &str) {
        *self
            .counts
            .entry(gold.to_string())
            .or_default()
            .entry(pred.to_string())
            .or_default() += 1;
    }

    pub fn get(&self, gold: &str, pred: &str) -> usize {
        self.counts.get(gold).and_then(|r| r.get(pred)).copied().unwrap_or(0)
    }

    pub fn gold_labels(&self) -> Vec<String> {
        self.counts.keys().cloned().collect()
    }

    pub fn pred_labels(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.counts.values().flat_map(|r| r.keys()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn diagonal(&self) -> usize {
        self.counts.iter().map(|(g, r)| r.get(g).copied().unwrap_or(0)).sum()
    }

    /// Disagreements as (count, gold, predicted), most frequent first.
    pub fn errors(&self) -> Vec<(usize, String, String)> {
        let mut out: Vec<(usize, String, String)> = self
            .counts
            .iter()
            .flat_map(|(g, r)| r.iter().filter(move |(p, _)| *p != g).map(move |(p, &c)| (c, g.clone(), p.clone())))
            .collect();
        sort_errors(&mut out);
        out
    }
}

fn sort_errors(rows: &mut [(usize, String, String)]) {
    rows.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.2.cmp(&b.2)));
}

impl fmt::Display for ConfusionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cols = self.pred_labels();
        let rows = self.gold_labels();
        let w = rows
            .iter()
            .chain(&cols)
            .map(|s| s.chars().count())
            .chain([self.scope.chars().count(), 5])
            .max()
            .unwrap_or(5)
            + 2;
        write!(f, "{:<w$}", self.scope, w = w)?;
        for c in &cols {
            write!(f, "{:>w$}", c, w = w)?;
        }
        writeln!(f)?;
        for r in &rows {
            write!(f, "{:<w$}", r, w = w)?;
            for c in &cols {
                write!(f, "{:>w$}", self.get(r, c), w = w)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Per-class confusion over aligned content-word pairs where either side
/// carries the class.
pub fn feature_confusions(gold: &[Sentence], sys: &[Sentence], class: &str) -> Result<ConfusionTable> {
    let known = gold
        .iter()
        .chain(sys)
        .flat_map(|s| &s.tokens)
        .any(|t| t.feats.iter().any(|a| a.class == class));
    if !known {
        return Err(Error::Config(format!("feature class {:?} does not occur in either corpus", class)));
    }
    let mut table = ConfusionTable {
        scope: class.to_string(),
        ..Default::default()
    };
    for (g, s, pairs) in aligned(gold, sys)? {
        for (gi, si) in pairs {
            let (gt, st) = (&g.tokens[gi], &s.tokens[si]);
            if !(gt.is_content && st.is_content) {
                continue;
            }
            let (gl, sl) = (class_label(&gt.feats_raw, class), class_label(&st.feats_raw, class));
            if gl != "_" || sl != "_" {
                table.add(&gl, &sl);
            }
        }
    }
    Ok(table)
}

/// Classes present on gold content words, sorted.
pub fn feature_classes(corpus: &[Sentence]) -> Vec<String> {
    let set: BTreeSet<String> = corpus
        .iter()
        .flat_map(|s| &s.tokens)
        .flat_map(|t| t.feats.iter().map(|a| a.class.clone()))
        .collect();
    set.into_iter().collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeprelConfusions {
    /// Head correct, label wrong.
    pub label_swaps: Vec<(usize, String, String)>,
    /// Content/function disagreements, `_` on the function side.
    pub cwi_rows: Vec<(usize, String, String)>,
    /// Both kinds together, truncated to `top_k`.
    pub merged: Vec<(usize, String, String)>,
}

fn head_aligned(g: &Sentence, s: &Sentence, pairs: &[(usize, usize)], gi: usize, si: usize) -> bool {
    let sys_to_gold: HashMap<usize, usize> = pairs.iter().map(|&(a, b)| (b, a)).collect();
    match (g.tokens[gi].head, s.tokens[si].head) {
        (Some(0), Some(0)) => true,
        (Some(gh), Some(sh)) if gh > 0 && sh > 0 => sys_to_gold.get(&(sh - 1)) == Some(&(gh - 1)),
        _ => false,
    }
}

fn label(t: &Token) -> String {
    t.deprel.clone().unwrap_or_else(|| "_".into())
}

pub fn deprel_confusions(gold: &[Sentence], sys: &[Sentence], top_k: usize) -> Result<DeprelConfusions> {
    let mut swaps: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut cwi: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (g, s, pairs) in aligned(gold, sys)? {
        for &(gi, si) in &pairs {
            let (gt, st) = (&g.tokens[gi], &s.tokens[si]);
            match (gt.is_content, st.is_content) {
                (true, true) => {
                    if gt.deprel != st.deprel && head_aligned(g, s, &pairs, gi, si) {
                        *swaps.entry((label(gt), label(st))).or_default() += 1;
                    }
                }
                (true, false) => *cwi.entry((label(gt), "_".into())).or_default() += 1,
                (false, true) => *cwi.entry(("_".into(), label(st))).or_default() += 1,
                (false, false) => {}
            }
        }
    }
    let rows = |m: BTreeMap<(String, String), usize>| {
        let mut v: Vec<(usize, String, String)> = m.into_iter().map(|((g, p), c)| (c, g, p)).collect();
        sort_errors(&mut v);
        v
    };
    let label_swaps = rows(swaps);
    let cwi_rows = rows(cwi);
    let mut merged: Vec<_> = label_swaps.iter().chain(&cwi_rows).cloned().collect();
    sort_errors(&mut merged);
    merged.truncate(top_k);
    Ok(DeprelConfusions {
        label_swaps,
        cwi_rows,
        merged,
    })
}

/// Histogram bucket: an attachment distance, or the root arc.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Bucket {
    Dist(i64),
    Root,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bucket::Dist(d) => write!(f, "{}", d),
            Bucket::Root => write!(f, "root"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistanceHistogram {
    pub signed: bool,
    pub gold: BTreeMap<Bucket, usize>,
    pub predicted: BTreeMap<Bucket, usize>,
}

impl DistanceHistogram {
    pub fn errors(&self) -> usize {
        self.gold.values().sum()
    }

    fn series_json(m: &BTreeMap<Bucket, usize>) -> serde_json::Value {
        serde_json::Value::Object(m.iter().map(|(k, v)| (k.to_string(), (*v).into())).collect())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "signed": self.signed,
            "gold": Self::series_json(&self.gold),
            "predicted": Self::series_json(&self.predicted),
        })
    }
}

fn bucket(head: usize, dep: usize, signed: bool) -> Bucket {
    if head == 0 {
        return Bucket::Root;
    }
    let d = head as i64 - dep as i64;
    Bucket::Dist(if signed { d } else { d.abs() })
}

/// Aligned content pairs whose predicted head is wrong: (gold head, gold id,
/// system head, system id).
fn head_errors(gold: &[Sentence], sys: &[Sentence]) -> Result<Vec<(usize, usize, usize, usize)>> {
    let mut out = Vec::new();
    for (g, s, pairs) in aligned(gold, sys)? {
        for &(gi, si) in &pairs {
            let (gt, st) = (&g.tokens[gi], &s.tokens[si]);
            if !(gt.is_content && st.is_content) {
                continue;
            }
            if let (Some(gh), Some(sh)) = (gt.head, st.head) {
                if !head_aligned(g, s, &pairs, gi, si) {
                    out.push((gh, gt.id, sh, st.id));
                }
            }
        }
    }
    Ok(out)
}

/// Distances of head errors, gold and predicted, absolute unless `signed`.
pub fn attachment_distance_histogram(gold: &[Sentence], sys: &[Sentence], signed: bool) -> Result<DistanceHistogram> {
    let mut h = DistanceHistogram {
        signed,
        ..Default::default()
    };
    for (gh, gd, sh, sd) in head_errors(gold, sys)? {
        *h.gold.entry(bucket(gh, gd, signed)).or_default() += 1;
        *h.predicted.entry(bucket(sh, sd, signed)).or_default() += 1;
    }
    Ok(h)
}

pub const DIRECTIONS: [&str; 3] = ["LEFT", "RIGHT", "ROOT"];

/// LEFT when the head precedes the dependent.
fn direction(head: usize, dep: usize) -> usize {
    match head {
        0 => 2,
        h if h < dep => 0,
        _ => 1,
    }
}

/// Gold × predicted direction counts over head errors.
pub fn direction_confusion(gold: &[Sentence], sys: &[Sentence]) -> Result<[[usize; 3]; 3]> {
    let mut m = [[0; 3]; 3];
    for (gh, gd, sh, sd) in head_errors(gold, sys)? {
        m[direction(gh, gd)][direction(sh, sd)] += 1;
    }
    Ok(m)
}

/// Read a value list, one per line; blank lines and `#` comments are skipped.
pub fn parse_value_list(text: &str) -> Result<Vec<String>> {
    let values: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if values.is_empty() {
        return Err(Error::Config("spatial case list is empty".into()));
    }
    Ok(values)
}

/// Feats F1 restricted to `Case=v` with `v` in `values`.
pub fn spatial_case_metrics(gold: &[Sentence], sys: &[Sentence], values: &[String]) -> Result<Score> {
    if values.is_empty() {
        return Err(Error::Config("spatial case list is empty".into()));
    }
    let keep: BTreeSet<&str> = values.iter().map(String::as_str).collect();
    let select = |t: &Token| -> BTreeSet<String> {
        if !t.is_content {
            return BTreeSet::new();
        }
        t.feats
            .iter()
            .filter(|a| a.class == "Case" && keep.contains(a.value.as_str()))
            .map(|a| a.value.clone())
            .collect()
    };
    let mut c = Counts::default();
    for (g, s) in pair_sentences(gold, sys)? {
        let al = align_tokens(g, s)?;
        for &(gi, si) in &al.pairs {
            let (a, b) = (select(&g.tokens[gi]), select(&s.tokens[si]));
            let tp = a.intersection(&b).count();
            c.tp += tp;
            c.fn_ += a.len() - tp;
            c.fp += b.len() - tp;
        }
        c.fn_ += al.unmatched_gold.iter().map(|&i| select(&g.tokens[i]).len()).sum::<usize>();
        c.fp += al.unmatched_sys.iter().map(|&i| select(&s.tokens[i]).len()).sum::<usize>();
    }
    Ok(c.score())
}

#[derive(Clone, Debug, Default)]
pub struct AnalysisOptions {
    pub classes: Vec<String>,
    pub top_k: usize,
    pub signed: bool,
    pub spatial: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisReport {
    pub features: Vec<ConfusionTable>,
    pub deprels: DeprelConfusions,
    pub distances: DistanceHistogram,
    pub directions: [[usize; 3]; 3],
    pub spatial: Option<Score>,
}

/// Run every analysis. With no classes given, all gold classes are tabulated.
pub fn analyze(gold: &[Sentence], sys: &[Sentence], opts: &AnalysisOptions) -> Result<AnalysisReport> {
    let classes = if opts.classes.is_empty() {
        feature_classes(gold)
    } else {
        opts.classes.clone()
    };
    Ok(AnalysisReport {
        features: classes
            .iter()
            .map(|c| feature_confusions(gold, sys, c))
            .collect::<Result<_>>()?,
        deprels: deprel_confusions(gold, sys, opts.top_k)?,
        distances: attachment_distance_histogram(gold, sys, opts.signed)?,
        directions: direction_confusion(gold, sys)?,
        spatial: opts
            .spatial
            .as_ref()
            .map(|v| spatial_case_metrics(gold, sys, v))
            .transpose()?,
    })
}

impl AnalysisReport {
    pub fn to_json(&self) -> serde_json::Value {
        let rows = |v: &[(usize, String, String)]| -> serde_json::Value {
            v.iter()
                .map(|(c, g, p)| serde_json::json!({"count": c, "gold": g, "predicted": p}))
                .collect()
        };
        serde_json::json!({
            "features": self.features.iter().map(|t| serde_json::json!({
                "class": t.scope,
                "matrix": t.counts,
                "errors": rows(&t.errors()),
            })).collect::<Vec<_>>(),
            "deprels": {
                "label_swaps": rows(&self.deprels.label_swaps),
                "cwi": rows(&self.deprels.cwi_rows),
                "top": rows(&self.deprels.merged),
            },
            "distances": self.distances.to_json(),
            "directions": {"labels": DIRECTIONS, "matrix": self.directions},
            "spatial": self.spatial,
        })
    }
}

fn write_rows(f: &mut fmt::Formatter<'_>, rows: &[(usize, String, String)]) -> fmt::Result {
    if rows.is_empty() {
        return writeln!(f, "  (none)");
    }
    writeln!(f, "  {:>7}  {:<16}{:<16}", "Count", "Gold", "Predicted")?;
    for (c, g, p) in rows {
        writeln!(f, "  {:>7}  {:<16}{:<16}", c, g, p)?;
    }
    Ok(())
}

impl fmt::Display for AnalysisReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.features {
            writeln!(f, "== Feature confusions: {} ==", t.scope)?;
            write!(f, "{}", t)?;
            writeln!(f, "Most frequent errors:")?;
            write_rows(f, &t.errors())?;
            writeln!(f)?;
        }
        writeln!(f, "== Deprel errors (top) ==")?;
        write_rows(f, &self.deprels.merged)?;
        writeln!(f, "-- head correct, label wrong --")?;
        write_rows(f, &self.deprels.label_swaps)?;
        writeln!(f, "-- content/function mismatches --")?;
        write_rows(f, &self.deprels.cwi_rows)?;
        writeln!(f)?;
        writeln!(
            f,
            "== Attachment distance of head errors ({}) ==",
            if self.distances.signed { "signed" } else { "absolute" }
        )?;
        let buckets: BTreeSet<Bucket> = self.distances.gold.keys().chain(self.distances.predicted.keys()).copied().collect();
        writeln!(f, "  {:>8}{:>8}{:>11}", "Distance", "Gold", "Predicted")?;
        for b in buckets {
            writeln!(
                f,
                "  {:>8}{:>8}{:>11}",
                b.to_string(),
                self.distances.gold.get(&b).unwrap_or(&0),
                self.distances.predicted.get(&b).unwrap_or(&0)
            )?;
        }
        writeln!(f)?;
        writeln!(f, "== Attachment direction of head errors (rows gold) ==")?;
        writeln!(f, "  {:<8}{:>8}{:>8}{:>8}", "", DIRECTIONS[0], DIRECTIONS[1], DIRECTIONS[2])?;
        for (i, row) in self.directions.iter().enumerate() {
            writeln!(f, "  {:<8}{:>8}{:>8}{:>8}", DIRECTIONS[i], row[0], row[1], row[2])?;
        }
        if let Some(s) = &self.spatial {
            writeln!(f)?;
            writeln!(f, "== Spatial case ==")?;
            writeln!(f, "  P {:.1}  R {:.1}  F1 {:.1}", s.p, s.r, s.f1)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_conllu, tests::AP_STORY};
    use crate::eval::evaluate;

    fn ap_story() -> Vec<Sentence> {
        parse_conllu(AP_STORY).unwrap()
    }

    const NOMINAL: &str = "# sent_id = n\n\
1\tmuž\tmuž\tNOUN\t_\tCase=Nom|Gender=Masc|Number=Sing\t3\tnsubj\t_\t_\n\
2\tv\tv\tADP\t_\t_\t_\t_\t_\t_\n\
3\tspí\tspát\tVERB\t_\tMood=Ind\t0\troot\t_\t_\n\
4\tdům\tdům\tNOUN\t_\tCase=Ine;Atr|Gender=Fem,Masc\t3\tobl\t_\t_\n\
5\tpes\tpes\tNOUN\t_\tCase=Nom|Gender=Masc\t4\tnmod\t_\t_\n";

    #[test]
    fn labels_keep_syncretism() {
        assert_eq!(class_label("Case=Ine;Atr|Gender=Masc,Fem", "Gender"), "Fem,Masc");
        assert_eq!(class_label("Case=Ine;Atr|Gender=Masc,Fem", "Case"), "Atr;Ine");
        assert_eq!(class_label("Number=Sing", "Case"), "_");
        assert_eq!(class_label("_", "Case"), "_");
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let g = parse_conllu(NOMINAL).unwrap();
        let t = feature_confusions(&g, &g, "Gender").unwrap();
        assert!(t.errors().is_empty());
        assert_eq!(t.diagonal(), 3);
        assert!(feature_confusions(&g, &g, "Tense").is_err());
        let r = analyze(&g, &g, &AnalysisOptions { top_k: 10, ..Default::default() }).unwrap();
        assert!(r.deprels.merged.is_empty());
        assert_eq!(r.distances.errors(), 0);
    }

    #[test]
    fn gender_confusion_cell() {
        let g = parse_conllu(NOMINAL).unwrap();
        let s = parse_conllu(&NOMINAL.replace("Case=Nom|Gender=Masc|Number=Sing", "Case=Nom|Gender=Fem|Number=Sing")).unwrap();
        let t = feature_confusions(&g, &s, "Gender").unwrap();
        assert_eq!(t.get("Masc", "Fem"), 1);
        assert_eq!(t.errors(), vec![(1, "Masc".to_string(), "Fem".to_string())]);
        assert!(t.to_string().contains("Fem,Masc"));
    }

    #[test]
    fn nmod_obl_swaps_and_cwi_rows() {
        let g = parse_conllu(NOMINAL).unwrap();
        let mut s = g.clone();
        s[0].tokens[3].deprel = Some("nmod".into());
        s[0].tokens[4].deprel = Some("obl".into());
        let d = deprel_confusions(&g, &s, 10).unwrap();
        assert_eq!(d.label_swaps.len(), 2);
        assert!(d.merged.contains(&(1, "obl".into(), "nmod".into())));
        // gold content predicted function
        s[0].tokens[0].is_content = false;
        s[0].tokens[0].deprel = None;
        s[0].tokens[0].head = None;
        let d = deprel_confusions(&g, &s, 1).unwrap();
        assert_eq!(d.cwi_rows, vec![(1, "nsubj".to_string(), "_".to_string())]);
        assert_eq!(d.merged.len(), 1);
    }

    #[test]
    fn distance_and_direction() {
        let g = parse_conllu(NOMINAL).unwrap();
        let mut s = g.clone();
        // pes: gold head 4 (distance 1), predicted head 1 (distance 4, now leftwards)
        s[0].tokens[4].head = Some(1);
        let h = attachment_distance_histogram(&g, &s, false).unwrap();
        assert_eq!(h.gold, BTreeMap::from([(Bucket::Dist(1), 1)]));
        assert_eq!(h.predicted, BTreeMap::from([(Bucket::Dist(4), 1)]));
        let signed = attachment_distance_histogram(&g, &s, true).unwrap();
        assert_eq!(signed.predicted, BTreeMap::from([(Bucket::Dist(-4), 1)]));
        let m = direction_confusion(&g, &s).unwrap();
        assert_eq!(m[0][0], 1);
        // the root word now attaches to word 1: ROOT becomes LEFT
        s[0].tokens[2].head = Some(1);
        let m = direction_confusion(&g, &s).unwrap();
        assert_eq!(m[2][0], 1);
        assert_eq!(m.iter().flatten().sum::<usize>(), attachment_distance_histogram(&g, &s, false).unwrap().errors());
    }

    #[test]
    fn spatial_cases() {
        let g = ap_story();
        let spatial = vec!["Abl".to_string(), "Ine".to_string()];
        assert_eq!(spatial_case_metrics(&g, &g, &spatial).unwrap().f1, 100.0);
        let mut s = g.clone();
        s[0].tokens[2].feats.remove(&"Case=Abl".parse().unwrap());
        s[0].tokens[2].feats.insert("Case=Gen".parse().unwrap());
        let r = spatial_case_metrics(&g, &s, &spatial).unwrap();
        assert_eq!((r.counts.tp, r.counts.fp, r.counts.fn_), (0, 0, 1));
        assert_eq!(r.r, 0.0);
        assert!(spatial_case_metrics(&g, &s, &[]).is_err());
        assert!(parse_value_list("# none\n\n").is_err());
        assert_eq!(parse_value_list("Abl\n Ine \n").unwrap(), spatial);
    }

    #[test]
    fn all_case_values_equal_case_slice_of_feats() {
        let g = parse_conllu(NOMINAL).unwrap();
        let mut s = g.clone();
        s[0].tokens[0].feats.remove(&"Case=Nom".parse().unwrap());
        s[0].tokens[0].feats.insert("Case=Acc".parse().unwrap());
        let values: Vec<String> = ["Nom", "Acc", "Ine", "Atr"].iter().map(|s| s.to_string()).collect();
        let spatial = spatial_case_metrics(&g, &s, &values).unwrap();
        let only_case = |c: &[Sentence]| -> Vec<Sentence> {
            let mut c = c.to_vec();
            for t in c.iter_mut().flat_map(|s| s.tokens.iter_mut()) {
                t.feats.retain(|a| a.class == "Case");
            }
            c
        };
        let f = evaluate(&only_case(&g), &only_case(&s)).unwrap().feats;
        assert_eq!(spatial.counts, f.counts);
    }
}
