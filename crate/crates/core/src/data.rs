//! Reading and writing the content/function flavoured CoNLL-U format.
//!
//! A token is a *content* word exactly when its FEATS column is not `_`.
//! Only content words take part in the dependency tree and carry features;
//! function words have `_` in FEATS, HEAD and DEPREL.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single `Class=Value` pair.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AtomicFeature {
    pub class: String,
    pub value: String,
}

impl AtomicFeature {
    pub fn new(class: impl Into<String>, value: impl Into<String>) -> Self {
        AtomicFeature {
            class: class.into(),
            value: value.into(),
        }
    }
}

impl fmt::Display for AtomicFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.class, self.value)
    }
}

impl FromStr for AtomicFeature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('=') {
            Some((c, v)) if !c.is_empty() && !v.is_empty() && !v.contains([';', ',']) => {
                Ok(AtomicFeature::new(c, v))
            }
            _ => Err(Error::Parse {
                line: 0,
                msg: format!("not an atomic feature: {:?}", s),
            }),
        }
    }
}

pub type FeatureSet = BTreeSet<AtomicFeature>;

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    /// 1-based surface index.
    pub id: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    /// Verbatim FEATS column.
    pub feats_raw: String,
    pub feats: FeatureSet,
    /// `Some(0)` for the root, `None` when the column is `_`.
    pub head: Option<usize>,
    pub deprel: Option<String>,
    pub deps: String,
    pub misc: String,
    pub is_content: bool,
    /// Character offsets `[start, end)` in the sentence text.
    pub char_span: (usize, usize),
}

impl Token {
    /// A bare token with only a form, as found in covered test input.
    pub fn from_form(id: usize, form: impl Into<String>) -> Self {
        Token {
            id,
            form: form.into(),
            lemma: "_".into(),
            upos: "_".into(),
            xpos: "_".into(),
            feats_raw: "_".into(),
            feats: FeatureSet::new(),
            head: None,
            deprel: None,
            deps: "_".into(),
            misc: "_".into(),
            is_content: false,
            char_span: (0, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sentence {
    pub sent_id: String,
    pub text: Option<String>,
    pub tokens: Vec<Token>,
    /// Comment lines including the leading `#`, in file order.
    pub comments: Vec<String>,
    /// Multiword token range lines, keyed by the index of the token they precede.
    pub multiword: Vec<(usize, String)>,
}

pub type Corpus = Vec<Sentence>;

impl Sentence {
    /// Build an unannotated sentence from pre-tokenized forms.
    pub fn from_forms<S: AsRef<str>>(sent_id: impl Into<String>, forms: &[S]) -> Self {
        let tokens = forms
            .iter()
            .enumerate()
            .map(|(i, f)| Token::from_form(i + 1, f.as_ref()))
            .collect();
        let mut sentence = Sentence {
            sent_id: sent_id.into(),
            text: None,
            tokens,
            comments: Vec::new(),
            multiword: Vec::new(),
        };
        sentence.compute_char_spans();
        sentence
    }

    pub fn forms(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.form.as_str()).collect()
    }

    pub fn content_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.is_content).count()
    }

    /// Recompute `char_span` for every token, from the `text` comment when the
    /// forms can be located in it, otherwise from the forms joined by spaces.
    pub fn compute_char_spans(&mut self) {
        if let Some(text) = &self.text {
            if let Some(spans) = spans_in_text(text, self.tokens.iter().map(|t| t.form.as_str())) {
                for (t, s) in self.tokens.iter_mut().zip(spans) {
                    t.char_span = s;
                }
                return;
            }
        }
        let mut offset = 0;
        for t in &mut self.tokens {
            let len = t.form.chars().count();
            t.char_span = (offset, offset + len);
            offset += len + 1;
        }
    }
}

fn spans_in_text<'a>(
    text: &str,
    forms: impl Iterator<Item = &'a str>,
) -> Option<Vec<(usize, usize)>> {
    let chars: Vec<char> = text.chars().collect();
    let mut cursor = 0;
    let mut spans = Vec::new();
    for form in forms {
        let fc: Vec<char> = form.chars().collect();
        if fc.is_empty() {
            return None;
        }
        let start = (cursor..=chars.len().saturating_sub(fc.len()))
            .find(|&s| chars[s..s + fc.len()] == fc[..])?;
        spans.push((start, start + fc.len()));
        cursor = start + fc.len();
    }
    Some(spans)
}

/// Something odd in the input that does not prevent loading it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Warning {
    pub sent_id: String,
    pub message: String,
}

/// Node identifier in a raw, unfiltered sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Word(usize),
    /// Abstract (empty) node such as `8.1`.
    Abstract(usize, usize),
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once('.') {
            Some((a, b)) => Ok(NodeId::Abstract(
                a.parse().map_err(|_| format!("bad id {:?}", s))?,
                b.parse().map_err(|_| format!("bad id {:?}", s))?,
            )),
            None => s
                .parse()
                .map(NodeId::Word)
                .map_err(|_| format!("bad id {:?}", s)),
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Word(i) => write!(f, "{}", i),
            NodeId::Abstract(a, b) => write!(f, "{}.{}", a, b),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawNode {
    pub id: NodeId,
    pub head: Option<NodeId>,
    /// All ten columns verbatim.
    pub columns: Vec<String>,
    pub line: usize,
}

/// A sentence as read from disk, before abstract nodes are removed.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RawSentence {
    pub sent_id: String,
    pub text: Option<String>,
    pub comments: Vec<String>,
    pub nodes: Vec<RawNode>,
    pub multiword: Vec<(usize, String)>,
}

/// Split a FEATS column into atomic features.
///
/// `Case=Ine;Atr` and the syncretic `Gender=Fem,Masc` both yield one atom per
/// value. Empty `|` segments are skipped, so the literal `|` is an empty set.
pub fn decompose_feats(feats_raw: &str) -> Result<FeatureSet> {
    let mut out = FeatureSet::new();
    if feats_raw == "_" {
        return Ok(out);
    }
    for entry in feats_raw.split('|').filter(|e| !e.is_empty()) {
        let (class, values) = entry.split_once('=').ok_or_else(|| Error::Parse {
            line: 0,
            msg: format!("feature entry without '=': {:?}", entry),
        })?;
        if class.is_empty() {
            return Err(Error::Parse {
                line: 0,
                msg: format!("feature entry without class: {:?}", entry),
            });
        }
        for value in values.split([';', ',']) {
            if value.is_empty() {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("empty feature value in {:?}", entry),
                });
            }
            out.insert(AtomicFeature::new(class, value));
        }
    }
    Ok(out)
}

/// Canonical FEATS string: classes in lexicographic order joined by `|`,
/// values of one class in lexicographic order joined by `;`.
pub fn recompose_feats(feats: &FeatureSet) -> String {
    if feats.is_empty() {
        return "_".into();
    }
    let mut grouped: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for f in feats {
        grouped.entry(&f.class).or_default().push(&f.value);
    }
    grouped
        .into_iter()
        .map(|(c, vs)| format!("{}={}", c, vs.join(";")))
        .collect::<Vec<_>>()
        .join("|")
}

/// Parse a whole file, discarding warnings after logging them.
pub fn parse_conllu(text: &str) -> Result<Corpus> {
    let (corpus, warnings) = parse_conllu_with_warnings(text)?;
    for w in &warnings {
        log::warn!("sentence {}: {}", w.sent_id, w.message);
    }
    Ok(corpus)
}

pub fn parse_conllu_with_warnings(text: &str) -> Result<(Corpus, Vec<Warning>)> {
    let mut corpus = Vec::new();
    let mut warnings = Vec::new();
    for raw in parse_raw(text)? {
        let (sentence, mut w) = filter_abstract_nodes(raw)?;
        warnings.append(&mut w);
        corpus.push(sentence);
    }
    Ok((corpus, warnings))
}

/// Read sentence blocks without interpreting node ids beyond their syntax.
pub fn parse_raw(text: &str) -> Result<Vec<RawSentence>> {
    let mut out = Vec::new();
    let mut current = RawSentence::default();
    let mut open = false;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if open {
                out.push(std::mem::take(&mut current));
                open = false;
            }
            continue;
        }
        open = true;
        if line.starts_with('#') {
            if let Some(v) = comment_value(line, "sent_id") {
                current.sent_id = v.to_string();
            } else if let Some(v) = comment_value(line, "text") {
                current.text = Some(v.to_string());
            }
            current.comments.push(line.to_string());
            continue;
        }
        let columns: Vec<String> = line.split('\t').map(str::to_string).collect();
        if columns.len() != 10 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 10 tab-separated columns, found {}", columns.len()),
            });
        }
        if columns[0].contains('-') {
            current.multiword.push((current.nodes.len(), line.to_string()));
            continue;
        }
        let id: NodeId = columns[0]
            .parse()
            .map_err(|msg| Error::Parse { line: lineno, msg })?;
        let head = match columns[6].as_str() {
            "_" => None,
            h => Some(h.parse().map_err(|msg| Error::Parse { line: lineno, msg })?),
        };
        current.nodes.push(RawNode {
            id,
            head,
            columns,
            line: lineno,
        });
    }
    if open {
        out.push(current);
    }
    Ok(out)
}

fn comment_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let rest = line.trim_start_matches('#').trim_start();
    let rest = rest.strip_prefix(key)?;
    let rest = rest.trim_start().strip_prefix('=')?;
    Some(rest.trim())
}

/// Remove abstract nodes and re-express heads over the remaining words.
///
/// A head that points into a removed node is replaced by that node's own
/// head, transitively. When the chain ends without a head the token keeps no
/// head and a warning is emitted. A cycle through removed nodes is an error.
pub fn filter_abstract_nodes(raw: RawSentence) -> Result<(Sentence, Vec<Warning>)> {
    let sent = if raw.sent_id.is_empty() {
        raw.nodes
            .first()
            .map(|n| format!("line {}", n.line))
            .unwrap_or_default()
    } else {
        raw.sent_id.clone()
    };
    let mut warnings = Vec::new();
    let warn = |warnings: &mut Vec<Warning>, message: String| {
        warnings.push(Warning {
            sent_id: sent.clone(),
            message,
        })
    };

    let abstract_heads: HashMap<NodeId, Option<NodeId>> = raw
        .nodes
        .iter()
        .filter(|n| matches!(n.id, NodeId::Abstract(..)))
        .map(|n| (n.id, n.head))
        .collect();
    let words: Vec<&RawNode> = raw
        .nodes
        .iter()
        .filter(|n| matches!(n.id, NodeId::Word(_)))
        .collect();
    for (pos, node) in words.iter().enumerate() {
        if node.id != NodeId::Word(pos + 1) {
            return Err(Error::Format {
                sent,
                msg: format!(
                    "line {}: expected id {}, found {}",
                    node.line,
                    pos + 1,
                    node.id
                ),
            });
        }
    }
    let n = words.len();

    // Multiword lines are re-anchored to word positions.
    let multiword = raw
        .multiword
        .iter()
        .map(|(node_pos, line)| {
            let before = raw.nodes[..*node_pos]
                .iter()
                .filter(|x| matches!(x.id, NodeId::Word(_)))
                .count();
            (before, line.clone())
        })
        .collect();

    let mut tokens = Vec::with_capacity(n);
    for node in &words {
        let c = &node.columns;
        let head = match node.head {
            None => None,
            Some(NodeId::Word(h)) if h <= n => Some(h),
            Some(NodeId::Word(h)) => {
                return Err(Error::Format {
                    sent,
                    msg: format!("line {}: head {} out of range", node.line, h),
                })
            }
            Some(start @ NodeId::Abstract(..)) => {
                let mut seen = HashSet::new();
                let mut cur = start;
                loop {
                    if !seen.insert(cur) {
                        return Err(Error::Format {
                            sent,
                            msg: format!("line {}: cyclic head chain through {}", node.line, cur),
                        });
                    }
                    match abstract_heads.get(&cur) {
                        None => {
                            warn(
                                &mut warnings,
                                format!("line {}: head {} does not exist", node.line, cur),
                            );
                            break None;
                        }
                        Some(None) => {
                            warn(
                                &mut warnings,
                                format!(
                                    "line {}: abstract head {} has no head; head dropped",
                                    node.line, cur
                                ),
                            );
                            break None;
                        }
                        Some(Some(NodeId::Word(h))) if *h <= n => break Some(*h),
                        Some(Some(NodeId::Word(h))) => {
                            return Err(Error::Format {
                                sent,
                                msg: format!("line {}: head {} out of range", node.line, h),
                            })
                        }
                        Some(Some(next)) => cur = *next,
                    }
                }
            }
        };
        let feats_raw = c[5].clone();
        let is_content = feats_raw != "_";
        let feats = if is_content {
            decompose_feats(&feats_raw).map_err(|e| match e {
                Error::Parse { msg, .. } => Error::Parse {
                    line: node.line,
                    msg,
                },
                other => other,
            })?
        } else {
            FeatureSet::new()
        };
        let col = |i: usize| c[i].clone();
        tokens.push(Token {
            id: tokens.len() + 1,
            form: col(1),
            lemma: col(2),
            upos: col(3),
            xpos: col(4),
            feats_raw,
            feats,
            head,
            deprel: if c[7] == "_" { None } else { Some(col(7)) },
            deps: col(8),
            misc: col(9),
            is_content,
            char_span: (0, 0),
        });
    }

    for t in &tokens {
        if let Some(h) = t.head {
            if h > 0 && !tokens[h - 1].is_content {
                warn(
                    &mut warnings,
                    format!("token {} is headed by function word {}", t.id, h),
                );
            }
        }
    }

    let mut sentence = Sentence {
        sent_id: raw.sent_id,
        text: raw.text,
        tokens,
        comments: raw.comments,
        multiword,
    };
    sentence.compute_char_spans();
    Ok((sentence, warnings))
}

fn opt_col(v: &Option<String>) -> &str {
    v.as_deref().unwrap_or("_")
}

/// Write one sentence block, terminated by a blank line. An empty sentence
/// yields an empty string.
pub fn serialize(sentence: &Sentence) -> String {
    if sentence.tokens.is_empty() && sentence.comments.is_empty() {
        return String::new();
    }
    let mut out = String::new();
    if sentence.comments.is_empty() {
        if !sentence.sent_id.is_empty() {
            out.push_str(&format!("# sent_id = {}\n", sentence.sent_id));
        }
        if let Some(text) = &sentence.text {
            out.push_str(&format!("# text = {}\n", text));
        }
    } else {
        for c in &sentence.comments {
            out.push_str(c);
            out.push('\n');
        }
    }
    let mut mw = sentence.multiword.iter().peekable();
    for (i, t) in sentence.tokens.iter().enumerate() {
        while let Some((_, line)) = mw.next_if(|(pos, _)| *pos == i) {
            out.push_str(line);
            out.push('\n');
        }
        let head = t.head.map(|h| h.to_string()).unwrap_or_else(|| "_".into());
        out.push_str(&[
            t.id.to_string().as_str(),
            &t.form,
            &t.lemma,
            &t.upos,
            &t.xpos,
            &t.feats_raw,
            &head,
            opt_col(&t.deprel),
            &t.deps,
            &t.misc,
        ]
        .join("\t"));
        out.push('\n');
    }
    for (_, line) in mw {
        out.push_str(line);
        out.push('\n');
    }
    out.push('\n');
    out
}

pub fn serialize_corpus(corpus: &[Sentence]) -> String {
    corpus.iter().map(serialize).collect()
}

/// Indexed inventory of atomic features and dependency relations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocabulary {
    pub features: Vec<AtomicFeature>,
    pub deprels: Vec<String>,
    pub frozen: bool,
}

/// The two CWI classes, in logit order.
pub const CWI_LABELS: [&str; 2] = ["content", "function"];
pub const CONTENT: usize = 0;
pub const FUNCTION: usize = 1;

impl FeatureVocabulary {
    /// Index of a feature. Features are kept sorted, so lookup is a binary search.
    pub fn feature_index(&self, f: &AtomicFeature) -> Option<usize> {
        self.features.binary_search(f).ok()
    }

    pub fn deprel_index(&self, d: &str) -> Option<usize> {
        self.deprels.binary_search_by(|x| x.as_str().cmp(d)).ok()
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn num_deprels(&self) -> usize {
        self.deprels.len()
    }
}

/// Collect every atomic feature and deprel carried by content words.
pub fn build_feature_vocab(corpus: &[Sentence]) -> Result<FeatureVocabulary> {
    let mut features = BTreeSet::new();
    let mut deprels = BTreeSet::new();
    let mut content = 0usize;
    for t in corpus.iter().flat_map(|s| &s.tokens).filter(|t| t.is_content) {
        content += 1;
        features.extend(t.feats.iter().cloned());
        if let Some(d) = &t.deprel {
            deprels.insert(d.clone());
        }
    }
    if content == 0 {
        return Err(Error::Config(
            "cannot build a vocabulary from a corpus without content words".into(),
        ));
    }
    Ok(FeatureVocabulary {
        features: features.into_iter().collect(),
        deprels: deprels.into_iter().collect(),
        frozen: true,
    })
}

/// Seeded shuffle, then the first `ceil(ratio * n)` sentences go to the first
/// part. Both parts are kept non-empty.
pub fn split_corpus(corpus: &[Sentence], ratio: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {} not in (0, 1)", ratio)));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "need at least 2 sentences to split, got {}",
            n
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // The small slack keeps 0.7 * 10 from rounding up to 8.
    let cut = ((ratio * n as f64) - 1e-9).ceil() as usize;
    let cut = cut.clamp(1, n - 1);
    let a = order[..cut].iter().map(|&i| corpus[i].clone()).collect();
    let b = order[cut..].iter().map(|&i| corpus[i].clone()).collect();
    Ok((a, b))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const AP_STORY: &str = "# sent_id = ap-1
# text = From the AP comes this story:
1\tFrom\tfrom\tADP\tIN\t_\t_\t_\t_\t_
2\tthe\tthe\tDET\tDT\t_\t_\t_\t_\t_
3\tAP\tAP\tPROPN\tNNP\tCase=Abl|Definite=Def|Number=Sing\t4\tobl\t_\t_
4\tcomes\tcome\tVERB\tVBZ\tMood=Ind|Polarity=Pos|Tense=Pres|VerbForm=Fin|Voice=Act\t0\troot\t_\t_
5\tthis\tthis\tDET\tDT\tNumber=Sing|PronType=Dem\t6\tdet\t_\t_
6\tstory\tstory\tNOUN\tNN\tNumber=Sing\t4\tnsubj\t_\t_
7\t:\t:\tPUNCT\t:\t_\t_\t_\t_\t_
";

    fn af(s: &str) -> AtomicFeature {
        s.parse().unwrap()
    }

    #[test]
    fn ap_story_content_split() {
        let corpus = parse_conllu(AP_STORY).unwrap();
        assert_eq!(corpus.len(), 1);
        let s = &corpus[0];
        let content: Vec<&str> = s
            .tokens
            .iter()
            .filter(|t| t.is_content)
            .map(|t| t.form.as_str())
            .collect();
        assert_eq!(content, ["AP", "comes", "this", "story"]);
        assert_eq!(s.tokens.len() - content.len(), 3);
        assert_eq!(s.tokens[0].head, None);
        assert_eq!(s.tokens[3].head, Some(0));
        assert_eq!(s.sent_id, "ap-1");
        // "story:" has no space before the colon
        assert_eq!(s.tokens[5].char_span, (23, 28));
        assert_eq!(s.tokens[6].char_span, (28, 29));
    }

    #[test]
    fn empty_input() {
        assert!(parse_conllu("").unwrap().is_empty());
        assert!(parse_conllu("\n\n").unwrap().is_empty());
    }

    #[test]
    fn wrong_column_count_reports_line() {
        let text = "# sent_id = a\n1\tx\tx\tX\tX\t_\t_\t_\t_\n";
        match parse_conllu(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn non_contiguous_ids() {
        let text = "1\ta\ta\tX\tX\tA=B\t0\troot\t_\t_\n3\tb\tb\tX\tX\t_\t_\t_\t_\t_\n";
        assert!(matches!(parse_conllu(text), Err(Error::Format { .. })));
    }

    #[test]
    fn head_on_function_word_is_warned_and_kept() {
        let text = "1\ta\ta\tX\tX\t_\t_\t_\t_\t_\n2\tb\tb\tX\tX\tA=B\t1\troot\t_\t_\n";
        let (corpus, warnings) = parse_conllu_with_warnings(text).unwrap();
        assert_eq!(corpus[0].tokens[1].head, Some(1));
        assert_eq!(warnings.len(), 1);
    }

    fn line(id: &str, feats: &str, head: &str, rel: &str) -> String {
        format!("{id}\tw{id}\t_\tX\t_\t{feats}\t{head}\t{rel}\t_\t_\n")
    }

    #[test]
    fn abstract_node_reattached_transitively() {
        let text = [
            line("1", "A=B", "2", "nsubj"),
            line("2", "A=B", "0", "root"),
            line("2.1", "A=B", "2", "dep"),
            line("3", "A=B", "2.1", "obj"),
        ]
        .concat();
        let corpus = parse_conllu(&text).unwrap();
        let heads: Vec<_> = corpus[0].tokens.iter().map(|t| t.head).collect();
        assert_eq!(heads, [Some(2), Some(0), Some(2)]);
        let ids: Vec<_> = corpus[0].tokens.iter().map(|t| t.id).collect();
        assert_eq!(ids, [1, 2, 3]);
    }

    #[test]
    fn abstract_node_heading_nothing() {
        let text = [line("1", "A=B", "0", "root"), line("1.1", "_", "_", "_")].concat();
        let corpus = parse_conllu(&text).unwrap();
        assert_eq!(corpus[0].tokens.len(), 1);
    }

    #[test]
    fn no_abstract_nodes_is_identity() {
        let raw = parse_raw(AP_STORY).unwrap().remove(0);
        let (s, w) = filter_abstract_nodes(raw).unwrap();
        assert!(w.is_empty());
        assert_eq!(serialize(&s), AP_STORY.to_string() + "\n");
    }

    #[test]
    fn abstract_cycle_is_format_error() {
        let text = [
            line("1", "A=B", "0", "root"),
            line("1.1", "_", "1.2", "_"),
            line("1.2", "_", "1.1", "_"),
            line("2", "A=B", "1.1", "obj"),
        ]
        .concat();
        assert!(matches!(parse_conllu(&text), Err(Error::Format { .. })));
    }

    #[test]
    fn abstract_chain_without_head_drops_head() {
        let text = [
            line("1", "A=B", "0", "root"),
            line("1.1", "_", "_", "_"),
            line("2", "A=B", "1.1", "obj"),
        ]
        .concat();
        let (c, w) = parse_conllu_with_warnings(&text).unwrap();
        assert_eq!(c[0].tokens[1].head, None);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn two_sentences_one_with_abstract_node() {
        let text = [
            "# sent_id = s1\n".to_string(),
            line("1", "A=B", "0", "root"),
            line("2", "_", "_", "_"),
            "\n# sent_id = s2\n".to_string(),
            line("1", "A=B", "2", "nsubj"),
            line("1.1", "_", "2", "_"),
            line("2", "A=B", "0", "root"),
            line("3", "A=C", "1.1", "obj"),
        ]
        .concat();
        let corpus = parse_conllu(&text).unwrap();
        assert_eq!(corpus.len(), 2);
        let s2 = &corpus[1];
        assert_eq!(s2.tokens.iter().map(|t| t.id).collect::<Vec<_>>(), [1, 2, 3]);
        assert_eq!(s2.tokens[2].head, Some(2));
        assert_eq!(s2.content_count(), 3);
    }

    #[test]
    fn decompose_examples() {
        let s = decompose_feats("Case=Abl|Definite=Def|Number=Sing").unwrap();
        assert_eq!(
            s,
            [af("Case=Abl"), af("Definite=Def"), af("Number=Sing")]
                .into_iter()
                .collect()
        );
        assert!(decompose_feats("_").unwrap().is_empty());
        let s = decompose_feats("Case=Ine;Atr").unwrap();
        assert_eq!(s, [af("Case=Ine"), af("Case=Atr")].into_iter().collect());
        let s = decompose_feats("Gender=Fem,Masc").unwrap();
        assert_eq!(s.len(), 2);
        assert!(decompose_feats("|").unwrap().is_empty());
        assert!(decompose_feats("Case").is_err());
        assert!(decompose_feats("Case=").is_err());
    }

    #[test]
    fn recompose_examples() {
        let s: FeatureSet = [af("Case=Ine"), af("Case=Atr")].into_iter().collect();
        assert_eq!(recompose_feats(&s), "Case=Atr;Ine");
        assert_eq!(recompose_feats(&FeatureSet::new()), "_");
        let s: FeatureSet = [af("Number=Sing")].into_iter().collect();
        assert_eq!(recompose_feats(&s), "Number=Sing");
        let s: FeatureSet = [af("Number=Sing"), af("Case=Gen")].into_iter().collect();
        assert_eq!(recompose_feats(&s), "Case=Gen|Number=Sing");
    }

    #[test]
    fn vocab_from_ap_story() {
        let corpus = parse_conllu(AP_STORY).unwrap();
        let vocab = build_feature_vocab(&corpus).unwrap();
        let feats: Vec<String> = vocab.features.iter().map(|f| f.to_string()).collect();
        assert_eq!(
            feats,
            [
                "Case=Abl",
                "Definite=Def",
                "Mood=Ind",
                "Number=Sing",
                "Polarity=Pos",
                "PronType=Dem",
                "Tense=Pres",
                "VerbForm=Fin",
                "Voice=Act"
            ]
        );
        assert_eq!(vocab.deprels, ["det", "nsubj", "obl", "root"]);
        assert_eq!(vocab.feature_index(&af("Mood=Ind")), Some(2));
        assert_eq!(vocab.deprel_index("obl"), Some(2));
        assert!(vocab.frozen);
    }

    #[test]
    fn vocab_requires_content() {
        let corpus = vec![Sentence::from_forms("x", &["a", "b"])];
        assert!(build_feature_vocab(&corpus).is_err());
        assert!(build_feature_vocab(&[]).is_err());
    }

    #[test]
    fn vocab_is_order_independent() {
        let text = format!(
            "{}\n{}",
            AP_STORY,
            line("1", "Case=Gen|Number=Plur", "0", "root")
        );
        let mut corpus = parse_conllu(&text).unwrap();
        let a = build_feature_vocab(&corpus).unwrap();
        corpus.reverse();
        assert_eq!(a, build_feature_vocab(&corpus).unwrap());
    }

    #[test]
    fn serialize_multi_valued_case() {
        let mut s = Sentence::from_forms("m", &["house"]);
        let t = &mut s.tokens[0];
        t.feats = decompose_feats("Case=Ine;Atr").unwrap();
        t.feats_raw = recompose_feats(&t.feats);
        t.is_content = true;
        t.head = Some(0);
        t.deprel = Some("root".into());
        let out = serialize(&s);
        assert!(out.contains("\tCase=Atr;Ine\t0\troot\t"));
        let back = parse_conllu(&out).unwrap();
        assert_eq!(back[0].tokens[0].feats, s.tokens[0].feats);
    }

    #[test]
    fn serialize_empty_sentence() {
        assert_eq!(serialize(&Sentence::default()), "");
    }

    #[test]
    fn multiword_lines_pass_through() {
        let text = "# sent_id = mw\n1-2\tdel\t_\t_\t_\t_\t_\t_\t_\t_\n1\tde\tde\tADP\t_\t_\t_\t_\t_\t_\n2\tel\tel\tDET\t_\t_\t_\t_\t_\t_\n3\tmar\tmar\tNOUN\t_\tCase=Abl\t0\troot\t_\t_\n";
        let corpus = parse_conllu(text).unwrap();
        assert_eq!(corpus[0].tokens.len(), 3);
        assert_eq!(serialize_corpus(&corpus), format!("{}\n", text));
    }

    #[test]
    fn split_examples() {
        let corpus: Corpus = (0..10)
            .map(|i| Sentence::from_forms(i.to_string(), &["x"]))
            .collect();
        let (a, b) = split_corpus(&corpus, 0.9, 7).unwrap();
        assert_eq!((a.len(), b.len()), (9, 1));
        let (a2, b2) = split_corpus(&corpus, 0.9, 7).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
        let mut ids: Vec<_> = a.iter().chain(&b).map(|s| s.sent_id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = (0..10).map(|i| i.to_string()).collect();
        expected.sort();
        assert_eq!(ids, expected);

        let (a, b) = split_corpus(&corpus[..2], 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        let (a, _) = split_corpus(&corpus, 0.7, 1).unwrap();
        assert_eq!(a.len(), 7);

        assert!(matches!(split_corpus(&corpus, 1.0, 1), Err(Error::Config(_))));
        assert!(matches!(split_corpus(&corpus, 0.0, 1), Err(Error::Config(_))));
        assert!(split_corpus(&corpus[..1], 0.5, 1).is_err());
    }
}
