//! Per-token input vectors and the shared intermediate layer.
//!
//! Two providers exist. `HashedFeatures` hashes lexical features of each form
//! (lowercased form, affixes, shape flags) into a large table of trainable
//! rows and averages them. `ExternalFile` serves precomputed vectors, e.g.
//! exported from a pretrained transformer.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkern::{dropout, relu, relu_backward, Dense, DropoutMask, Matrix, Param};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    HashedFeatures,
    ExternalFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub hash_buckets: u32,
    pub window: usize,
    pub provider: Provider,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 128,
            hash_buckets: 1 << 18,
            window: 2,
            provider: Provider::HashedFeatures,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.hash_buckets == 0 {
            return Err(Error::Config("encoder dim and hash_buckets must be positive".into()));
        }
        if self.window > 5 {
            return Err(Error::Config(format!("encoder window {} > 5", self.window)));
        }
        Ok(())
    }

    /// Width of a contextualized row.
    pub fn context_dim(&self) -> usize {
        self.dim * (2 * self.window + 1)
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Lexical features of a form.
pub fn token_features(form: &str) -> Result<Vec<String>> {
    if form.is_empty() {
        return Err(Error::Config("empty token form".into()));
    }
    let lower = form.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut feats = vec![format!("w={}", lower)];
    for k in 1..=3.min(chars.len()) {
        feats.push(format!("p{}={}", k, chars[..k].iter().collect::<String>()));
        feats.push(format!(
            "s{}={}",
            k,
            chars[chars.len() - k..].iter().collect::<String>()
        ));
    }
    if form.chars().next().is_some_and(char::is_uppercase) {
        feats.push("shape=cap".into());
    }
    if form.chars().all(|c| c.is_ascii_digit()) {
        feats.push("shape=digit".into());
    }
    if form.chars().all(|c| !c.is_alphanumeric()) {
        feats.push("shape=punct".into());
    }
    Ok(feats)
}

pub fn feature_buckets(form: &str, buckets: u32) -> Result<Vec<u32>> {
    Ok(token_features(form)?
        .iter()
        .map(|f| (fnv1a(f.as_bytes()) % u64::from(buckets)) as u32)
        .collect())
}

/// Trainable bucket table. Rows are materialised on first use in training;
/// an unmaterialised row reads as its deterministic initial value.
#[derive(Clone, Debug, PartialEq)]
pub struct HashedEmbedding {
    pub dim: usize,
    pub buckets: u32,
    pub seed: u64,
    pub rows: BTreeMap<u32, Param>,
}

pub const EMBED_INIT_SCALE: f64 = 1.0;

impl HashedEmbedding {
    pub fn new(dim: usize, buckets: u32, seed: u64) -> Self {
        HashedEmbedding {
            dim,
            buckets,
            seed,
            rows: BTreeMap::new(),
        }
    }

    pub fn initial_row(&self, bucket: u32) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ u64::from(bucket).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        (0..self.dim)
            .map(|_| rng.gen_range(-EMBED_INIT_SCALE..=EMBED_INIT_SCALE))
            .collect()
    }

    pub fn materialize(&mut self, buckets: impl IntoIterator<Item = u32>) {
        for b in buckets {
            if !self.rows.contains_key(&b) {
                let row = Matrix {
                    rows: 1,
                    cols: self.dim,
                    data: self.initial_row(b),
                };
                self.rows.insert(b, Param::new(row));
            }
        }
    }

    fn add_row(&self, bucket: u32, scale: f64, out: &mut [f64]) {
        match self.rows.get(&bucket) {
            Some(p) => crate::numkern::axpy(scale, &p.value.data, out),
            None => crate::numkern::axpy(scale, &self.initial_row(bucket), out),
        }
    }

    /// Token vectors (mean of bucket rows) plus the buckets used per token.
    pub fn encode(&self, forms: &[&str]) -> Result<(Matrix, Vec<Vec<u32>>)> {
        let mut out = Matrix::zeros(forms.len(), self.dim);
        let mut used = Vec::with_capacity(forms.len());
        for (i, form) in forms.iter().enumerate() {
            let b = feature_buckets(form, self.buckets)?;
            let scale = 1.0 / b.len() as f64;
            for &k in &b {
                self.add_row(k, scale, out.row_mut(i));
            }
            used.push(b);
        }
        Ok((out, used))
    }

    /// Accumulate `d_out` into the bucket rows. Rows must be materialised.
    pub fn backward(&mut self, used: &[Vec<u32>], d_out: &Matrix) {
        for (i, b) in used.iter().enumerate() {
            let scale = 1.0 / b.len() as f64;
            for k in b {
                let p = self.rows.get_mut(k).expect("embedding row not materialised");
                crate::numkern::axpy(scale, d_out.row(i), &mut p.grad.data);
            }
        }
    }
}

/// Hashed-feature encoding of one sentence.
pub fn encode_sentence(forms: &[&str], embedding: &HashedEmbedding) -> Result<Matrix> {
    if forms.is_empty() {
        return Err(Error::Config("cannot encode an empty sentence".into()));
    }
    Ok(embedding.encode(forms)?.0)
}

/// Row `i` becomes the concatenation of rows `i−w ..= i+w`, zero-padded.
pub fn contextualize(h: &Matrix, window: usize) -> Matrix {
    let (n, d) = h.shape();
    let width = 2 * window + 1;
    let mut out = Matrix::zeros(n, d * width);
    for i in 0..n {
        for slot in 0..width {
            let src = i as isize + slot as isize - window as isize;
            if (0..n as isize).contains(&src) {
                out.row_mut(i)[slot * d..(slot + 1) * d].copy_from_slice(h.row(src as usize));
            }
        }
    }
    out
}

pub fn contextualize_backward(dx: &Matrix, dim: usize, window: usize) -> Matrix {
    let n = dx.rows;
    let width = 2 * window + 1;
    let mut dh = Matrix::zeros(n, dim);
    for i in 0..n {
        for slot in 0..width {
            let src = i as isize + slot as isize - window as isize;
            if (0..n as isize).contains(&src) {
                crate::numkern::axpy(
                    1.0,
                    &dx.row(i)[slot * dim..(slot + 1) * dim],
                    dh.row_mut(src as usize),
                );
            }
        }
    }
    dh
}

/// `dropout(relu(dense(x)))`, read by all three task heads.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedLayer {
    pub dense: Dense,
    pub dropout: f64,
}

pub struct SharedCache {
    input: Matrix,
    activated: Matrix,
    mask: DropoutMask,
}

impl SharedLayer {
    pub fn new<R: Rng>(input: usize, hidden: usize, dropout: f64, rng: &mut R) -> Self {
        SharedLayer {
            dense: Dense::new(input, hidden, rng),
            dropout,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.dense.output_dim()
    }

    pub fn forward<R: Rng>(
        &self,
        x: &Matrix,
        rng: &mut R,
        training: bool,
    ) -> Result<(Matrix, SharedCache)> {
        let activated = relu(&self.dense.forward(x)?);
        let mut out = activated.clone();
        let mask = dropout(&mut out, self.dropout, rng, training)?;
        Ok((
            out,
            SharedCache {
                input: x.clone(),
                activated,
                mask,
            },
        ))
    }

    pub fn backward(&mut self, cache: &SharedCache, dy: &Matrix) -> Result<Matrix> {
        let mut d = dy.clone();
        cache.mask.backward(&mut d);
        let d = relu_backward(&cache.activated, &d);
        self.dense.backward(&cache.input, &d)
    }
}

/// Precomputed vectors, one matrix per sentence, matched by order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalEmbeddings {
    pub dim: usize,
    pub sentences: Vec<(Vec<String>, Matrix)>,
}

impl ExternalEmbeddings {
    /// Parse the text format: blank-line separated sentence blocks, one line
    /// per token holding the form, a tab, and space-separated floats.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut forms = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut dim: Option<usize> = None;
        let mut flush = |forms: &mut Vec<String>, rows: &mut Vec<Vec<f64>>| -> Result<()> {
            if !forms.is_empty() {
                sentences.push((std::mem::take(forms), Matrix::from_rows(&std::mem::take(rows))?));
            }
            Ok(())
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                flush(&mut forms, &mut rows)?;
                continue;
            }
            let (form, values) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected form<TAB>values".into(),
            })?;
            let v: Vec<f64> = values
                .split_whitespace()
                .map(|x| {
                    x.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("bad float {:?}", x),
                    })
                })
                .collect::<Result<_>>()?;
            match dim {
                None if v.is_empty() => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: "empty vector".into(),
                    })
                }
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(Error::Parse {
                        line: i + 1,
                        msg: format!("vector of dim {} after dim {}", v.len(), d),
                    })
                }
                _ => {}
            }
            forms.push(form.to_string());
            rows.push(v);
        }
        flush(&mut forms, &mut rows)?;
        let dim = dim.ok_or_else(|| Error::Config("external embeddings file is empty".into()))?;
        Ok(ExternalEmbeddings { dim, sentences })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Stored matrix for sentence `index`, checking that it has one row per form.
    pub fn get(&self, index: usize, forms: &[&str]) -> Result<&Matrix> {
        let (stored, m) = self.sentences.get(index).ok_or_else(|| {
            Error::Alignment(format!(
                "no external vectors for sentence {} ({} stored)",
                index + 1,
                self.sentences.len()
            ))
        })?;
        if stored.len() != forms.len() {
            return Err(Error::Alignment(format!(
                "sentence {}: {} vectors for {} tokens",
                index + 1,
                stored.len(),
                forms.len()
            )));
        }
        Ok(m)
    }

    /// Check the file covers a corpus sentence for sentence.
    pub fn check_alignment(&self, corpus: &[crate::data::Sentence]) -> Result<()> {
        if self.sentences.len() != corpus.len() {
            return Err(Error::Alignment(format!(
                "{} embedded sentences for {} corpus sentences",
                self.sentences.len(),
                corpus.len()
            )));
        }
        for (i, s) in corpus.iter().enumerate() {
            self.get(i, &s.forms())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkern::{dot, grad_check, Parameterized};

    #[test]
    fn deterministic_encoding() {
        let e = HashedEmbedding::new(16, 1 << 18, 3);
        let forms = ["From", "the", "AP", "comes"];
        let a = encode_sentence(&forms, &e).unwrap();
        let b = encode_sentence(&forms, &HashedEmbedding::new(16, 1 << 18, 3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(encode_sentence(&["x"], &e).unwrap().shape(), (1, 16));
    }

    #[test]
    fn identical_features_identical_rows() {
        let e = HashedEmbedding::new(8, 1 << 18, 3);
        let m = encode_sentence(&["dog", "bites", "dog"], &e).unwrap();
        assert_eq!(m.row(0), m.row(2));
        assert_ne!(m.row(0), m.row(1));
    }

    #[test]
    fn empty_form_rejected() {
        let e = HashedEmbedding::new(8, 64, 3);
        assert!(encode_sentence(&["a", ""], &e).is_err());
        assert!(encode_sentence(&[], &e).is_err());
    }

    #[test]
    fn features_include_shape_flags() {
        let f = token_features("AP").unwrap();
        assert!(f.contains(&"w=ap".to_string()));
        assert!(f.contains(&"shape=cap".to_string()));
        assert!(token_features("1984").unwrap().contains(&"shape=digit".to_string()));
        assert!(token_features(":").unwrap().contains(&"shape=punct".to_string()));
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn materialised_rows_match_lazy_reads() {
        let mut e = HashedEmbedding::new(8, 1 << 10, 9);
        let before = encode_sentence(&["walks"], &e).unwrap();
        let (_, used) = e.encode(&["walks"]).unwrap();
        e.materialize(used[0].iter().copied());
        assert_eq!(before, encode_sentence(&["walks"], &e).unwrap());
    }

    #[test]
    fn contextualize_cases() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(contextualize(&h, 0), h);
        let c = contextualize(&h, 1);
        assert_eq!(c.row(1), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.row(0), [0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let one = Matrix::from_rows(&[vec![7.0, 8.0]]).unwrap();
        let c = contextualize(&one, 2);
        assert_eq!(c.row(0), [0.0, 0.0, 0.0, 0.0, 7.0, 8.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn contextualize_backward_is_adjoint() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let h = Matrix::uniform(4, 3, 1.0, &mut r);
        let g = Matrix::uniform(4, 15, 1.0, &mut r);
        // <C(h), g> = <h, Cᵀ(g)>
        let lhs = dot(&contextualize(&h, 2).data, &g.data);
        let rhs = dot(&h.data, &contextualize_backward(&g, 3, 2).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn shared_layer_zero_and_inference() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let layer = SharedLayer::new(6, 5, 0.5, &mut r);
        let (y, _) = layer.forward(&Matrix::zeros(3, 6), &mut r, true).unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
        let x = Matrix::uniform(3, 6, 1.0, &mut r);
        let (a, _) = layer.forward(&x, &mut r, false).unwrap();
        let (b, _) = layer.forward(&x, &mut r, false).unwrap();
        assert_eq!(a, b);
        assert!(layer.forward(&Matrix::zeros(3, 4), &mut r, false).is_err());
    }

    struct EncProbe {
        emb: HashedEmbedding,
        shared: SharedLayer,
        c: Matrix,
    }

    impl Parameterized for EncProbe {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
            for (k, p) in self.emb.rows.iter_mut() {
                f(&format!("embed.{}", k), p);
            }
            self.shared.dense.visit("shared", f);
        }
    }

    #[test]
    fn encoder_and_shared_gradient_check() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let forms = ["the", "cat", "sat"];
        let mut p = EncProbe {
            emb: HashedEmbedding::new(4, 256, 1),
            shared: SharedLayer::new(12, 6, 0.1, &mut r),
            c: Matrix::uniform(3, 6, 1.0, &mut r),
        };
        p.shared.dense.b.value = Matrix::uniform(1, 6, 0.5, &mut r);
        let (_, used) = p.emb.encode(&forms).unwrap();
        p.emb.materialize(used.iter().flatten().copied());
        let res = grad_check(
            &mut p,
            |p| {
                let (e, used) = p.emb.encode(&forms)?;
                let x = contextualize(&e, 1);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (h, cache) = p.shared.forward(&x, &mut rng, false)?;
                let loss = dot(&h.data, &p.c.data);
                let c = p.c.clone();
                let dx = p.shared.backward(&cache, &c)?;
                let de = contextualize_backward(&dx, 4, 1);
                p.emb.backward(&used, &de);
                Ok(loss)
            },
            1e-5,
        )
        .unwrap();
        assert!(res.max_rel_err <= 1e-4, "{:?}", res);
    }

    #[test]
    fn external_embeddings() {
        let text = "a\t1 2 3 4 5 6 7 8\nb\t1 2 3 4 5 6 7 8\n\nc\t0 0 0 0 0 0 0 0\n";
        let ext = ExternalEmbeddings::parse(text).unwrap();
        assert_eq!(ext.dim, 8);
        assert_eq!(ext.sentences.len(), 2);
        assert_eq!(ext.get(0, &["a", "b"]).unwrap().shape(), (2, 8));
        assert!(matches!(ext.get(1, &["c", "d"]), Err(Error::Alignment(_))));
        assert!(matches!(ext.get(2, &["c"]), Err(Error::Alignment(_))));
        assert!(ExternalEmbeddings::parse("").is_err());
        assert!(ExternalEmbeddings::parse("a\t1 2\nb\t1\n").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            window: 6,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(EncoderConfig::default().context_dim(), 640);
    }
}
