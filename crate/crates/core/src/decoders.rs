//! Task heads over the shared representation: content word identification,
//! biaffine arc/relation scoring and multi-label feature prediction.

use rand::Rng;

use crate::data::{AtomicFeature, FeatureSet, FeatureVocabulary, CONTENT, FUNCTION};
use crate::encoder::{contextualize, contextualize_backward};
use crate::error::{Error, Result};
use crate::numkern::{
    axpy, dot, dropout, relu, relu_backward, sigmoid, sigmoid_bce, softmax, weighted_softmax_ce,
    Dense, DropoutMask, LayerNorm, LayerNormCache, Matrix, Param,
};
use crate::treecrf::ArcScores;

/// Windowed MLP classifying each token as content or function.
#[derive(Clone, Debug, PartialEq)]
pub struct CwiHead {
    pub hidden: Dense,
    pub out: Dense,
    pub window: usize,
    pub dropout: f64,
}

pub struct CwiCache {
    input: Matrix,
    hidden: Matrix,
    mask: DropoutMask,
    shared_dim: usize,
}

impl CwiHead {
    pub fn new<R: Rng>(shared: usize, hidden: usize, window: usize, dropout: f64, rng: &mut R) -> Self {
        CwiHead {
            hidden: Dense::new(shared * (2 * window + 1), hidden, rng),
            out: Dense::new(hidden, 2, rng),
            window,
            dropout,
        }
    }

    pub fn forward<R: Rng>(&self, h: &Matrix, rng: &mut R, training: bool) -> Result<(Matrix, CwiCache)> {
        let input = contextualize(h, self.window);
        let hidden = relu(&self.hidden.forward(&input)?);
        let mut dropped = hidden.clone();
        let mask = dropout(&mut dropped, self.dropout, rng, training)?;
        let logits = self.out.forward(&dropped)?;
        Ok((
            logits,
            CwiCache {
                input,
                hidden: dropped,
                mask,
                shared_dim: h.cols,
            },
        ))
    }

    pub fn backward(&mut self, cache: &CwiCache, dlogits: &Matrix) -> Result<Matrix> {
        let mut d = self.out.backward(&cache.hidden, dlogits)?;
        cache.mask.backward(&mut d);
        // hidden is post-dropout; its zero pattern still marks the inactive units
        let d = relu_backward(&cache.hidden, &d);
        let dx = self.hidden.backward(&cache.input, &d)?;
        Ok(contextualize_backward(&dx, cache.shared_dim, self.window))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.hidden.visit(&format!("{}.hidden", prefix), f);
        self.out.visit(&format!("{}.out", prefix), f);
    }
}

/// Per-token softmax over (content, function).
pub fn cwi_probabilities(logits: &Matrix) -> Vec<[f64; 2]> {
    (0..logits.rows)
        .map(|i| {
            let p = softmax(logits.row(i));
            [p[0], p[1]]
        })
        .collect()
}

/// Inverse class frequency normalised to mean 1.
pub fn cwi_class_weights(content: usize, function: usize) -> [f64; 2] {
    if content == 0 || function == 0 {
        return [1.0, 1.0];
    }
    let inv = [1.0 / content as f64, 1.0 / function as f64];
    let mean = (inv[0] + inv[1]) / 2.0;
    [inv[0] / mean, inv[1] / mean]
}

/// Mean weighted cross-entropy over tokens and its gradient.
pub fn cwi_loss(logits: &Matrix, gold: &[usize], weights: &[f64; 2]) -> Result<(f64, Matrix)> {
    if gold.len() != logits.rows {
        return Err(Error::Dimension(format!("{} labels for {} tokens", gold.len(), logits.rows)));
    }
    let n = gold.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows, 2);
    for (i, &g) in gold.iter().enumerate() {
        let (l, d) = weighted_softmax_ce(logits.row(i), g, weights)?;
        loss += l / n;
        for (o, v) in grad.row_mut(i).iter_mut().zip(d) {
            *o = v / n;
        }
    }
    Ok((loss, grad))
}

/// Dense → LayerNorm → ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub dense: Dense,
    pub norm: LayerNorm,
}

pub struct MlpCache {
    input: Matrix,
    norm: LayerNormCache,
    out: Matrix,
}

impl Mlp {
    pub fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp {
            dense: Dense::new(input, hidden, rng),
            norm: LayerNorm::new(hidden),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        let (normed, norm) = self.norm.forward(&self.dense.forward(x)?);
        let out = relu(&normed);
        Ok((
            out.clone(),
            MlpCache {
                input: x.clone(),
                norm,
                out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &MlpCache, dy: &Matrix) -> Result<Matrix> {
        let d = relu_backward(&cache.out, dy);
        let d = self.norm.backward(&cache.norm, &d);
        self.dense.backward(&cache.input, &d)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.dense.visit(prefix, f);
        self.norm.visit(&format!("{}.ln", prefix), f);
    }
}

/// Biaffine arc and relation scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct BiaffineHead {
    pub arc_dep: Mlp,
    pub arc_head: Mlp,
    pub rel_dep: Mlp,
    pub rel_head: Mlp,
    /// A×A.
    pub u_arc: Param,
    /// 1×A.
    pub u_arc_bias: Param,
    /// R×(B·B); row r is U_rel[r] in row-major order.
    pub u_rel: Param,
    /// R×B.
    pub u_rel_dep: Param,
    /// R×B.
    pub u_rel_head: Param,
    /// 1×R.
    pub b_rel: Param,
    /// 1×shared.
    pub root: Param,
}

pub struct ArcCache {
    dep: MlpCache,
    head: MlpCache,
    a_dep: Matrix,
    a_head: Matrix,
    t: Matrix,
}

pub struct RelCache {
    dep: MlpCache,
    head: MlpCache,
    r_dep: Matrix,
    r_head: Matrix,
    heads: Vec<usize>,
}

fn with_root(root: &Param, hc: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(hc.rows + 1, hc.cols);
    out.row_mut(0).copy_from_slice(root.value.row(0));
    out.data[hc.cols..].copy_from_slice(&hc.data);
    out
}

impl BiaffineHead {
    pub fn new<R: Rng>(shared: usize, arc: usize, rel: usize, deprels: usize, rng: &mut R) -> Self {
        BiaffineHead {
            arc_dep: Mlp::new(shared, arc, rng),
            arc_head: Mlp::new(shared, arc, rng),
            rel_dep: Mlp::new(shared, rel, rng),
            rel_head: Mlp::new(shared, rel, rng),
            u_arc: Param::zeros(arc, arc),
            u_arc_bias: Param::zeros(1, arc),
            u_rel: Param::zeros(deprels, rel * rel),
            u_rel_dep: Param::zeros(deprels, rel),
            u_rel_head: Param::zeros(deprels, rel),
            b_rel: Param::zeros(1, deprels),
            root: Param::new(Matrix::uniform(1, shared, 0.1, rng)),
        }
    }

    pub fn num_deprels(&self) -> usize {
        self.b_rel.value.cols
    }

    fn check_input(&self, hc: &Matrix) -> Result<()> {
        if hc.rows == 0 {
            return Err(Error::Dimension("no content rows to score".into()));
        }
        if hc.cols != self.root.value.cols {
            return Err(Error::Dimension(format!(
                "content rows of width {} for root of width {}",
                hc.cols, self.root.value.cols
            )));
        }
        Ok(())
    }

    /// `S[h][d] = a_dep(d)ᵀ·U·a_head(h) + uᵀ·a_head(h)`, head 0 being the root vector.
    pub fn arc_scores(&self, hc: &Matrix) -> Result<(ArcScores, ArcCache)> {
        self.check_input(hc)?;
        let m = hc.rows;
        let (a_dep, dep) = self.arc_dep.forward(hc)?;
        let (a_head, head) = self.arc_head.forward(&with_root(&self.root, hc))?;
        let t = a_dep.matmul(&self.u_arc.value)?;
        let s_dh = t.matmul_t(&a_head)?;
        let bias = a_head.matmul_t(&self.u_arc_bias.value)?;
        let mut s = Matrix::zeros(m + 1, m);
        for h in 0..=m {
            for d in 0..m {
                s[(h, d)] = s_dh[(d, h)] + bias[(h, 0)];
            }
        }
        Ok((
            ArcScores::new(s)?,
            ArcCache {
                dep,
                head,
                a_dep,
                a_head,
                t,
            },
        ))
    }

    /// Backpropagate `dS` ((m+1)×m); returns the gradient for the content rows.
    pub fn arc_backward(&mut self, cache: &ArcCache, ds: &Matrix) -> Result<Matrix> {
        let m = ds.cols;
        let ds_dh = ds.transpose();
        let dt = ds_dh.matmul(&cache.a_head)?;
        let mut da_head = ds_dh.t_matmul(&cache.t)?;
        let u = self.u_arc_bias.value.row(0).to_vec();
        for h in 0..=m {
            let g: f64 = ds.row(h).iter().sum();
            if g != 0.0 {
                axpy(g, &u, da_head.row_mut(h));
                axpy(g, cache.a_head.row(h), self.u_arc_bias.grad.row_mut(0));
            }
        }
        self.u_arc.grad.add_assign(&cache.a_dep.t_matmul(&dt)?);
        let da_dep = dt.matmul_t(&self.u_arc.value)?;
        let mut dhc = self.arc_dep.backward(&cache.dep, &da_dep)?;
        let droot = self.arc_head.backward(&cache.head, &da_head)?;
        axpy(1.0, droot.row(0), self.root.grad.row_mut(0));
        axpy(1.0, &droot.data[droot.cols..], &mut dhc.data);
        Ok(dhc)
    }

    /// Relation logits (m×R) given one head per content word (0 = root).
    pub fn rel_scores(&self, hc: &Matrix, heads: &[usize]) -> Result<(Matrix, RelCache)> {
        self.check_input(hc)?;
        let m = hc.rows;
        if heads.len() != m {
            return Err(Error::Dimension(format!("{} heads for {} words", heads.len(), m)));
        }
        if let Some((d, &h)) = heads.iter().enumerate().find(|&(d, &h)| h > m || h == d + 1) {
            return Err(Error::Dimension(format!("invalid head {} for word {}", h, d + 1)));
        }
        let (r_dep, dep) = self.rel_dep.forward(hc)?;
        let (r_head, head) = self.rel_head.forward(&with_root(&self.root, hc))?;
        let b = r_dep.cols;
        let nr = self.num_deprels();
        let mut logits = Matrix::zeros(m, nr);
        let mut w = vec![0.0; b];
        for d in 0..m {
            let rd = r_dep.row(d);
            let rh = r_head.row(heads[d]);
            for r in 0..nr {
                let u = self.u_rel.value.row(r);
                for (i, wi) in w.iter_mut().enumerate() {
                    *wi = dot(&u[i * b..(i + 1) * b], rh);
                }
                logits[(d, r)] = dot(rd, &w)
                    + dot(self.u_rel_dep.value.row(r), rd)
                    + dot(self.u_rel_head.value.row(r), rh)
                    + self.b_rel.value[(0, r)];
            }
        }
        Ok((
            logits,
            RelCache {
                dep,
                head,
                r_dep,
                r_head,
                heads: heads.to_vec(),
            },
        ))
    }

    pub fn rel_backward(&mut self, cache: &RelCache, dlogits: &Matrix) -> Result<Matrix> {
        let b = cache.r_dep.cols;
        let m = cache.r_dep.rows;
        let mut dr_dep = Matrix::zeros(m, b);
        let mut dr_head = Matrix::zeros(m + 1, b);
        for d in 0..m {
            let h = cache.heads[d];
            let rd = cache.r_dep.row(d);
            let rh = cache.r_head.row(h);
            for r in 0..self.num_deprels() {
                let g = dlogits[(d, r)];
                if g == 0.0 {
                    continue;
                }
                let u = self.u_rel.value.row(r);
                let du = self.u_rel.grad.row_mut(r);
                for i in 0..b {
                    axpy(g * rd[i], rh, &mut du[i * b..(i + 1) * b]);
                    // U·rh feeds rd, Uᵀ·rd feeds rh
                    dr_dep[(d, i)] += g * dot(&u[i * b..(i + 1) * b], rh);
                    axpy(g * rd[i], &u[i * b..(i + 1) * b], dr_head.row_mut(h));
                }
                axpy(g, self.u_rel_dep.value.row(r), dr_dep.row_mut(d));
                axpy(g, self.u_rel_head.value.row(r), dr_head.row_mut(h));
                axpy(g, rd, self.u_rel_dep.grad.row_mut(r));
                axpy(g, rh, self.u_rel_head.grad.row_mut(r));
                self.b_rel.grad[(0, r)] += g;
            }
        }
        let mut dhc = self.rel_dep.backward(&cache.dep, &dr_dep)?;
        let droot = self.rel_head.backward(&cache.head, &dr_head)?;
        axpy(1.0, droot.row(0), self.root.grad.row_mut(0));
        axpy(1.0, &droot.data[droot.cols..], &mut dhc.data);
        Ok(dhc)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.arc_dep.visit(&format!("{}.arc_dep", prefix), f);
        self.arc_head.visit(&format!("{}.arc_head", prefix), f);
        self.rel_dep.visit(&format!("{}.rel_dep", prefix), f);
        self.rel_head.visit(&format!("{}.rel_head", prefix), f);
        f(&format!("{}.u_arc", prefix), &mut self.u_arc);
        f(&format!("{}.u_arc_bias", prefix), &mut self.u_arc_bias);
        f(&format!("{}.u_rel", prefix), &mut self.u_rel);
        f(&format!("{}.u_rel_dep", prefix), &mut self.u_rel_dep);
        f(&format!("{}.u_rel_head", prefix), &mut self.u_rel_head);
        f(&format!("{}.b_rel", prefix), &mut self.b_rel);
        f(&format!("{}.root", prefix), &mut self.root);
    }
}

/// Pick a relation per word. The root arc always takes `root` when the
/// vocabulary has it, and other arcs never do.
pub fn decode_relations(logits: &Matrix, heads: &[usize], vocab: &FeatureVocabulary) -> Vec<usize> {
    let root = vocab.deprel_index("root");
    heads
        .iter()
        .enumerate()
        .map(|(d, &h)| match root {
            Some(r) if h == 0 => r,
            _ => {
                let row = logits.row(d);
                (0..row.len())
                    .filter(|&r| Some(r) != root || row.len() == 1)
                    .fold(None, |best: Option<usize>, r| match best {
                        Some(b) if row[b] >= row[r] => Some(b),
                        _ => Some(r),
                    })
                    .unwrap_or(0)
            }
        })
        .collect()
}

/// Summed relation cross-entropy over words with a known gold label.
pub fn rel_loss(logits: &Matrix, gold: &[Option<usize>]) -> Result<(f64, Matrix)> {
    let ones = vec![1.0; logits.cols];
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (d, g) in gold.iter().enumerate() {
        if let Some(g) = *g {
            let (l, dg) = weighted_softmax_ce(logits.row(d), g, &ones)?;
            loss += l;
            grad.row_mut(d).copy_from_slice(&dg);
        }
    }
    Ok((loss, grad))
}

/// One sigmoid per atomic feature.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatsHead {
    pub out: Dense,
    pub threshold: f64,
}

impl FeatsHead {
    pub fn new<R: Rng>(shared: usize, vocab: usize, threshold: f64, rng: &mut R) -> Self {
        FeatsHead {
            out: Dense::new(shared, vocab, rng),
            threshold,
        }
    }

    pub fn forward(&self, hc: &Matrix) -> Result<Matrix> {
        self.out.forward(hc)
    }

    pub fn backward(&mut self, hc: &Matrix, dlogits: &Matrix) -> Result<Matrix> {
        self.out.backward(hc, dlogits)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.out.visit(&format!("{}.out", prefix), f);
    }
}

/// Features whose probability reaches the threshold (boundary included).
pub fn predict_feats(logits: &[f64], vocab: &FeatureVocabulary, threshold: f64) -> FeatureSet {
    logits
        .iter()
        .zip(&vocab.features)
        .filter(|(&x, _)| sigmoid(x) >= threshold)
        .map(|(_, f)| f.clone())
        .collect()
}

/// Multi-hot target and the gold features absent from the vocabulary.
pub fn gold_multi_hot(feats: &FeatureSet, vocab: &FeatureVocabulary) -> (Vec<f64>, Vec<AtomicFeature>) {
    let mut target = vec![0.0; vocab.num_features()];
    let mut missing = Vec::new();
    for f in feats {
        match vocab.feature_index(f) {
            Some(i) => target[i] = 1.0,
            None => missing.push(f.clone()),
        }
    }
    (target, missing)
}

/// BCE summed over the vocabulary, averaged over words.
pub fn feats_loss(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != targets.shape() {
        return Err(Error::Dimension(format!(
            "feature logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let m = logits.rows.max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        let (l, g) = sigmoid_bce(logits.row(i), targets.row(i));
        loss += l / m;
        for (o, v) in grad.row_mut(i).iter_mut().zip(g) {
            *o = v / m;
        }
    }
    Ok((loss, grad))
}

/// CWI label from class probabilities, with the probability of that label.
pub fn cwi_decision(p: &[f64; 2]) -> (usize, f64) {
    if p[CONTENT] >= p[FUNCTION] {
        (CONTENT, p[CONTENT])
    } else {
        (FUNCTION, p[FUNCTION])
    }
}
