//! Small dense-math kernel with hand-written backward passes.
//!
//! Everything is `f64`. Layers keep their own gradient buffers and AdamW
//! moments next to the weights, so the optimizer only needs a walk over
//! [`Param`]s.

use rand::Rng;
use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Glorot-uniform initialisation.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Matrix::uniform(rows, cols, a, rng)
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, a: f64, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-a, a);
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| dist.sample(rng)).collect(),
        }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// `self[idx[o]] += src[o]` for every row of `src`.
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &Matrix) {
        for (o, &i) in idx.iter().enumerate() {
            axpy(1.0, src.row(o), self.row_mut(i));
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(1.0, &other.data, &mut self.data);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dims(self.cols == other.rows, "matmul", self, other)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, other.row(k), orow);
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        check_dims(self.cols == other.cols, "matmul_t", self, other)?;
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dims(self.rows == other.rows, "t_matmul", self, other)?;
        let mut out = Matrix::zeros(self.cols, other.cols);
        self.t_matmul_acc(other, &mut out);
        Ok(out)
    }

    /// `acc += selfᵀ · other`, shapes assumed valid.
    fn t_matmul_acc(&self, other: &Matrix, acc: &mut Matrix) {
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, b, acc.row_mut(i));
                }
            }
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

fn check_dims(ok: bool, op: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{}: {}x{} with {}x{}",
            op, a.rows, a.cols, b.rows, b.cols
        )))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Numerically stable `log Σ exp(x)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|x| (x - lse).exp()).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A trainable tensor with its gradient buffer and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Param {
            grad: Matrix::zeros(r, c),
            m: vec![0.0; r * c],
            v: vec![0.0; r * c],
            value,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Param::new(Matrix::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.value.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Anything owning [`Param`]s. The visiting order must be stable.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }
}

/// Fully connected layer computing `Y = X·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub w: Param,
    /// `1 × out`
    pub b: Param,
}

impl Dense {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Dense {
            w: Param::new(Matrix::glorot(output, input, rng)),
            b: Param::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Param::zeros(output, input),
            b: Param::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.cols
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.rows
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.w.value)?;
        for i in 0..y.rows {
            axpy(1.0, &self.b.value.data, y.row_mut(i));
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dX`.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        if dy.cols != self.output_dim() || dy.rows != x.rows || x.cols != self.input_dim() {
            return Err(Error::Dimension(format!(
                "dense backward: x {}x{}, dy {}x{}, layer {}->{}",
                x.rows,
                x.cols,
                dy.rows,
                dy.cols,
                self.input_dim(),
                self.output_dim()
            )));
        }
        dy.t_matmul_acc(x, &mut self.w.grad);
        for i in 0..dy.rows {
            axpy(1.0, dy.row(i), &mut self.b.grad.data);
        }
        dy.matmul(&self.w.value)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{}.w", prefix), &mut self.w);
        f(&format!("{}.b", prefix), &mut self.b);
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient through ReLU given its *output* `y`.
pub fn relu_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    Matrix {
        rows: y.rows,
        cols: y.cols,
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalisation over the last dimension with learned gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        let mut gain = Param::zeros(1, dim);
        gain.value.fill(1.0);
        LayerNorm {
            gain,
            bias: Param::zeros(1, dim),
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let (xhat, inv_std) = normalize_rows(x);
        let mut y = xhat.clone();
        for i in 0..y.rows {
            for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.gain.value.data[j] + self.bias.value.data[j];
            }
        }
        (
            y,
            LayerNormCache {
                normalized: xhat,
                inv_std,
            },
        )
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Matrix) -> Matrix {
        let xhat = &cache.normalized;
        let d = xhat.cols as f64;
        let mut dx = Matrix::zeros(dy.rows, dy.cols);
        for i in 0..dy.rows {
            let (g, xh) = (dy.row(i), xhat.row(i));
            let mut dxhat = vec![0.0; g.len()];
            for j in 0..g.len() {
                self.gain.grad.data[j] += g[j] * xh[j];
                self.bias.grad.data[j] += g[j];
                dxhat[j] = g[j] * self.gain.value.data[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d;
            let mean_dx = dot(&dxhat, xh) / d;
            for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                *out = cache.inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{}.gain", prefix), &mut self.gain);
        f(&format!("{}.bias", prefix), &mut self.bias);
    }
}

/// Per-row `(x − mean)/sqrt(var + eps)`; also returns `1/sqrt(var + eps)`.
pub fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let r = out.row_mut(i);
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        r.iter_mut().for_each(|v| *v = (*v - mean) * s);
        inv.push(s);
    }
    (out, inv)
}

/// Multiplicative dropout mask, already scaled by `1/(1−rate)`.
#[derive(Clone, Debug)]
pub struct DropoutMask(Option<Vec<f64>>);

impl DropoutMask {
    pub fn identity() -> Self {
        DropoutMask(None)
    }

    pub fn apply(&self, x: &mut Matrix) {
        if let Some(m) = &self.0 {
            x.data.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
    }

    /// Backward is the same elementwise product.
    pub fn backward(&self, dy: &mut Matrix) {
        self.apply(dy)
    }

    pub fn kept_fraction(&self) -> f64 {
        match &self.0 {
            None => 1.0,
            Some(m) => m.iter().filter(|&&k| k != 0.0).count() as f64 / m.len().max(1) as f64,
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout rate {} not in [0, 1)", rate)))
    }
}

/// Inverted elementwise dropout.
pub fn dropout<R: Rng>(
    x: &mut Matrix,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<DropoutMask> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(DropoutMask::identity());
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.data.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = DropoutMask(Some(mask));
    mask.apply(x);
    Ok(mask)
}

/// Inverted dropout of whole rows (tokens).
pub fn word_dropout<R: Rng>(
    x: &mut Matrix,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<DropoutMask> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(DropoutMask::identity());
    }
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Vec::with_capacity(x.data.len());
    for _ in 0..x.rows {
        let k = if rng.gen::<f64>() < rate { 0.0 } else { keep };
        mask.extend(std::iter::repeat_n(k, x.cols));
    }
    let mask = DropoutMask(Some(mask));
    mask.apply(x);
    Ok(mask)
}

/// `−w[gold]·log softmax(logits)[gold]` and its gradient.
pub fn weighted_softmax_ce(
    logits: &[f64],
    gold: usize,
    class_weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if gold >= logits.len() || class_weights.len() != logits.len() {
        return Err(Error::Dimension(format!(
            "gold class {} with {} logits and {} weights",
            gold,
            logits.len(),
            class_weights.len()
        )));
    }
    let w = class_weights[gold];
    let lse = log_sum_exp(logits);
    let loss = w * (lse - logits[gold]);
    let mut grad: Vec<f64> = logits.iter().map(|x| w * (x - lse).exp()).collect();
    grad[gold] -= w;
    Ok((loss, grad))
}

/// Summed binary cross-entropy with logits, `Σ max(x,0) − x·t + log(1+e^{−|x|})`.
pub fn sigmoid_bce(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), targets.len());
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| {
            loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
            sigmoid(x) - t
        })
        .collect();
    (loss, grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moments live in each [`Param`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, t: 0 }
    }

    /// One update over every parameter. If any gradient is non-finite nothing
    /// is modified and the offending tensor is reported.
    pub fn step(&mut self, model: &mut dyn Parameterized) -> Result<()> {
        let mut bad = None;
        model.visit_params(&mut |name, p| {
            if bad.is_none() {
                if let Some(i) = p.grad.data.iter().position(|g| !g.is_finite()) {
                    bad = Some(format!("gradient of {}[{}] = {}", name, i, p.grad.data[i]));
                }
            }
        });
        if let Some(msg) = bad {
            return Err(Error::NonFinite(msg));
        }
        self.t += 1;
        let (cfg, t) = (self.config, self.t);
        model.visit_params(&mut |_, p| {
            adamw_update(&mut p.value.data, &p.grad.data, &mut p.m, &mut p.v, t, &cfg)
        });
        Ok(())
    }
}

/// Single-tensor AdamW update at step `t` (1-based).
pub fn adamw_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= cfg.lr * cfg.weight_decay * params[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a| + |n|, floor)`. The floor keeps
/// round-off on near-zero gradients from reading as a failure.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compare analytic gradients against central differences on every scalar
/// parameter. `loss_and_grad` must zero nothing itself, be deterministic and
/// accumulate into the parameter gradients.
pub fn grad_check<M, F>(model: &mut M, mut loss_and_grad: F, eps: f64) -> Result<GradCheck>
where
    M: Parameterized + ?Sized,
    F: FnMut(&mut M) -> Result<f64>,
{
    model.zero_grads();
    loss_and_grad(model)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, p| analytic.push((name.to_string(), p.grad.data.clone())));

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = with_param(model, pi, |p| p.value.data[j]);
            with_param(model, pi, |p| p.value.data[j] = orig + eps);
            let up = loss_and_grad(model)?;
            with_param(model, pi, |p| p.value.data[j] = orig - eps);
            let down = loss_and_grad(model)?;
            with_param(model, pi, |p| p.value.data[j] = orig);
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = j;
            }
        }
    }
    model.zero_grads();
    Ok(report)
}

fn with_param<M: Parameterized + ?Sized, T>(
    model: &mut M,
    index: usize,
    f: impl FnOnce(&mut Param) -> T,
) -> T {
    let mut f = Some(f);
    let mut out = None;
    let mut k = 0;
    model.visit_params(&mut |_, p| {
        if k == index {
            out = Some((f.take().unwrap())(p));
        }
        k += 1;
    });
    out.expect("parameter index out of range")
}
