//! Exact inference over single-root projective dependency trees.
//!
//! Words are numbered `1..=n` and `0` is the artificial root. The root takes
//! exactly one dependent. The dynamic program is Eisner's algorithm over the
//! words, with the root arc attached at the end:
//!
//! ```text
//! Z = Σ_d exp(S[0][d]) · C_left(1, d) · C_right(d, n)
//! ```
//!
//! All quantities are kept in log space.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numkern::{log_sum_exp, Matrix};

/// `(n+1) × n` arc scores: `get(h, d)` is the score of head `h` (0 = root)
/// taking dependent `d` (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct ArcScores {
    scores: Matrix,
}

impl ArcScores {
    pub fn new(scores: Matrix) -> Result<Self> {
        if scores.cols == 0 || scores.rows != scores.cols + 1 {
            return Err(Error::Dimension(format!(
                "arc scores must be (n+1)×n with n ≥ 1, got {}×{}",
                scores.rows, scores.cols
            )));
        }
        if !scores.is_finite() {
            return Err(Error::NonFinite("arc scores".into()));
        }
        Ok(ArcScores { scores })
    }

    pub fn zeros(n: usize) -> Self {
        ArcScores {
            scores: Matrix::zeros(n + 1, n),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.cols
    }

    pub fn is_empty(&self) -> bool {
        self.scores.cols == 0
    }

    #[inline]
    pub fn get(&self, head: usize, dep: usize) -> f64 {
        self.scores[(head, dep - 1)]
    }

    pub fn set(&mut self, head: usize, dep: usize, v: f64) {
        self.scores[(head, dep - 1)] = v;
    }

    pub fn matrix(&self) -> &Matrix {
        &self.scores
    }

    /// Sum of arc scores of a tree given as a head vector (`heads[d-1]`).
    pub fn tree_score(&self, heads: &[usize]) -> f64 {
        heads
            .iter()
            .enumerate()
            .map(|(i, &h)| self.get(h, i + 1))
            .sum()
    }
}

/// Log-partition and arc marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeDistribution {
    pub log_z: f64,
    /// `(n+1) × n`, same layout as [`ArcScores`].
    pub marginals: Matrix,
}

/// Inside charts, indexed `[i * (n+1) + j]` for `1 ≤ i ≤ j ≤ n`.
struct Chart {
    n: usize,
    /// complete span headed at its left end
    c_right: Vec<f64>,
    /// complete span headed at its right end
    c_left: Vec<f64>,
    /// incomplete span, arc left end → right end
    i_right: Vec<f64>,
    /// incomplete span, arc right end → left end
    i_left: Vec<f64>,
}

impl Chart {
    fn new(n: usize, fill: f64) -> Self {
        let size = (n + 1) * (n + 1);
        let mut c = Chart {
            n,
            c_right: vec![fill; size],
            c_left: vec![fill; size],
            i_right: vec![fill; size],
            i_left: vec![fill; size],
        };
        for i in 1..=n {
            let k = c.at(i, i);
            c.c_right[k] = 0.0;
            c.c_left[k] = 0.0;
        }
        c
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * (self.n + 1) + j
    }
}

fn check_nonempty(s: &ArcScores) -> Result<usize> {
    match s.len() {
        0 => Err(Error::Dimension("tree CRF needs at least one word".into())),
        n => Ok(n),
    }
}

fn inside(s: &ArcScores) -> (Chart, Vec<f64>, f64) {
    let n = s.len();
    let mut ch = Chart::new(n, f64::NEG_INFINITY);
    let mut terms = Vec::with_capacity(n);
    for w in 1..n {
        for i in 1..=n - w {
            let j = i + w;
            terms.clear();
            terms.extend((i..j).map(|k| ch.c_right[ch.at(i, k)] + ch.c_left[ch.at(k + 1, j)]));
            let base = log_sum_exp(&terms);
            let ij = ch.at(i, j);
            ch.i_right[ij] = s.get(i, j) + base;
            ch.i_left[ij] = s.get(j, i) + base;

            terms.clear();
            terms.extend((i + 1..=j).map(|k| ch.i_right[ch.at(i, k)] + ch.c_right[ch.at(k, j)]));
            ch.c_right[ij] = log_sum_exp(&terms);

            terms.clear();
            terms.extend((i..j).map(|k| ch.c_left[ch.at(i, k)] + ch.i_left[ch.at(k, j)]));
            ch.c_left[ij] = log_sum_exp(&terms);
        }
    }
    let root: Vec<f64> = (1..=n)
        .map(|d| s.get(0, d) + ch.c_left[ch.at(1, d)] + ch.c_right[ch.at(d, n)])
        .collect();
    let log_z = log_sum_exp(&root);
    (ch, root, log_z)
}

/// `log Σ_T exp(score(T))` over single-root projective trees.
pub fn inside_log_partition(s: &ArcScores) -> Result<f64> {
    check_nonempty(s)?;
    Ok(inside(s).2)
}

/// Arc marginals as the gradient of the log-partition, computed by running
/// the inside recursion backwards (outside pass).
pub fn marginals(s: &ArcScores) -> Result<TreeDistribution> {
    let n = check_nonempty(s)?;
    let (ch, root, log_z) = inside(s);
    let mut g = Chart::new(n, 0.0);
    let mut ds = Matrix::zeros(n + 1, n);

    for d in 1..=n {
        let p = (root[d - 1] - log_z).exp();
        ds[(0, d - 1)] += p;
        let (a, b) = (g.at(1, d), g.at(d, n));
        g.c_left[a] += p;
        g.c_right[b] += p;
    }

    for w in (1..n).rev() {
        for i in 1..=n - w {
            let j = i + w;
            let ij = ch.at(i, j);

            let gl = g.c_left[ij];
            if gl != 0.0 {
                for k in i..j {
                    let wt = (ch.c_left[ch.at(i, k)] + ch.i_left[ch.at(k, j)] - ch.c_left[ij]).exp();
                    let (a, b) = (g.at(i, k), g.at(k, j));
                    g.c_left[a] += gl * wt;
                    g.i_left[b] += gl * wt;
                }
            }
            let gr = g.c_right[ij];
            if gr != 0.0 {
                for k in i + 1..=j {
                    let wt =
                        (ch.i_right[ch.at(i, k)] + ch.c_right[ch.at(k, j)] - ch.c_right[ij]).exp();
                    let (a, b) = (g.at(i, k), g.at(k, j));
                    g.i_right[a] += gr * wt;
                    g.c_right[b] += gr * wt;
                }
            }

            let (g_ir, g_il) = (g.i_right[ij], g.i_left[ij]);
            ds[(i, j - 1)] += g_ir;
            ds[(j, i - 1)] += g_il;
            let g_base = g_ir + g_il;
            if g_base != 0.0 {
                let base = ch.i_right[ij] - s.get(i, j);
                for k in i..j {
                    let wt = (ch.c_right[ch.at(i, k)] + ch.c_left[ch.at(k + 1, j)] - base).exp();
                    let (a, b) = (g.at(i, k), g.at(k + 1, j));
                    g.c_right[a] += g_base * wt;
                    g.c_left[b] += g_base * wt;
                }
            }
        }
    }
    Ok(TreeDistribution {
        log_z,
        marginals: ds,
    })
}

#[derive(Clone, Copy)]
enum Cell {
    CRight,
    CLeft,
    IRight,
    ILeft,
}

struct ViterbiChart {
    scores: Chart,
    /// best split point per cell kind
    bp_c_right: Vec<usize>,
    bp_c_left: Vec<usize>,
    bp_inc: Vec<usize>,
}

impl ViterbiChart {
    /// Write the heads implied by `cell` over `(i, j)` into `heads` (1-based).
    fn fill(&self, cell: Cell, i: usize, j: usize, heads: &mut [usize]) {
        if i == j {
            return;
        }
        let ij = self.scores.at(i, j);
        match cell {
            Cell::CRight => {
                let k = self.bp_c_right[ij];
                self.fill(Cell::IRight, i, k, heads);
                self.fill(Cell::CRight, k, j, heads);
            }
            Cell::CLeft => {
                let k = self.bp_c_left[ij];
                self.fill(Cell::CLeft, i, k, heads);
                self.fill(Cell::ILeft, k, j, heads);
            }
            Cell::IRight | Cell::ILeft => {
                let k = self.bp_inc[ij];
                if let Cell::IRight = cell {
                    heads[j] = i;
                } else {
                    heads[i] = j;
                }
                self.fill(Cell::CRight, i, k, heads);
                self.fill(Cell::CLeft, k + 1, j, heads);
            }
        }
    }
}

/// Pick the best split among `candidates` (score, split). Exact score ties
/// are resolved by rebuilding both fragments and keeping the one whose head
/// vector over `range` is lexicographically smaller.
fn argmax_lex(
    candidates: impl Iterator<Item = (f64, usize)>,
    range: (usize, usize),
    mut fragment: impl FnMut(usize, &mut [usize]),
    scratch: &mut [Vec<usize>; 2],
) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for (score, k) in candidates {
        let better = if best.1 == usize::MAX || score > best.0 {
            true
        } else if score == best.0 {
            let [a, b] = scratch;
            a.iter_mut().for_each(|x| *x = usize::MAX);
            b.iter_mut().for_each(|x| *x = usize::MAX);
            fragment(k, a);
            fragment(best.1, b);
            a[range.0..=range.1].cmp(&b[range.0..=range.1]) == Ordering::Less
        } else {
            false
        };
        if better {
            best = (score, k);
        }
    }
    best
}

/// Highest-scoring single-root projective tree as a head vector
/// (`heads[d-1]` is the head of word `d`). Exact ties go to the
/// lexicographically smallest head vector.
pub fn viterbi_decode(s: &ArcScores) -> Result<Vec<usize>> {
    let n = check_nonempty(s)?;
    let size = (n + 1) * (n + 1);
    let mut vc = ViterbiChart {
        scores: Chart::new(n, f64::NEG_INFINITY),
        bp_c_right: vec![0; size],
        bp_c_left: vec![0; size],
        bp_inc: vec![0; size],
    };
    let mut scratch = [vec![usize::MAX; n + 1], vec![usize::MAX; n + 1]];

    for w in 1..n {
        for i in 1..=n - w {
            let j = i + w;
            let ij = vc.scores.at(i, j);
            let ch = &vc.scores;

            let cands: Vec<(f64, usize)> = (i..j)
                .map(|k| (ch.c_right[ch.at(i, k)] + ch.c_left[ch.at(k + 1, j)], k))
                .collect();
            let (base, k) = argmax_lex(
                cands.into_iter(),
                (i, j),
                |k, h| {
                    vc.fill(Cell::CRight, i, k, h);
                    vc.fill(Cell::CLeft, k + 1, j, h);
                },
                &mut scratch,
            );
            vc.bp_inc[ij] = k;
            vc.scores.i_right[ij] = base + s.get(i, j);
            vc.scores.i_left[ij] = base + s.get(j, i);

            let ch = &vc.scores;
            let cands: Vec<(f64, usize)> = (i + 1..=j)
                .map(|k| (ch.i_right[ch.at(i, k)] + ch.c_right[ch.at(k, j)], k))
                .collect();
            let (best, k) = argmax_lex(
                cands.into_iter(),
                (i, j),
                |k, h| {
                    vc.fill(Cell::IRight, i, k, h);
                    vc.fill(Cell::CRight, k, j, h);
                },
                &mut scratch,
            );
            vc.bp_c_right[ij] = k;
            vc.scores.c_right[ij] = best;

            let ch = &vc.scores;
            let cands: Vec<(f64, usize)> = (i..j)
                .map(|k| (ch.c_left[ch.at(i, k)] + ch.i_left[ch.at(k, j)], k))
                .collect();
            let (best, k) = argmax_lex(
                cands.into_iter(),
                (i, j),
                |k, h| {
                    vc.fill(Cell::CLeft, i, k, h);
                    vc.fill(Cell::ILeft, k, j, h);
                },
                &mut scratch,
            );
            vc.bp_c_left[ij] = k;
            vc.scores.c_left[ij] = best;
        }
    }

    let ch = &vc.scores;
    let cands: Vec<(f64, usize)> = (1..=n)
        .map(|d| (s.get(0, d) + ch.c_left[ch.at(1, d)] + ch.c_right[ch.at(d, n)], d))
        .collect();
    let root_fragment = |d: usize, h: &mut [usize]| {
        h[d] = 0;
        vc.fill(Cell::CLeft, 1, d, h);
        vc.fill(Cell::CRight, d, n, h);
    };
    let (_, d) = argmax_lex(cands.into_iter(), (1, n), root_fragment, &mut scratch);
    let mut heads = vec![usize::MAX; n + 1];
    root_fragment(d, &mut heads);
    Ok(heads[1..].to_vec())
}

/// True when `heads` (1-based words, `heads[d-1]`, 0 = root) is a connected,
/// acyclic tree with exactly one root dependent and no crossing arcs, the
/// root arc included.
pub fn is_projective_tree(heads: &[usize]) -> bool {
    let n = heads.len();
    if n == 0 || heads.iter().filter(|&&h| h == 0).count() != 1 {
        return false;
    }
    if heads.iter().enumerate().any(|(i, &h)| h > n || h == i + 1) {
        return false;
    }
    // acyclic: every word reaches the root within n steps
    for d in 1..=n {
        let mut cur = d;
        let mut steps = 0;
        while cur != 0 {
            cur = heads[cur - 1];
            steps += 1;
            if steps > n {
                return false;
            }
        }
    }
    let arcs: Vec<(usize, usize)> = heads
        .iter()
        .enumerate()
        .map(|(i, &h)| (h.min(i + 1), h.max(i + 1)))
        .collect();
    for (a, &(l1, r1)) in arcs.iter().enumerate() {
        for &(l2, r2) in &arcs[a + 1..] {
            if (l1 < l2 && l2 < r1 && r1 < r2) || (l2 < l1 && l1 < r2 && r2 < r1) {
                return false;
            }
        }
    }
    true
}

/// Every single-root projective tree over `n` words, by exhaustive search
/// over head assignments. Only meant as a test oracle.
pub fn enumerate_projective_trees(n: usize) -> Result<Vec<Vec<usize>>> {
    if !(1..=8).contains(&n) {
        return Err(Error::Config(format!(
            "tree enumeration supports 1 ≤ n ≤ 8, got {}",
            n
        )));
    }
    let mut out = Vec::new();
    let mut heads = vec![0; n];
    fn rec(pos: usize, roots: usize, heads: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let n = heads.len();
        if pos == n {
            if roots == 1 && is_projective_tree(heads) {
                out.push(heads.clone());
            }
            return;
        }
        for h in 0..=n {
            if h == pos + 1 || (h == 0 && roots == 1) {
                continue;
            }
            heads[pos] = h;
            rec(pos + 1, roots + usize::from(h == 0), heads, out);
        }
    }
    rec(0, 0, &mut heads, &mut out);
    Ok(out)
}

/// Negative log-likelihood of the gold tree and its gradient
/// `marginals − gold indicator`.
pub fn crf_nll_and_grad(s: &ArcScores, gold_heads: &[usize]) -> Result<(f64, Matrix)> {
    let n = check_nonempty(s)?;
    if gold_heads.len() != n {
        return Err(Error::Dimension(format!(
            "{} gold heads for {} words",
            gold_heads.len(),
            n
        )));
    }
    if !is_projective_tree(gold_heads) {
        return Err(Error::Format {
            sent: String::new(),
            msg: format!("gold tree {:?} is not a single-root projective tree", gold_heads),
        });
    }
    let dist = marginals(s)?;
    let loss = (dist.log_z - s.tree_score(gold_heads)).max(0.0);
    let mut grad = dist.marginals;
    for (i, &h) in gold_heads.iter().enumerate() {
        grad[(h, i)] -= 1.0;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scores(n: usize, seed: u64) -> ArcScores {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ArcScores::new(Matrix::uniform(n + 1, n, 3.0, &mut r)).unwrap()
    }

    #[test]
    fn single_word() {
        let mut s = ArcScores::zeros(1);
        s.set(0, 1, 1.7);
        assert_eq!(inside_log_partition(&s).unwrap(), 1.7);
        let m = marginals(&s).unwrap();
        assert_eq!(m.marginals[(0, 0)], 1.0);
        assert_eq!(viterbi_decode(&s).unwrap(), [0]);
        let (loss, _) = crf_nll_and_grad(&s, &[0]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn empty_is_error() {
        assert!(ArcScores::new(Matrix::zeros(1, 0)).is_err());
        assert!(inside_log_partition(&ArcScores::zeros(0)).is_err());
    }

    #[test]
    fn two_words_uniform() {
        let s = ArcScores::zeros(2);
        assert!((inside_log_partition(&s).unwrap() - 2f64.ln()).abs() < 1e-15);
        let m = marginals(&s).unwrap().marginals;
        // only root→1→2 and root→2→1 exist
        for (h, d) in [(0, 1), (1, 2), (0, 2), (2, 1)] {
            assert!((m[(h, d - 1)] - 0.5).abs() < 1e-15);
        }
        for gold in [[0, 1], [2, 0]] {
            let (loss, _) = crf_nll_and_grad(&s, &gold).unwrap();
            assert!((loss - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn two_words_viterbi_by_hand() {
        let mut s = ArcScores::zeros(2);
        s.set(0, 1, 2.0);
        s.set(1, 2, 1.0);
        s.set(0, 2, 0.5);
        s.set(2, 1, 0.5);
        assert_eq!(viterbi_decode(&s).unwrap(), [0, 1]);
    }

    #[test]
    fn enumeration_small_cases() {
        assert_eq!(enumerate_projective_trees(1).unwrap(), [[0]]);
        assert_eq!(enumerate_projective_trees(2).unwrap(), [[0, 1], [2, 0]]);
        let counts: Vec<usize> = (1..=6)
            .map(|n| enumerate_projective_trees(n).unwrap().len())
            .collect();
        assert_eq!(counts, [1, 2, 7, 30, 143, 728]);
        assert!(enumerate_projective_trees(0).is_err());
        assert!(enumerate_projective_trees(9).is_err());
    }

    #[test]
    fn projectivity_checks() {
        assert!(is_projective_tree(&[2, 0, 2]));
        // 1→3 crosses 2→4
        assert!(!is_projective_tree(&[0, 4, 1, 1]));
        // root arc to 2 covered by 1→3
        assert!(!is_projective_tree(&[3, 0, 1]));
        assert!(!is_projective_tree(&[0, 0]));
        assert!(!is_projective_tree(&[2, 1, 0]));
        let s = ArcScores::zeros(3);
        assert!(crf_nll_and_grad(&s, &[3, 0, 1]).is_err());
        assert!(crf_nll_and_grad(&s, &[0, 1]).is_err());
    }

    #[test]
    fn viterbi_tie_goes_to_smallest_head_vector() {
        for n in 1..=5 {
            let best = viterbi_decode(&ArcScores::zeros(n)).unwrap();
            let all = enumerate_projective_trees(n).unwrap();
            assert_eq!(&best, all.iter().min().unwrap(), "n = {}", n);
        }
    }

    #[test]
    fn marginals_sum_to_one() {
        for seed in 0..10 {
            let s = random_scores(6, seed);
            let m = marginals(&s).unwrap().marginals;
            for d in 0..6 {
                let col: f64 = (0..7).map(|h| m[(h, d)]).sum();
                assert!((col - 1.0).abs() < 1e-10);
            }
            let root: f64 = m.row(0).iter().sum();
            assert!((root - 1.0).abs() < 1e-10);
            assert!(m.data.iter().all(|&p| (-1e-12..=1.0 + 1e-12).contains(&p)));
        }
    }

    #[test]
    fn shift_invariance_per_dependent() {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..10 {
            let s = random_scores(5, seed);
            let d = r.gen_range(1..=5);
            let c = r.gen_range(-4.0..4.0);
            let mut t = s.clone();
            for h in 0..=5 {
                t.set(h, d, s.get(h, d) + c);
            }
            let (a, b) = (marginals(&s).unwrap(), marginals(&t).unwrap());
            assert!((b.log_z - a.log_z - c).abs() < 1e-10);
            for k in 0..a.marginals.data.len() {
                assert!((a.marginals.data[k] - b.marginals.data[k]).abs() < 1e-10);
            }
            assert_eq!(viterbi_decode(&s).unwrap(), viterbi_decode(&t).unwrap());
        }
    }

    #[test]
    fn long_sentence_stays_finite() {
        let s = random_scores(60, 1);
        let m = marginals(&s).unwrap();
        assert!(m.log_z.is_finite() && m.marginals.is_finite());
        assert!(is_projective_tree(&viterbi_decode(&s).unwrap()));
    }
}
