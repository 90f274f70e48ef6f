//! Hard-negative contrastive loss with difficulty-weighted negatives, and
//! the weighted three-target objective.
//!
//! For a `B×B` similarity matrix `S` with positives on the diagonal, the
//! row term for query `i` is
//!
//! ```text
//! -log( exp(S_ii/τ) / (α·exp(S_ii/τ) + Σ_{j≠i} exp(S_ij/τ)·w_ij) )
//! w_ij = (B-1)·exp(β·S_ij/τ) / Σ_{k≠i} exp(β·S_ik/τ)
//! ```
//!
//! and the column term is the same expression over `Sᵀ`. Both are computed
//! in log space; `w` enters as `ln w`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::SimilarityMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    /// Scale on the positive term in the denominator.
    pub alpha: f64,
    /// Hard-negative sharpness; 0 gives uniform weights.
    pub beta: f64,
    /// Treat `w` as a constant when differentiating.
    pub detach_weights: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.07,
            alpha: 1.0,
            beta: 0.5,
            detach_weights: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("beta {} must be >= 0", self.beta)));
        }
        Ok(())
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-weights for one row of scaled similarities `a = S_i·/τ`, skipping
/// the positive at `pos`.
fn row_log_weights(a: &[f64], pos: usize, beta: f64) -> Vec<f64> {
    let b = a.len();
    if b < 2 {
        return vec![f64::NEG_INFINITY; b];
    }
    let norm = log_sum_exp(a.iter().enumerate().filter(|&(j, _)| j != pos).map(|(_, &x)| beta * x));
    let scale = ((b - 1) as f64).ln();
    a.iter()
        .enumerate()
        .map(|(j, &x)| if j == pos { f64::NEG_INFINITY } else { scale + beta * x - norm })
        .collect()
}

/// Difficulty weights for row-wise and column-wise negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct HnWeights {
    /// `row[[i, j]] = w_ij` for the row term; diagonal unused (zero).
    pub row: Array2<f64>,
    /// `col[[j, i]] = w_ji` for the column term, normalized over each
    /// column `i`; diagonal unused (zero).
    pub col: Array2<f64>,
}

fn check_square(s: &SimilarityMatrix) -> Result<()> {
    if !s.is_square() || s.nrows() == 0 {
        return Err(Error::ShapeError(format!(
            "similarity matrix is {}x{}, expected non-empty square",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.entries().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput("similarity matrix"));
    }
    Ok(())
}

/// Weights `w_ij` for every off-diagonal pair. A batch of one has no
/// negatives and yields empty matrices.
pub fn hn_weights(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<HnWeights> {
    check_square(s)?;
    let b = s.nrows();
    if b == 1 {
        return Ok(HnWeights {
            row: Array2::zeros((0, 0)),
            col: Array2::zeros((0, 0)),
        });
    }
    let scaled = s.entries() / cfg.temperature;
    let mut row = Array2::zeros((b, b));
    let mut col = Array2::zeros((b, b));
    for i in 0..b {
        let r: Vec<f64> = scaled.row(i).to_vec();
        for (j, lw) in row_log_weights(&r, i, cfg.beta).into_iter().enumerate() {
            row[[i, j]] = lw.exp();
        }
        let c: Vec<f64> = scaled.column(i).to_vec();
        for (j, lw) in row_log_weights(&c, i, cfg.beta).into_iter().enumerate() {
            col[[j, i]] = lw.exp();
        }
    }
    Ok(HnWeights { row, col })
}

/// Loss and `∂ℓ/∂a` for one direction: `a` are scaled similarities with
/// the positive at `pos`.
fn directional_term(a: &[f64], pos: usize, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let b = a.len();
    let log_w = row_log_weights(a, pos, cfg.beta);
    // log of the weighted negative mass Σ exp(a_j)·w_j
    let neg_terms: Vec<f64> = a.iter().zip(&log_w).map(|(x, lw)| x + lw).collect();
    let log_neg = log_sum_exp(neg_terms.iter().copied());
    let log_pos = cfg.alpha.ln() + a[pos];
    let log_denom = log_sum_exp([log_pos, log_neg].into_iter());
    let loss = log_denom - a[pos];

    let mut grad = vec![0.0; b];
    let p_pos = if log_pos == f64::NEG_INFINITY { 0.0 } else { (log_pos - log_denom).exp() };
    grad[pos] = p_pos - 1.0;
    if b > 1 && log_neg > f64::NEG_INFINITY {
        let p_neg = (log_neg - log_denom).exp();
        // share of each negative in the weighted mass: softmax of (1+β)a
        let share: Vec<f64> = neg_terms.iter().map(|t| (t - log_neg).exp()).collect();
        let beta_soft: Vec<f64> = if cfg.detach_weights {
            vec![0.0; b]
        } else {
            let norm = log_sum_exp(a.iter().enumerate().filter(|&(j, _)| j != pos).map(|(_, &x)| cfg.beta * x));
            a.iter()
                .enumerate()
                .map(|(j, &x)| if j == pos { 0.0 } else { (cfg.beta * x - norm).exp() })
                .collect()
        };
        for j in (0..b).filter(|&j| j != pos) {
            let d_log_neg = if cfg.detach_weights {
                share[j]
            } else {
                (1.0 + cfg.beta) * share[j] - cfg.beta * beta_soft[j]
            };
            grad[j] = p_neg * d_log_neg;
        }
    }
    (loss, grad)
}

/// Loss value and gradient with respect to every entry of `S`.
pub fn hn_nce_with_grad(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<(f64, Array2<f64>)> {
    cfg.validate()?;
    check_square(s)?;
    let b = s.nrows();
    let tau = cfg.temperature;
    let scaled = s.entries() / tau;
    let mut grad = Array2::zeros((b, b));
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b {
        let r: Vec<f64> = scaled.row(i).to_vec();
        let (l, g) = directional_term(&r, i, cfg);
        rows += l;
        for (j, d) in g.into_iter().enumerate() {
            grad[[i, j]] += d / tau;
        }
    }
    for i in 0..b {
        let c: Vec<f64> = scaled.column(i).to_vec();
        let (l, g) = directional_term(&c, i, cfg);
        cols += l;
        for (j, d) in g.into_iter().enumerate() {
            grad[[j, i]] += d / tau;
        }
    }
    Ok((rows + cols, grad))
}

pub fn hn_nce_loss(s: &SimilarityMatrix, cfg: &LossConfig) -> Result<f64> {
    hn_nce_with_grad(s, cfg).map(|(l, _)| l)
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Effective (λ, μ, δ) for the visual, multi-modal and text targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub delta: f64,
}

impl LossWeights {
    pub fn from_raw(raw: &[f64; 3]) -> Self {
        LossWeights {
            lambda: softplus(raw[0]),
            mu: softplus(raw[1]),
            delta: softplus(raw[2]),
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.lambda, self.mu, self.delta]
    }
}

/// Which target databases contribute a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LossTerms {
    pub visual: bool,
    pub multimodal: bool,
    pub text: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms { visual: true, multimodal: true, text: true };
    pub const VISUAL: LossTerms = LossTerms { visual: true, multimodal: false, text: false };
    pub const VISUAL_MULTIMODAL: LossTerms = LossTerms { visual: true, multimodal: true, text: false };

    pub fn as_array(&self) -> [bool; 3] {
        [self.visual, self.multimodal, self.text]
    }

    pub fn is_empty(&self) -> bool {
        !(self.visual || self.multimodal || self.text)
    }
}

impl fmt::Display for LossTerms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = ["ve", "mme", "te"]
            .into_iter()
            .zip(self.as_array())
            .filter(|(_, on)| *on)
            .map(|(n, _)| n)
            .collect();
        write!(f, "{}", if names.is_empty() { "none".to_string() } else { names.join("+") })
    }
}

impl FromStr for LossTerms {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = LossTerms { visual: false, multimodal: false, text: false };
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "all" => t = LossTerms::ALL,
                "ve" | "visual" => t.visual = true,
                "mme" | "multimodal" => t.multimodal = true,
                "te" | "text" => t.text = true,
                other => return Err(Error::InvalidConfig(format!("unknown loss term {other:?}"))),
            }
        }
        if t.is_empty() {
            return Err(Error::NoLossTerms);
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub weights: LossWeights,
    /// Unweighted per-target losses, `None` when disabled.
    pub terms: [Option<f64>; 3],
}

/// `λ·L_ve + μ·L_mme + δ·L_te` over the enabled terms.
pub fn combined_loss(
    sims: [&SimilarityMatrix; 3],
    raw_weights: &[f64; 3],
    enabled: LossTerms,
    cfg: &LossConfig,
) -> Result<CombinedLoss> {
    if enabled.is_empty() {
        return Err(Error::NoLossTerms);
    }
    let weights = LossWeights::from_raw(raw_weights);
    let w = weights.as_array();
    let mut terms = [None; 3];
    let mut value = 0.0;
    for k in 0..3 {
        if enabled.as_array()[k] {
            let l = hn_nce_loss(sims[k], cfg)?;
            value += w[k] * l;
            terms[k] = Some(l);
        }
    }
    Ok(CombinedLoss { value, weights, terms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub loss: CombinedLoss,
    /// `∂L/∂joint`, `B×m`.
    pub joint: Array2<f64>,
    /// `∂L/∂(λ̂, μ̂, δ̂)`.
    pub raw_weights: [f64; 3],
}

/// Combined loss and its gradients. `joint` holds one query embedding per
/// row and `targets[k]` the matching target embeddings for database `k`;
/// all rows are expected unit-norm, so similarities are dot products.
pub fn loss_gradients(
    joint: &Array2<f64>,
    targets: [&Array2<f64>; 3],
    raw_weights: &[f64; 3],
    enabled: LossTerms,
    cfg: &LossConfig,
) -> Result<LossGradients> {
    if enabled.is_empty() {
        return Err(Error::NoLossTerms);
    }
    if joint.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteInput("joint embeddings"));
    }
    let weights = LossWeights::from_raw(raw_weights);
    let w = weights.as_array();
    let mut d_joint = Array2::zeros(joint.raw_dim());
    let mut d_raw = [0.0; 3];
    let mut terms = [None; 3];
    let mut value = 0.0;
    for k in 0..3 {
        if !enabled.as_array()[k] {
            continue;
        }
        let target = targets[k];
        if target.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("target embeddings"));
        }
        let s = SimilarityMatrix::from_unit_rows(joint, target)?;
        let (l, d_s) = hn_nce_with_grad(&s, cfg)?;
        value += w[k] * l;
        terms[k] = Some(l);
        d_raw[k] = sigmoid(raw_weights[k]) * l;
        d_joint.scaled_add(w[k], &d_s.dot(target));
    }
    Ok(LossGradients {
        loss: CombinedLoss { value, weights, terms },
        joint: d_joint,
        raw_weights: d_raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the weighted loss with explicit exponentials.
    fn oracle_loss(s: &Array2<f64>, tau: f64, alpha: f64, beta: f64) -> f64 {
        let b = s.nrows();
        let w = |i: usize, j: usize, col: bool| {
            let get = |p: usize, q: usize| if col { s[[q, p]] } else { s[[p, q]] };
            let denom: f64 = (0..b).filter(|&k| k != i).map(|k| (beta * get(i, k) / tau).exp()).sum();
            (b as f64 - 1.0) * (beta * get(i, j) / tau).exp() / denom
        };
        let mut total = 0.0;
        for col in [false, true] {
            for i in 0..b {
                let get = |p: usize, q: usize| if col { s[[q, p]] } else { s[[p, q]] };
                let pos = (get(i, i) / tau).exp();
                let neg: f64 = (0..b)
                    .filter(|&j| j != i)
                    .map(|j| (get(i, j) / tau).exp() * w(i, j, col))
                    .sum();
                total -= (pos / (alpha * pos + neg)).ln();
            }
        }
        total
    }

    fn random_sims(rng: &mut ChaCha8Rng, b: usize) -> Array2<f64> {
        Array2::from_shape_fn((b, b), |_| rng.random_range(-1.0..1.0))
    }

    fn sm(a: Array2<f64>) -> SimilarityMatrix {
        SimilarityMatrix::new(a)
    }

    #[test]
    fn uniform_negatives_weigh_one() {
        let s = array![[0.9, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.2, 0.7]];
        let w = hn_weights(&sm(s), &LossConfig::default()).unwrap();
        for i in 0..3 {
            for j in (0..3).filter(|&j| j != i) {
                assert!((w.row[[i, j]] - 1.0).abs() < 1e-12);
                assert!((w.col[[i, j]] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pair_batch_weighs_one() {
        let s = array![[0.3, -0.7], [0.95, 0.1]];
        let w = hn_weights(&sm(s), &LossConfig::default()).unwrap();
        assert!((w.row[[0, 1]] - 1.0).abs() < 1e-12 && (w.row[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((w.col[[0, 1]] - 1.0).abs() < 1e-12 && (w.col[[1, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn harder_negative_gets_more_weight() {
        let s = array![[1.0, 0.9, 0.1], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let w = hn_weights(&sm(s), &LossConfig::default()).unwrap();
        let (e1, e2) = ((0.5f64 * 0.9 / 0.07).exp(), (0.5f64 * 0.1 / 0.07).exp());
        let oracle = [2.0 * e1 / (e1 + e2), 2.0 * e2 / (e1 + e2)];
        assert!((w.row[[0, 1]] - oracle[0]).abs() < 1e-12);
        assert!((w.row[[0, 2]] - oracle[1]).abs() < 1e-12);
        assert!(w.row[[0, 1]] > 1.0 && w.row[[0, 2]] < 1.0);
        // frozen value of the scalar oracle
        assert!((oracle[0] - 1.993_424_677).abs() < 1e-8, "{}", oracle[0]);
    }

    #[test]
    fn single_batch_has_no_weights_and_zero_loss() {
        let s = sm(array![[0.37]]);
        let w = hn_weights(&s, &LossConfig::default()).unwrap();
        assert_eq!(w.row.len(), 0);
        assert_eq!(hn_nce_loss(&s, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn identity_pair_matches_oracle_and_is_symmetric() {
        let s = array![[1.0, 0.0], [0.0, 1.0]];
        let cfg = LossConfig::default();
        let l = hn_nce_loss(&sm(s.clone()), &cfg).unwrap();
        let oracle = oracle_loss(&s, 0.07, 1.0, 0.5);
        assert!(l > 0.0);
        assert!((l - oracle).abs() < 1e-12);
        // each of the four fractions is 1/(1 + e^{-1/τ})
        let per = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((l - 4.0 * per).abs() < 1e-13, "{l} vs {}", 4.0 * per);
    }

    #[test]
    fn raising_positives_lowers_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig::default();
        for _ in 0..50 {
            let s = random_sims(&mut rng, 5);
            let mut raised = s.clone();
            for i in 0..5 {
                raised[[i, i]] += 0.01;
            }
            let (a, b) = (oracle_loss(&s, 0.07, 1.0, 0.5), oracle_loss(&raised, 0.07, 1.0, 0.5));
            assert!(b < a);
            assert!(hn_nce_loss(&sm(raised), &cfg).unwrap() < hn_nce_loss(&sm(s), &cfg).unwrap());
        }
    }

    #[test]
    fn matches_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &b in &[2usize, 3, 7] {
            for &(alpha, beta) in &[(1.0, 0.5), (0.5, 0.0), (1.0, 2.0)] {
                let s = random_sims(&mut rng, b);
                let cfg = LossConfig { temperature: 0.2, alpha, beta, detach_weights: false };
                let l = hn_nce_loss(&sm(s.clone()), &cfg).unwrap();
                let o = oracle_loss(&s, 0.2, alpha, beta);
                assert!((l - o).abs() < 1e-9 * o.abs().max(1.0), "{l} vs {o}");
            }
        }
    }

    fn fd_grad(s: &Array2<f64>, cfg: &LossConfig) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(s.raw_dim());
        for idx in ndarray::indices(s.raw_dim()) {
            let mut p = s.clone();
            p[idx] += h;
            let mut m = s.clone();
            m[idx] -= h;
            out[idx] = (oracle_loss(&p, cfg.temperature, cfg.alpha, cfg.beta)
                - oracle_loss(&m, cfg.temperature, cfg.alpha, cfg.beta))
                / (2.0 * h);
        }
        out
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig { temperature: 0.3, ..LossConfig::default() };
        for b in [1, 2, 4] {
            let s = random_sims(&mut rng, b);
            let (_, g) = hn_nce_with_grad(&sm(s.clone()), &cfg).unwrap();
            let fd = fd_grad(&s, &cfg);
            for (a, n) in g.iter().zip(fd.iter()) {
                assert!((a - n).abs() < 1e-6 * a.abs().max(1.0), "{a} vs {n}");
            }
        }
    }

    #[test]
    fn detached_gradient_ignores_weight_dependence() {
        // with β = 0 the weights are constant, so both modes agree
        let s = array![[0.5, 0.1, -0.2], [0.3, 0.6, 0.0], [0.2, 0.4, 0.1]];
        let flat = LossConfig { beta: 0.0, ..LossConfig::default() };
        let (_, a) = hn_nce_with_grad(&sm(s.clone()), &flat).unwrap();
        let (_, b) = hn_nce_with_grad(&sm(s.clone()), &LossConfig { detach_weights: true, ..flat }).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let (_, attached) = hn_nce_with_grad(&sm(s.clone()), &LossConfig::default()).unwrap();
        let (_, detached) =
            hn_nce_with_grad(&sm(s), &LossConfig { detach_weights: true, ..LossConfig::default() }).unwrap();
        assert!(attached.iter().zip(detached.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn diagonal_gradient_is_negative_at_symmetric_point() {
        let s = array![[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]];
        let (_, g) = hn_nce_with_grad(&sm(s), &LossConfig::default()).unwrap();
        for i in 0..3 {
            assert!(g[[i, i]] < 0.0);
            for j in 0..3 {
                assert!((g[[i, j]] - g[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        let cfg = LossConfig::default();
        assert!(matches!(hn_nce_loss(&sm(array![[1.0, f64::NAN], [0.0, 1.0]]), &cfg), Err(Error::NonFiniteInput(_))));
        assert!(matches!(hn_nce_loss(&sm(Array2::zeros((2, 3))), &cfg), Err(Error::ShapeError(_))));
    }

    #[test]
    fn combined_reduces_and_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = LossConfig::default();
        let s = sm(random_sims(&mut rng, 4));
        let base = hn_nce_loss(&s, &cfg).unwrap();
        let raw_one = [(1f64.exp() - 1.0).ln(); 3];
        let only_ve = combined_loss([&s, &s, &s], &raw_one, LossTerms::VISUAL, &cfg).unwrap();
        assert!((only_ve.value - base).abs() < 1e-12);
        let raw = [0.2; 3];
        let lambda = softplus(0.2);
        let all = combined_loss([&s, &s, &s], &raw, LossTerms::ALL, &cfg).unwrap();
        assert!((all.value - 3.0 * lambda * base).abs() < 1e-12);
        let none = LossTerms { visual: false, multimodal: false, text: false };
        assert!(matches!(combined_loss([&s, &s, &s], &raw, none, &cfg), Err(Error::NoLossTerms)));
    }

    #[test]
    fn combined_with_reported_weights_matches_weighted_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = LossConfig::default();
        let mats: Vec<Array2<f64>> = (0..3).map(|_| random_sims(&mut rng, 5)).collect();
        let target = [0.83, 0.08, 0.07];
        let raw = target.map(|w: f64| w.exp_m1().ln());
        let sims: Vec<SimilarityMatrix> = mats.iter().cloned().map(sm).collect();
        let got = combined_loss([&sims[0], &sims[1], &sims[2]], &raw, LossTerms::ALL, &cfg).unwrap();
        let oracle: f64 = mats.iter().zip(target).map(|(m, w)| w * oracle_loss(m, 0.07, 1.0, 0.5)).sum();
        assert!((got.value - oracle).abs() < 1e-9 * oracle);
        assert!((got.weights.lambda - 0.83).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (b, m) = (3, 8);
        let unit = |rng: &mut ChaCha8Rng| {
            let mut a = Array2::from_shape_fn((b, m), |_| rng.random_range(-1.0..1.0f64));
            for mut r in a.rows_mut() {
                let n = r.dot(&r).sqrt();
                r.mapv_inplace(|x| x / n);
            }
            a
        };
        let joint = unit(&mut rng);
        let targets = [unit(&mut rng), unit(&mut rng), unit(&mut rng)];
        let raw = [0.3, -0.4, 1.1];
        let cfg = LossConfig::default();
        let t = [&targets[0], &targets[1], &targets[2]];
        let g = loss_gradients(&joint, t, &raw, LossTerms::ALL, &cfg).unwrap();
        let value = |j: &Array2<f64>, r: &[f64; 3]| loss_gradients(j, t, r, LossTerms::ALL, &cfg).unwrap().loss.value;
        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        let mut worst = 0.0f64;
        for idx in ndarray::indices(joint.raw_dim()) {
            let mut p = joint.clone();
            p[idx] += h;
            let mut q = joint.clone();
            q[idx] -= h;
            worst = worst.max(rel(g.joint[idx], (value(&p, &raw) - value(&q, &raw)) / (2.0 * h)));
        }
        for k in 0..3 {
            let (mut p, mut q) = (raw, raw);
            p[k] += h;
            q[k] -= h;
            worst = worst.max(rel(g.raw_weights[k], (value(&joint, &p) - value(&joint, &q)) / (2.0 * h)));
        }
        assert!(worst < 1e-4, "max relative error {worst}");

        let partial = loss_gradients(&joint, t, &raw, LossTerms::VISUAL, &cfg).unwrap();
        assert_eq!(partial.raw_weights[1], 0.0);
        assert_eq!(partial.raw_weights[2], 0.0);
    }

    #[test]
    fn temperature_sweep_stays_finite() {
        let s = array![[0.9, 0.3, -0.5], [0.1, 0.7, 0.2], [0.6, -0.9, 0.4]];
        let mut tau = 1e-3;
        while tau <= 10.0 {
            let cfg = LossConfig { temperature: tau, ..LossConfig::default() };
            let (l, g) = hn_nce_with_grad(&sm(s.clone()), &cfg).unwrap();
            assert!(l.is_finite() && g.iter().all(|x| x.is_finite()), "tau = {tau}");
            tau *= 1.5;
        }
    }

    proptest! {
        #[test]
        fn weights_rows_sum_to_batch_minus_one(b in 2usize..12, seed in 0u64..1000, beta in 0.0..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_sims(&mut rng, b);
            let cfg = LossConfig { beta, ..LossConfig::default() };
            let w = hn_weights(&sm(s), &cfg).unwrap();
            for i in 0..b {
                let row: f64 = (0..b).filter(|&j| j != i).map(|j| w.row[[i, j]]).sum();
                let col: f64 = (0..b).filter(|&j| j != i).map(|j| w.col[[j, i]]).sum();
                prop_assert!((row - (b - 1) as f64).abs() < 1e-9);
                prop_assert!((col - (b - 1) as f64).abs() < 1e-9);
            }
        }

        #[test]
        fn loss_is_non_negative(b in 1usize..10, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_sims(&mut rng, b);
            prop_assert!(hn_nce_loss(&sm(s), &LossConfig::default()).unwrap() >= 0.0);
        }

        #[test]
        fn softplus_weights_are_positive(raw in prop::array::uniform3(-700.0..700.0f64)) {
            let w = LossWeights::from_raw(&raw);
            for x in w.as_array() {
                prop_assert!(x > 0.0 && x.is_finite());
            }
        }
    }
}
