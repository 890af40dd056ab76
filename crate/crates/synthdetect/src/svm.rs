//! Soft-margin RBF-kernel SVM trained by sequential minimal optimization.
//!
//! The solver is the simplified Platt variant: it sweeps the training set
//! for KKT violations at tolerance `tol` and pairs each violating index
//! with a random partner from a seeded stream. Convergence is declared by
//! a sweep that finds no violations; exhausting `max_passes` sweeps first
//! returns the best iterate flagged as non-converged.

use rayon::prelude::*;

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::rng::RngStream;

/// RBF width: fixed, or the `scale` heuristic `1 / (dim * var(X))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gamma {
    Scale,
    Fixed(f64),
}

/// Solver configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    /// Slack penalty; larger C punishes margin violations harder.
    pub c: f64,
    pub gamma: Gamma,
    /// KKT tolerance.
    pub tol: f64,
    /// Total sweep limit before giving up.
    pub max_passes: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            gamma: Gamma::Scale,
            tol: 1e-3,
            max_passes: 500,
            seed: 0,
        }
    }
}

impl SvmConfig {
    fn validate(&self) -> Result<()> {
        if self.c <= 0.0 {
            return Err(Error::Argument(format!("C must be positive, got {}", self.c)));
        }
        if let Gamma::Fixed(g) = self.gamma {
            if g <= 0.0 {
                return Err(Error::Argument(format!("gamma must be positive, got {g}")));
            }
        }
        if self.tol <= 0.0 {
            return Err(Error::Argument(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Trained classifier: support vectors with their signed dual weights.
#[derive(Debug, Clone)]
pub struct SvmModel {
    pub support_vectors: Vec<FeatureVector>,
    /// `alpha_i * y_i` per support vector.
    pub dual_coefs: Vec<f64>,
    /// Training-set index of each support vector.
    pub support_indices: Vec<usize>,
    pub bias: f64,
    pub gamma: f64,
    /// False when `max_passes` ran out before a violation-free sweep.
    pub converged: bool,
}

/// `exp(-gamma * ||x - y||^2)`.
pub fn rbf_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Argument(format!(
            "kernel operands have dims {} and {}",
            x.len(),
            y.len()
        )));
    }
    if gamma <= 0.0 {
        return Err(Error::Argument(format!("gamma must be positive, got {gamma}")));
    }
    Ok((-gamma * sq_dist(x, y)).exp())
}

#[inline]
fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .sum()
}

/// The `scale` heuristic: `1 / (dim * var)` over all entries of `x`.
pub fn gamma_scale(x: &[FeatureVector]) -> f64 {
    let dim = x.first().map(|r| r.dim()).unwrap_or(0);
    let total = (x.len() * dim) as f64;
    if total == 0.0 {
        return 1.0;
    }
    let mean = x.iter().flat_map(|r| &r.values).sum::<f64>() / total;
    let var = x
        .iter()
        .flat_map(|r| &r.values)
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / total;
    if var <= 0.0 || dim == 0 {
        1.0
    } else {
        1.0 / (dim as f64 * var)
    }
}

/// Full kernel matrices above this size are recomputed row-by-row instead.
const KERNEL_CACHE_LIMIT: usize = 6000;

enum KernelSource<'a> {
    Full(Vec<f64>),
    Rows {
        x: &'a [FeatureVector],
        gamma: f64,
    },
}

impl KernelSource<'_> {
    fn row(&self, i: usize, n: usize, out: &mut Vec<f64>) {
        match self {
            KernelSource::Full(k) => {
                out.clear();
                out.extend_from_slice(&k[i * n..(i + 1) * n]);
            }
            KernelSource::Rows { x, gamma } => {
                out.clear();
                out.resize(n, 0.0);
                let xi = &x[i].values;
                let g = *gamma;
                out.par_iter_mut()
                    .zip(x.par_iter())
                    .for_each(|(slot, xk)| *slot = (-g * sq_dist(xi, &xk.values)).exp());
            }
        }
    }
}

/// Trains the SVM by simplified-Platt SMO. Deterministic given the seed.
pub fn smo_train(x: &[FeatureVector], y: &[Label], cfg: &SvmConfig) -> Result<SvmModel> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::Argument(format!(
            "{} rows but {} labels",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    let n_fake = y.iter().filter(|l| **l == Label::Fake).count();
    if n_fake == 0 || n_fake == n {
        return Err(Error::Training(
            "training set must contain both classes".into(),
        ));
    }
    let dim = x[0].dim();
    if x.iter().any(|r| r.dim() != dim) {
        return Err(Error::Argument("feature rows have mixed dims".into()));
    }
    if x.iter().any(|r| r.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::Argument("feature rows contain non-finite values".into()));
    }

    let gamma = match cfg.gamma {
        Gamma::Fixed(g) => g,
        Gamma::Scale => gamma_scale(x),
    };
    let signs: Vec<f64> = y.iter().map(|l| l.sign()).collect();
    let c = cfg.c;

    let kernel = if n <= KERNEL_CACHE_LIMIT {
        let mut k = vec![0.0; n * n];
        k.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            let xi = &x[i].values;
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = (-gamma * sq_dist(xi, &x[j].values)).exp();
            }
        });
        KernelSource::Full(k)
    } else {
        KernelSource::Rows { x, gamma }
    };

    let mut alpha = vec![0.0f64; n];
    let mut bias = 0.0f64;
    // Error cache: E_k = f(x_k) - y_k; starts at -y with alpha = 0, b = 0.
    let mut errors: Vec<f64> = signs.iter().map(|s| -s).collect();
    let mut rng = RngStream::derive(cfg.seed, "smo", 0, 0);
    let mut row_i = Vec::new();
    let mut row_j = Vec::new();
    let mut converged = false;

    for _sweep in 0..cfg.max_passes {
        let mut violations = 0usize;
        for i in 0..n {
            let r_i = signs[i] * errors[i];
            let violates =
                (r_i < -cfg.tol && alpha[i] < c) || (r_i > cfg.tol && alpha[i] > 0.0);
            if !violates {
                continue;
            }
            violations += 1;

            let j = {
                let mut j = rng.below(n as u64 - 1) as usize;
                if j >= i {
                    j += 1;
                }
                j
            };

            let (l, h) = if signs[i] != signs[j] {
                ((alpha[j] - alpha[i]).max(0.0), (c + alpha[j] - alpha[i]).min(c))
            } else {
                ((alpha[i] + alpha[j] - c).max(0.0), (alpha[i] + alpha[j]).min(c))
            };
            if l >= h {
                continue;
            }

            kernel.row(i, n, &mut row_i);
            kernel.row(j, n, &mut row_j);
            let eta = 2.0 * row_i[j] - row_i[i] - row_j[j];
            if eta >= 0.0 {
                continue;
            }

            let alpha_j_old = alpha[j];
            let alpha_i_old = alpha[i];
            let mut alpha_j = alpha_j_old - signs[j] * (errors[i] - errors[j]) / eta;
            alpha_j = alpha_j.clamp(l, h);
            if (alpha_j - alpha_j_old).abs() < 1e-8 {
                continue;
            }
            let alpha_i = alpha_i_old + signs[i] * signs[j] * (alpha_j_old - alpha_j);

            let d_i = alpha_i - alpha_i_old;
            let d_j = alpha_j - alpha_j_old;
            let b1 = bias - errors[i] - signs[i] * d_i * row_i[i] - signs[j] * d_j * row_i[j];
            let b2 = bias - errors[j] - signs[i] * d_i * row_i[j] - signs[j] * d_j * row_j[j];
            let new_bias = if alpha_i > 0.0 && alpha_i < c {
                b1
            } else if alpha_j > 0.0 && alpha_j < c {
                b2
            } else {
                0.5 * (b1 + b2)
            };
            let d_b = new_bias - bias;

            alpha[i] = alpha_i;
            alpha[j] = alpha_j;
            bias = new_bias;

            let (si, sj) = (signs[i], signs[j]);
            errors
                .par_iter_mut()
                .enumerate()
                .for_each(|(k, e)| *e += si * d_i * row_i[k] + sj * d_j * row_j[k] + d_b);
        }
        if violations == 0 {
            converged = true;
            break;
        }
    }

    let mut support_vectors = Vec::new();
    let mut dual_coefs = Vec::new();
    let mut support_indices = Vec::new();
    for i in 0..n {
        if alpha[i] > 1e-12 {
            support_vectors.push(x[i].clone());
            dual_coefs.push(alpha[i] * signs[i]);
            support_indices.push(i);
        }
    }
    Ok(SvmModel {
        support_vectors,
        dual_coefs,
        support_indices,
        bias,
        gamma,
        converged,
    })
}

/// `sum_i dual_coefs_i * K(sv_i, x) + b`.
pub fn decision_score(model: &SvmModel, x: &FeatureVector) -> Result<f64> {
    if let Some(sv) = model.support_vectors.first() {
        if sv.dim() != x.dim() {
            return Err(Error::Argument(format!(
                "input dim {} does not match support-vector dim {}",
                x.dim(),
                sv.dim()
            )));
        }
    }
    let mut score = model.bias;
    for (sv, coef) in model.support_vectors.iter().zip(&model.dual_coefs) {
        score += coef * (-model.gamma * sq_dist(&sv.values, &x.values)).exp();
    }
    Ok(score)
}

/// Scores a batch in parallel; order matches the input.
pub fn decision_scores(model: &SvmModel, xs: &[FeatureVector]) -> Result<Vec<f64>> {
    xs.par_iter().map(|x| decision_score(model, x)).collect()
}

/// Sign rule with the tie at exactly zero going to FAKE (+1).
pub fn predict(model: &SvmModel, x: &FeatureVector) -> Result<Label> {
    Ok(label_from_score(decision_score(model, x)?))
}

/// Maps a decision score to a label: `score >= 0` is FAKE.
pub fn label_from_score(score: f64) -> Label {
    if score >= 0.0 {
        Label::Fake
    } else {
        Label::Real
    }
}

impl SvmModel {
    /// Dual objective `sum alpha - 1/2 sum_ij (a_i y_i)(a_j y_j) K_ij`,
    /// computable from the stored support vectors alone since zero duals
    /// contribute nothing.
    pub fn dual_objective(&self) -> f64 {
        let sum_alpha: f64 = self.dual_coefs.iter().map(|d| d.abs()).sum();
        let mut quad = 0.0;
        for (i, svi) in self.support_vectors.iter().enumerate() {
            for (j, svj) in self.support_vectors.iter().enumerate() {
                quad += self.dual_coefs[i]
                    * self.dual_coefs[j]
                    * (-self.gamma * sq_dist(&svi.values, &svj.values)).exp();
            }
        }
        sum_alpha - 0.5 * quad
    }

    /// Largest KKT residual over a training set, for convergence checks.
    pub fn max_kkt_violation(&self, x: &[FeatureVector], y: &[Label], c: f64) -> f64 {
        let mut alphas = vec![0.0; x.len()];
        for (idx, coef) in self.support_indices.iter().zip(&self.dual_coefs) {
            alphas[*idx] = coef.abs();
        }
        let mut worst = 0.0f64;
        for i in 0..x.len() {
            let margin = y[i].sign() * decision_score(self, &x[i]).expect("dims checked");
            let a = alphas[i];
            let gap = if a <= 1e-12 {
                (1.0 - margin).max(0.0) // need margin >= 1
            } else if a >= c - 1e-12 {
                (margin - 1.0).max(0.0) // need margin <= 1
            } else {
                (margin - 1.0).abs() // free vector sits on the margin
            };
            worst = worst.max(gap);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(values: &[f64]) -> FeatureVector {
        FeatureVector::new(values.to_vec())
    }

    #[test]
    fn rbf_kernel_of_identical_points_is_one() {
        let x = fv(&[0.3, -1.2, 4.0]);
        assert_eq!(rbf_kernel(&x.values, &x.values, 0.7).unwrap(), 1.0);
    }

    #[test]
    fn rbf_kernel_matches_hand_value() {
        let v = rbf_kernel(&[0.0, 0.0], &[1.0, 1.0], 0.5).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-12);
        assert!((v - 0.367_879_441).abs() < 1e-6);
    }

    #[test]
    fn rbf_kernel_decays_monotonically_with_distance() {
        let origin = [0.0, 0.0];
        let mut prev = 1.0;
        for d in 1..20 {
            let v = rbf_kernel(&origin, &[d as f64, 0.0], 0.3).unwrap();
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn rbf_kernel_rejects_dim_mismatch() {
        assert!(rbf_kernel(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn minimal_pair_trains_to_symmetric_support() {
        let x = vec![fv(&[1.0, 0.0]), fv(&[-1.0, 0.0])];
        let y = vec![Label::Fake, Label::Real];
        let cfg = SvmConfig {
            gamma: Gamma::Fixed(1.0),
            ..SvmConfig::default()
        };
        let model = smo_train(&x, &y, &cfg).unwrap();
        assert!(model.converged);
        assert_eq!(model.support_vectors.len(), 2);
        // Both training points classified correctly.
        assert_eq!(predict(&model, &x[0]).unwrap(), Label::Fake);
        assert_eq!(predict(&model, &x[1]).unwrap(), Label::Real);
        // The midpoint lies on the boundary.
        let mid = decision_score(&model, &fv(&[0.0, 0.0])).unwrap();
        assert!(mid.abs() < 1e-9, "midpoint score {mid}");
        // Equality constraint holds.
        assert!(model.dual_coefs.iter().sum::<f64>().abs() < 1e-6);
    }

    #[test]
    fn xor_is_separable_with_rbf() {
        let x = vec![
            fv(&[0.0, 0.0]),
            fv(&[1.0, 1.0]),
            fv(&[0.0, 1.0]),
            fv(&[1.0, 0.0]),
        ];
        let y = vec![Label::Fake, Label::Fake, Label::Real, Label::Real];
        let cfg = SvmConfig {
            c: 10.0,
            gamma: Gamma::Fixed(1.0),
            ..SvmConfig::default()
        };
        let model = smo_train(&x, &y, &cfg).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert_eq!(predict(&model, xi).unwrap(), *yi);
        }
    }

    #[test]
    fn single_class_input_is_a_training_error() {
        let x = vec![fv(&[0.0]), fv(&[1.0])];
        let y = vec![Label::Fake, Label::Fake];
        assert!(matches!(
            smo_train(&x, &y, &SvmConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let mut rng = RngStream::derive(5, "test-data", 0, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..30 {
            let label = if i % 2 == 0 { Label::Fake } else { Label::Real };
            let center = label.sign();
            x.push(fv(&[
                rng.normal(center, 0.6),
                rng.normal(-center, 0.6),
            ]));
            y.push(label);
        }
        let cfg = SvmConfig {
            gamma: Gamma::Fixed(0.8),
            seed: 42,
            ..SvmConfig::default()
        };
        let a = smo_train(&x, &y, &cfg).unwrap();
        let b = smo_train(&x, &y, &cfg).unwrap();
        assert_eq!(a.dual_coefs, b.dual_coefs);
        assert_eq!(a.bias, b.bias);
        assert_eq!(a.support_indices, b.support_indices);
    }

    #[test]
    fn decision_score_honors_bias_and_self_kernel() {
        let sv = fv(&[0.25, -3.0]);
        let model = SvmModel {
            support_vectors: vec![sv.clone()],
            dual_coefs: vec![1.0],
            support_indices: vec![0],
            bias: 0.0,
            gamma: 2.0,
            converged: true,
        };
        assert!((decision_score(&model, &sv).unwrap() - 1.0).abs() < 1e-15);
        let shifted = SvmModel {
            bias: -0.5,
            ..model
        };
        assert!((decision_score(&shifted, &sv).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_tie_breaks_to_fake() {
        assert_eq!(label_from_score(0.0), Label::Fake);
        assert_eq!(label_from_score(1.0), Label::Fake);
        assert_eq!(label_from_score(-0.3), Label::Real);
    }

    #[test]
    fn decision_score_matches_bruteforce_summation() {
        let mut rng = RngStream::derive(9, "test-data", 0, 0);
        let dim = 5;
        let svs: Vec<FeatureVector> = (0..8)
            .map(|_| fv(&(0..dim).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>()))
            .collect();
        let coefs: Vec<f64> = (0..8).map(|_| rng.normal(0.0, 1.0)).collect();
        let model = SvmModel {
            support_vectors: svs.clone(),
            dual_coefs: coefs.clone(),
            support_indices: (0..8).collect(),
            bias: 0.77,
            gamma: 0.9,
            converged: true,
        };
        let probe = fv(&(0..dim).map(|_| rng.normal(0.0, 1.0)).collect::<Vec<_>>());
        let got = decision_score(&model, &probe).unwrap();
        let mut want = 0.77;
        for (sv, c) in svs.iter().zip(&coefs) {
            let d2: f64 = sv
                .values
                .iter()
                .zip(&probe.values)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            want += c * (-0.9 * d2).exp();
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn doubling_c_does_not_reduce_separable_train_accuracy() {
        let mut rng = RngStream::derive(31, "test-data", 0, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..40 {
            let label = if i < 20 { Label::Fake } else { Label::Real };
            x.push(fv(&[
                rng.normal(2.5 * label.sign(), 0.4),
                rng.normal(0.0, 0.4),
            ]));
            y.push(label);
        }
        let acc = |c: f64| {
            let cfg = SvmConfig {
                c,
                gamma: Gamma::Fixed(0.5),
                ..SvmConfig::default()
            };
            let model = smo_train(&x, &y, &cfg).unwrap();
            let hits = x
                .iter()
                .zip(&y)
                .filter(|(xi, yi)| predict(&model, xi).unwrap() == **yi)
                .count();
            hits as f64 / x.len() as f64
        };
        let a1 = acc(1.0);
        let a2 = acc(2.0);
        assert_eq!(a1, 1.0);
        assert!(a2 >= a1);
    }
}
