//! Brute-force reference implementations and toy problem generators.
//!
//! Everything here is written for clarity over speed and stays independent
//! of the production code paths it is used to check. The `selftest`
//! subcommand and the acceptance suite both lean on this module.

use crate::dataset::Label;
use crate::features::FeatureVector;
use crate::rng::RngStream;

/// Result of the projected-gradient dual solver.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alphas: Vec<f64>,
    pub objective: f64,
}

/// Maximizes the SVM dual
/// `W(a) = sum a - 1/2 a' Q a` with `Q_ij = y_i y_j K_ij`
/// over `0 <= a <= C`, `y' a = 0` by projected gradient ascent.
///
/// The projection onto the box-plus-hyperplane set is exact, via bisection
/// on the hyperplane multiplier. Step size comes from a Gershgorin bound on
/// the largest eigenvalue of `Q`.
pub fn projected_gradient_dual(
    kernel: &[Vec<f64>],
    y_signs: &[f64],
    c: f64,
    iterations: usize,
) -> DualSolution {
    let n = y_signs.len();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| y_signs[i] * y_signs[j] * kernel[i][j]).collect())
        .collect();
    let lipschitz = q
        .iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let step = 1.0 / lipschitz;

    let objective = |a: &[f64]| -> f64 {
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += a[i] * q[i][j] * a[j];
            }
        }
        a.iter().sum::<f64>() - 0.5 * quad
    };

    let project = |v: &[f64]| -> Vec<f64> {
        // Find lambda with sum_i y_i clip(v_i - lambda y_i, 0, C) = 0.
        let residual = |lambda: f64| -> f64 {
            v.iter()
                .zip(y_signs)
                .map(|(vi, yi)| yi * (vi - lambda * yi).clamp(0.0, c))
                .sum()
        };
        let bound = v.iter().fold(0.0f64, |m, vi| m.max(vi.abs())) + c + 1.0;
        let (mut lo, mut hi) = (-bound, bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let lambda = 0.5 * (lo + hi);
        v.iter()
            .zip(y_signs)
            .map(|(vi, yi)| (vi - lambda * yi).clamp(0.0, c))
            .collect()
    };

    let mut alphas = vec![0.0; n];
    let mut prev_obj = objective(&alphas);
    for _ in 0..iterations {
        let mut trial: Vec<f64> = alphas.clone();
        for i in 0..n {
            let grad_i = 1.0 - q[i].iter().zip(&alphas).map(|(qij, aj)| qij * aj).sum::<f64>();
            trial[i] += step * grad_i;
        }
        alphas = project(&trial);
        let obj = objective(&alphas);
        if (obj - prev_obj).abs() < 1e-13 {
            break;
        }
        prev_obj = obj;
    }
    DualSolution {
        objective: objective(&alphas),
        alphas,
    }
}

/// Tie-adjusted Mann-Whitney statistic: the probability a random positive
/// outscores a random negative, ties counted one half.
pub fn mann_whitney_auc(scores: &[f64], truth: &[Label], positive: Label) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|(_, t)| **t == positive)
        .map(|(s, _)| *s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|(_, t)| **t != positive)
        .map(|(s, _)| *s)
        .collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// PR-AUC by exhaustively recounting the confusion at every distinct score
/// threshold and accumulating the right-continuous step area.
pub fn pr_auc_sweep(scores: &[f64], truth: &[Label], positive: Label) -> f64 {
    let total_pos = truth.iter().filter(|t| **t == positive).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (s, label) in scores.iter().zip(truth) {
            if *s >= t {
                if *label == positive {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let precision = tp / (tp + fp);
        let recall = tp / total_pos;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

/// HOG recomputed from scratch: per block, per cell, per pixel, with no
/// shared cell grid. Mirrors the documented contract only.
pub fn hog_bruteforce(
    img: &crate::dataset::ImageRecord,
    cfg: &crate::features::HogConfig,
) -> Vec<f64> {
    assert!(img.is_grayscale());
    let (h, w) = (img.height, img.width);
    let cells_x = w / cfg.cell_size;
    let cells_y = h / cfg.cell_size;
    let blocks_y = (cells_y - cfg.block_size) / cfg.block_stride + 1;
    let blocks_x = (cells_x - cfg.block_size) / cfg.block_stride + 1;
    let range = if cfg.signed { 360.0 } else { 180.0 };
    let bin_width = range / cfg.n_bins as f64;
    let at = |y: usize, x: usize| f64::from(img.pixel(y, x, 0));

    let cell_histogram = |cy: usize, cx: usize| -> Vec<f64> {
        let mut hist = vec![0.0; cfg.n_bins];
        for y in cy * cfg.cell_size..(cy + 1) * cfg.cell_size {
            for x in cx * cfg.cell_size..(cx + 1) * cfg.cell_size {
                let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
                let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let mut ang = gy.atan2(gx).to_degrees();
                while ang < 0.0 {
                    ang += range;
                }
                while ang >= range {
                    ang -= range;
                }
                let t = ang / bin_width - 0.5;
                let b0 = t.floor();
                let frac = t - b0;
                let lo = (b0 as isize).rem_euclid(cfg.n_bins as isize) as usize;
                hist[lo] += mag * (1.0 - frac);
                hist[(lo + 1) % cfg.n_bins] += mag * frac;
            }
        }
        hist
    };

    let mut descriptor = Vec::new();
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let mut block = Vec::new();
            for cy in 0..cfg.block_size {
                for cx in 0..cfg.block_size {
                    block.extend(cell_histogram(
                        by * cfg.block_stride + cy,
                        bx * cfg.block_stride + cx,
                    ));
                }
            }
            let norm =
                (block.iter().map(|v| v * v).sum::<f64>() + 1e-6f64 * 1e-6).sqrt();
            descriptor.extend(block.iter().map(|v| v / norm));
        }
    }
    descriptor
}

/// Naive cross-correlation with zero padding, accumulating over
/// `(c, ky, kx)` in ascending order with the bias added last — the same
/// element-wise association order the production conv uses, so the two
/// agree bit-for-bit at 64 bits.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_naive(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    f: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * f * oh * ow);
    for s in 0..n {
        for ff in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for cc in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let v = if iy >= 0
                                    && iy < h as isize
                                    && ix >= 0
                                    && ix < w as isize
                                {
                                    x[((s * c + cc) * h + iy as usize) * w + ix as usize]
                                } else {
                                    0.0
                                };
                                acc += weight[((ff * c + cc) * kh + ky) * kw + kx] * v;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[ff];
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Compares analytic gradients already stored on `params` against central
/// finite differences of `forward`, returning the worst relative error
/// `|fd - grad| / max(1, |fd|, |grad|)`.
///
/// `forward` must be a pure replay of the loss (fresh tape each call,
/// identical random streams); parameters are perturbed through their
/// shared storage and restored afterwards.
pub fn finite_diff_max_rel_error(
    params: &[crate::tensor::Tensor<f64>],
    forward: &mut dyn FnMut() -> f64,
    h: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for p in params {
        let grad = p
            .grad()
            .expect("parameter has no gradient; run backward before the check");
        for i in 0..p.numel() {
            let v = p.get(i);
            p.set(i, v + h);
            let fp = forward();
            p.set(i, v - h);
            let fm = forward();
            p.set(i, v);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / 1.0f64.max(fd.abs()).max(grad[i].abs());
            worst = worst.max(err);
        }
    }
    worst
}

/// Two interleaving half-moons with Gaussian noise; the upper moon is FAKE.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> (Vec<FeatureVector>, Vec<Label>) {
    let mut rng = RngStream::derive(seed, "two-moons", 0, 0);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let half = n / 2;
    for i in 0..n {
        let t = std::f64::consts::PI * (i % half) as f64 / (half.max(1) as f64 - 1.0).max(1.0);
        let (px, py, label) = if i < half {
            (t.cos(), t.sin(), Label::Fake)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), Label::Real)
        };
        x.push(FeatureVector::new(vec![
            px + rng.normal(0.0, noise),
            py + rng.normal(0.0, noise),
        ]));
        y.push(label);
    }
    (x, y)
}

/// The four XOR corners: diagonal pair FAKE, anti-diagonal pair REAL.
pub fn xor_points() -> (Vec<FeatureVector>, Vec<Label>) {
    (
        vec![
            FeatureVector::new(vec![0.0, 0.0]),
            FeatureVector::new(vec![1.0, 1.0]),
            FeatureVector::new(vec![0.0, 1.0]),
            FeatureVector::new(vec![1.0, 0.0]),
        ],
        vec![Label::Fake, Label::Fake, Label::Real, Label::Real],
    )
}

/// Two Gaussian clouds with configurable separation, for randomized SVM
/// correctness instances.
pub fn gaussian_blobs(
    n_per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> (Vec<FeatureVector>, Vec<Label>) {
    let mut rng = RngStream::derive(seed, "blobs", 0, 0);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (label, sign) in [(Label::Fake, 1.0), (Label::Real, -1.0)] {
        for _ in 0..n_per_class {
            let row: Vec<f64> = (0..dim)
                .map(|d| rng.normal(if d == 0 { sign * separation / 2.0 } else { 0.0 }, 1.0))
                .collect();
            x.push(FeatureVector::new(row));
            y.push(label);
        }
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projected_gradient_solves_the_minimal_pair() {
        // Two points at +-1 on a line, RBF gamma = 1, C = 1.
        // K = [[1, e^-4], [e^-4, 1]]; by symmetry a1 = a2 = a*,
        // W = 2a - a^2 (1 - e^-4), maximized at a* = 1/(1 - e^-4) > 1,
        // so both alphas cap at C = 1.
        let k = vec![
            vec![1.0, (-4.0f64).exp()],
            vec![(-4.0f64).exp(), 1.0],
        ];
        let sol = projected_gradient_dual(&k, &[1.0, -1.0], 1.0, 50_000);
        assert!((sol.alphas[0] - 1.0).abs() < 1e-6, "{:?}", sol.alphas);
        assert!((sol.alphas[1] - 1.0).abs() < 1e-6);
        let expected_obj = 2.0 - (1.0 - (-4.0f64).exp());
        assert!((sol.objective - expected_obj).abs() < 1e-8);
    }

    #[test]
    fn projection_keeps_equality_and_box() {
        let k = vec![vec![1.0; 6]; 6];
        let y = [1.0, 1.0, 1.0, -1.0, -1.0, -1.0];
        let sol = projected_gradient_dual(&k, &y, 0.7, 2_000);
        let eq: f64 = sol.alphas.iter().zip(&y).map(|(a, s)| a * s).sum();
        assert!(eq.abs() < 1e-9);
        assert!(sol.alphas.iter().all(|&a| (-1e-12..=0.7 + 1e-12).contains(&a)));
    }

    #[test]
    fn mann_whitney_handles_perfect_inverted_and_tied() {
        let perfect = mann_whitney_auc(
            &[0.9, 0.8, 0.3, 0.1],
            &[Label::Fake, Label::Fake, Label::Real, Label::Real],
            Label::Fake,
        );
        assert_eq!(perfect, 1.0);
        let inverted = mann_whitney_auc(
            &[0.3, 0.8],
            &[Label::Fake, Label::Real],
            Label::Fake,
        );
        assert_eq!(inverted, 0.0);
        let tied = mann_whitney_auc(
            &[0.6, 0.4, 0.6, 0.2],
            &[Label::Fake, Label::Real, Label::Real, Label::Fake],
            Label::Fake,
        );
        assert_eq!(tied, 0.375);
    }

    #[test]
    fn pr_sweep_degenerate_cases() {
        let perfect = pr_auc_sweep(
            &[0.9, 0.8, 0.3, 0.1],
            &[Label::Fake, Label::Fake, Label::Real, Label::Real],
            Label::Fake,
        );
        assert_eq!(perfect, 1.0);
        // Constant scores collapse to a single threshold: area = positive rate.
        let constant = pr_auc_sweep(
            &[0.5, 0.5, 0.5, 0.5],
            &[Label::Fake, Label::Real, Label::Real, Label::Real],
            Label::Fake,
        );
        assert!((constant - 0.25).abs() < 1e-15);
    }

    #[test]
    fn toy_sets_have_expected_shape() {
        let (x, y) = two_moons(40, 0.1, 3);
        assert_eq!(x.len(), 40);
        assert_eq!(y.iter().filter(|l| **l == Label::Fake).count(), 20);
        let (xs, ys) = xor_points();
        assert_eq!(xs.len(), 4);
        assert_eq!(ys.iter().filter(|l| **l == Label::Fake).count(), 2);
    }
}
