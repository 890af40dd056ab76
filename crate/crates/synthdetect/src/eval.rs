//! Confusion matrices, classification reports, and ROC / precision-recall
//! analysis.
//!
//! FAKE is the positive class throughout (the detection target), and the
//! report header records that. Metrics are computed at full precision and
//! rendered at two decimals; the machine-readable dump carries the raw
//! values.

use std::fmt::Write as _;

use crate::dataset::Label;
use crate::error::{Error, Result};

pub mod reference;

/// 2x2 counts indexed by (actual, predicted).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub fake_fake: u64,
    pub fake_real: u64,
    pub real_fake: u64,
    pub real_real: u64,
}

impl ConfusionMatrix {
    pub fn from_counts(fake_fake: u64, fake_real: u64, real_fake: u64, real_real: u64) -> Self {
        ConfusionMatrix {
            fake_fake,
            fake_real,
            real_fake,
            real_real,
        }
    }

    pub fn total(&self) -> u64 {
        self.fake_fake + self.fake_real + self.real_fake + self.real_real
    }

    pub fn actual_fake(&self) -> u64 {
        self.fake_fake + self.fake_real
    }

    pub fn actual_real(&self) -> u64 {
        self.real_fake + self.real_real
    }

    /// `actual,predicted_fake,predicted_real` rows behind a header.
    pub fn to_csv(&self) -> String {
        format!(
            "actual,predicted_fake,predicted_real\nFAKE,{},{}\nREAL,{},{}\n",
            self.fake_fake, self.fake_real, self.real_fake, self.real_real
        )
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut fake: Option<(u64, u64)> = None;
        let mut real: Option<(u64, u64)> = None;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if ln == 0 || line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Format {
                    offset: ln as u64,
                    reason: format!("expected 3 comma-separated fields, got {}", parts.len()),
                });
            }
            let parse = |s: &str| -> Result<u64> {
                s.trim().parse().map_err(|_| Error::Format {
                    offset: ln as u64,
                    reason: format!("not a count: {s}"),
                })
            };
            let row = (parse(parts[1])?, parse(parts[2])?);
            match parts[0].trim() {
                "FAKE" => fake = Some(row),
                "REAL" => real = Some(row),
                other => {
                    return Err(Error::Format {
                        offset: ln as u64,
                        reason: format!("unknown class label {other}"),
                    })
                }
            }
        }
        match (fake, real) {
            (Some(f), Some(r)) => Ok(ConfusionMatrix::from_counts(f.0, f.1, r.0, r.1)),
            _ => Err(Error::Format {
                offset: 0,
                reason: "missing FAKE or REAL row".into(),
            }),
        }
    }
}

/// Exact counts per (actual, predicted) cell.
pub fn confusion(preds: &[Label], truth: &[Label]) -> Result<ConfusionMatrix> {
    if preds.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} truth labels",
            preds.len(),
            truth.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Argument("confusion over an empty batch".into()));
    }
    let mut cm = ConfusionMatrix::from_counts(0, 0, 0, 0);
    for (p, t) in preds.iter().zip(truth) {
        match (t, p) {
            (Label::Fake, Label::Fake) => cm.fake_fake += 1,
            (Label::Fake, Label::Real) => cm.fake_real += 1,
            (Label::Real, Label::Fake) => cm.real_fake += 1,
            (Label::Real, Label::Real) => cm.real_real += 1,
        }
    }
    Ok(cm)
}

/// Precision / recall / F1 for one class, with degenerate cases flagged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// True when precision was 0/0 (no predictions for the class).
    pub precision_undefined: bool,
    /// True when the class has no actual samples.
    pub recall_undefined: bool,
}

fn class_metrics(tp: u64, fp: u64, fn_: u64) -> ClassMetrics {
    let support = tp + fn_;
    let precision_undefined = tp + fp == 0;
    let recall_undefined = support == 0;
    let precision = if precision_undefined {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if recall_undefined {
        0.0
    } else {
        tp as f64 / support as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support,
        precision_undefined,
        recall_undefined,
    }
}

/// Score-free per-class metrics plus overall accuracy; AUCs are attached
/// separately when scores exist.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationReport {
    pub fake: ClassMetrics,
    pub real: ClassMetrics,
    pub accuracy: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
}

/// Derives the report from a confusion matrix.
pub fn classification_report(cm: &ConfusionMatrix) -> Result<ClassificationReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Argument("classification report of an empty matrix".into()));
    }
    Ok(ClassificationReport {
        fake: class_metrics(cm.fake_fake, cm.real_fake, cm.fake_real),
        real: class_metrics(cm.real_real, cm.fake_real, cm.real_fake),
        accuracy: (cm.fake_fake + cm.real_real) as f64 / total as f64,
        roc_auc: None,
        pr_auc: None,
    })
}

/// Ordered ROC points with their thresholds and trapezoidal area.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from (0, 0) to (1, 1), both coordinates non-decreasing.
    pub points: Vec<(f64, f64)>,
    /// Score cutoff producing each point; the origin carries +inf.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// Threshold sweep over distinct scores (descending, ties grouped), with
/// the area under the curve by the trapezoidal rule.
pub fn roc_auc(scores: &[f64], truth: &[Label], positive: Label) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    let pos_total = truth.iter().filter(|t| **t == positive).count() as f64;
    let neg_total = truth.len() as f64 - pos_total;
    if pos_total == 0.0 || neg_total == 0.0 {
        return Err(Error::UndefinedMetric(
            "ROC needs both classes in the truth labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < order.len() {
        let cutoff = scores[order[i]];
        // Consume the whole tie group at this threshold.
        while i < order.len() && scores[order[i]] == cutoff {
            if truth[order[i]] == positive {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push((fp / neg_total, tp / pos_total));
        thresholds.push(cutoff);
    }
    let mut auc = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(RocCurve {
        points,
        thresholds,
        auc,
    })
}

/// Precision-recall points at each distinct-score threshold (descending).
pub fn pr_curve(scores: &[f64], truth: &[Label], positive: Label) -> Result<(Vec<(f64, f64)>, f64)> {
    if scores.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    let pos_total = truth.iter().filter(|t| **t == positive).count() as f64;
    if pos_total == 0.0 {
        return Err(Error::UndefinedMetric(
            "PR-AUC needs at least one positive sample".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = Vec::new();
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < order.len() {
        let cutoff = scores[order[i]];
        while i < order.len() && scores[order[i]] == cutoff {
            if truth[order[i]] == positive {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let precision = tp / (tp + fp);
        let recall = tp / pos_total;
        // Right-continuous step rule.
        auc += (recall - prev_recall) * precision;
        prev_recall = recall;
        points.push((recall, precision));
    }
    Ok((points, auc))
}

/// Area under the precision-recall curve by the step-wise rule.
pub fn pr_auc(scores: &[f64], truth: &[Label], positive: Label) -> Result<f64> {
    pr_curve(scores, truth, positive).map(|(_, auc)| auc)
}

/// Attaches score-based AUCs to a matrix-derived report.
pub fn report_with_scores(
    cm: &ConfusionMatrix,
    scores: &[f64],
    truth: &[Label],
) -> Result<ClassificationReport> {
    let mut report = classification_report(cm)?;
    report.roc_auc = Some(roc_auc(scores, truth, Label::Fake)?.auc);
    report.pr_auc = Some(pr_auc(scores, truth, Label::Fake)?);
    Ok(report)
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Aligned text table, one row per named report, two-decimal rendering.
pub fn render_table(rows: &[(&str, &ClassificationReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} | {:^22} | {:^22} | {:^18}",
        "", "Fake", "Real", "Overall"
    );
    let _ = writeln!(
        out,
        "{:<12} | {:>6} {:>6} {:>8} | {:>6} {:>6} {:>8} | {:>8} {:>9}",
        "Model", "Prec", "Recall", "F1", "Prec", "Recall", "F1", "Accuracy", "ROC-AUC"
    );
    let width = 12 + 3 + 22 + 3 + 22 + 3 + 18;
    let _ = writeln!(out, "{}", "-".repeat(width));
    for (name, r) in rows {
        let roc = r.roc_auc.map(fmt2).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<12} | {:>6} {:>6} {:>8} | {:>6} {:>6} {:>8} | {:>8} {:>9}",
            name,
            fmt2(r.fake.precision),
            fmt2(r.fake.recall),
            fmt2(r.fake.f1),
            fmt2(r.real.precision),
            fmt2(r.real.recall),
            fmt2(r.real.f1),
            fmt2(r.accuracy),
            roc
        );
    }
    out.push_str("positive class: FAKE\n");
    out
}

/// Machine-readable `key=value` lines carrying the raw full-precision
/// values alongside the two-decimal renderings.
pub fn render_kv(report: &ClassificationReport) -> String {
    let mut out = String::new();
    out.push_str("positive_class=FAKE\n");
    for (cls, m) in [("fake", &report.fake), ("real", &report.real)] {
        let _ = writeln!(out, "{cls}.precision={}", m.precision);
        let _ = writeln!(out, "{cls}.recall={}", m.recall);
        let _ = writeln!(out, "{cls}.f1={}", m.f1);
        let _ = writeln!(out, "{cls}.support={}", m.support);
        if m.precision_undefined {
            let _ = writeln!(out, "{cls}.precision_undefined=true");
        }
        if m.recall_undefined {
            let _ = writeln!(out, "{cls}.recall_undefined=true");
        }
    }
    let _ = writeln!(out, "accuracy={}", report.accuracy);
    let _ = writeln!(out, "accuracy_pct={:.2}", report.accuracy * 100.0);
    if let Some(auc) = report.roc_auc {
        let _ = writeln!(out, "roc_auc={auc}");
    }
    if let Some(auc) = report.pr_auc {
        let _ = writeln!(out, "pr_auc={auc}");
    }
    out
}

/// Two-column comma-separated points for external plotting.
pub fn points_csv(header: (&str, &str), points: &[(f64, f64)]) -> String {
    let mut out = format!("{},{}\n", header.0, header.1);
    for (a, b) in points {
        let _ = writeln!(out, "{a},{b}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{mann_whitney_auc, pr_auc_sweep};
    use crate::rng::RngStream;

    const F: Label = Label::Fake;
    const R: Label = Label::Real;

    #[test]
    fn confusion_counts_exactly() {
        let preds = [F, R, F, R, F];
        let truth = [F, F, R, R, F];
        let cm = confusion(&preds, &truth).unwrap();
        assert_eq!(cm.fake_fake, 2);
        assert_eq!(cm.fake_real, 1);
        assert_eq!(cm.real_fake, 1);
        assert_eq!(cm.real_real, 1);
        assert_eq!(cm.total(), 5);
    }

    #[test]
    fn confusion_perfect_and_adversarial() {
        let truth = [F, R, F, R];
        let cm = confusion(&truth, &truth).unwrap();
        assert_eq!((cm.fake_real, cm.real_fake), (0, 0));
        let flipped: Vec<Label> = truth
            .iter()
            .map(|l| if *l == F { R } else { F })
            .collect();
        let cm = confusion(&flipped, &truth).unwrap();
        assert_eq!((cm.fake_fake, cm.real_real), (0, 0));
    }

    #[test]
    fn confusion_rejects_mismatch_and_empty() {
        assert!(confusion(&[F], &[F, R]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn svm_benchmark_matrix_reproduces_reported_metrics() {
        let cm = ConfusionMatrix::from_counts(8020, 1980, 1734, 8266);
        let r = classification_report(&cm).unwrap();
        assert!((r.accuracy - 0.8143).abs() < 1e-12);
        assert_eq!(fmt2(r.fake.precision), "0.82");
        assert_eq!(fmt2(r.fake.recall), "0.80");
        assert_eq!(fmt2(r.fake.f1), "0.81");
        assert_eq!(fmt2(r.real.precision), "0.81");
        assert_eq!(fmt2(r.real.recall), "0.83");
        assert_eq!(fmt2(r.real.f1), "0.82");
    }

    #[test]
    fn densenet_benchmark_matrix_reproduces_accuracy() {
        let cm = ConfusionMatrix::from_counts(9769, 231, 221, 9779);
        let r = classification_report(&cm).unwrap();
        assert!((r.accuracy - 0.9774).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matrix_scores_ones() {
        let cm = ConfusionMatrix::from_counts(10, 0, 0, 20);
        let r = classification_report(&cm).unwrap();
        for m in [r.fake, r.real] {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn zero_over_zero_precision_is_flagged_zero() {
        // Everything predicted REAL: fake precision is 0/0.
        let cm = ConfusionMatrix::from_counts(0, 10, 0, 10);
        let r = classification_report(&cm).unwrap();
        assert_eq!(r.fake.precision, 0.0);
        assert!(r.fake.precision_undefined);
        assert!(!r.real.precision_undefined);
    }

    #[test]
    fn roc_perfect_inverted_and_tied() {
        let curve = roc_auc(&[0.9, 0.8, 0.3, 0.1], &[F, F, R, R], F).unwrap();
        assert_eq!(curve.auc, 1.0);
        assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));

        let curve = roc_auc(&[0.3, 0.8], &[F, R], F).unwrap();
        assert_eq!(curve.auc, 0.0);

        let curve = roc_auc(&[0.6, 0.4, 0.6, 0.2], &[F, R, R, F], F).unwrap();
        assert!((curve.auc - 0.375).abs() < 1e-15);
    }

    #[test]
    fn roc_matches_mann_whitney_on_random_instances() {
        let mut rng = RngStream::derive(1, "roc", 0, 0);
        for trial in 0..200 {
            let n = 2 + (rng.below(48) as usize);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.below(12) as f64) * 0.125 + rng.normal(0.0, 0.01))
                .collect();
            let truth: Vec<Label> = (0..n)
                .map(|i| if i == 0 || rng.bernoulli(0.5) { F } else { R })
                .collect();
            if truth.iter().all(|t| *t == F) || truth.iter().all(|t| *t == R) {
                continue;
            }
            let got = roc_auc(&scores, &truth, F).unwrap().auc;
            let want = mann_whitney_auc(&scores, &truth, F);
            assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn roc_is_invariant_under_monotone_transforms() {
        let mut rng = RngStream::derive(2, "roc", 0, 0);
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 2.0)).collect();
        let truth: Vec<Label> = (0..n)
            .map(|i| if i % 3 == 0 { F } else { R })
            .collect();
        let base = roc_auc(&scores, &truth, F).unwrap().auc;
        for trial in 0..20 {
            let a = rng.uniform_in(0.1, 5.0);
            let b = rng.normal(0.0, 3.0);
            let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
            let got = roc_auc(&mapped, &truth, F).unwrap().auc;
            assert!((got - base).abs() < 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn roc_requires_both_classes() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[F, F], F),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn roc_curve_coordinates_are_monotone() {
        let mut rng = RngStream::derive(3, "roc", 0, 0);
        let n = 60;
        let scores: Vec<f64> = (0..n).map(|_| rng.below(8) as f64).collect();
        let truth: Vec<Label> = (0..n)
            .map(|i| if i % 2 == 0 { F } else { R })
            .collect();
        let curve = roc_auc(&scores, &truth, F).unwrap();
        for pair in curve.points.windows(2) {
            assert!(pair[1].0 >= pair[0].0 && pair[1].1 >= pair[0].1);
        }
        assert_eq!(curve.points.len(), curve.thresholds.len());
    }

    #[test]
    fn pr_degenerate_and_oracle_cases() {
        assert_eq!(pr_auc(&[0.9, 0.8, 0.3, 0.1], &[F, F, R, R], F).unwrap(), 1.0);
        // Constant scores: area equals the positive fraction.
        let auc = pr_auc(&[0.4; 8], &[F, F, R, R, R, R, R, R], F).unwrap();
        assert!((auc - 0.25).abs() < 1e-15);
        // Mixed 6-sample ranking against the brute-force sweep.
        let scores = [0.9, 0.7, 0.7, 0.4, 0.3, 0.1];
        let truth = [F, R, F, F, R, R];
        let got = pr_auc(&scores, &truth, F).unwrap();
        let want = pr_auc_sweep(&scores, &truth, F);
        assert!((got - want).abs() < 1e-12);
        assert!(matches!(
            pr_auc(&[0.5, 0.6], &[R, R], F),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn table_rendering_rounds_to_two_decimals() {
        let cm = ConfusionMatrix::from_counts(8020, 1980, 1734, 8266);
        let mut report = classification_report(&cm).unwrap();
        report.roc_auc = Some(0.8958);
        let table = render_table(&[("SVM", &report)]);
        assert!(table.contains("SVM"));
        assert!(table.contains("0.82"));
        assert!(table.contains("0.90"));
        assert!(table.contains("positive class: FAKE"));
        let kv = render_kv(&report);
        assert!(kv.contains("accuracy_pct=81.43"));
        assert!(kv.contains("roc_auc=0.8958"));
    }

    #[test]
    fn confusion_csv_roundtrips() {
        let cm = ConfusionMatrix::from_counts(10, 2, 3, 40);
        let parsed = ConfusionMatrix::parse_csv(&cm.to_csv()).unwrap();
        assert_eq!(parsed, cm);
        assert!(ConfusionMatrix::parse_csv("actual,a,b\nFAKE,1\n").is_err());
    }
}
