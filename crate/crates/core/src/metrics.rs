//! Evaluation metrics: saliency-threshold recall/precision, F1, macro
//! classification scores and Welch's two-sample t-test.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Saliency threshold a ground-truth point must strictly exceed to count as a hit.
pub const SALIENCY_THRESHOLD: f64 = 0.7;

/// A predicted saliency map with the recorded gaze point.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyFrame {
    height: usize,
    width: usize,
    map: Vec<f64>,
    gt: (usize, usize),
}

impl SaliencyFrame {
    pub fn new(height: usize, width: usize, map: Vec<f64>, gt: (usize, usize)) -> Result<Self> {
        check_len("saliency map", map.len(), height * width)?;
        if map.is_empty() {
            return Err(Error::contract("saliency map must be non-empty"));
        }
        if gt.0 >= height || gt.1 >= width {
            return Err(Error::contract(format!(
                "gaze point {gt:?} outside {height}x{width} grid"
            )));
        }
        if map.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("saliency values must lie in [0, 1]"));
        }
        Ok(Self { height, width, map, gt })
    }

    pub fn value_at_gt(&self) -> f64 {
        self.map[self.gt.0 * self.width + self.gt.1]
    }

    fn area_above(&self, threshold: f64) -> f64 {
        self.map.iter().filter(|&&v| v > threshold).count() as f64 / (self.height * self.width) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Percentages in [0, 100].
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub n_frames: usize,
    pub n_hit: usize,
}

pub fn frame_hit(frame: &SaliencyFrame, threshold: f64) -> bool {
    frame.value_at_gt() > threshold
}

/// Recall is the share of frames whose gaze point is covered; precision is the
/// mean, over covered frames, of the share of the grid left uncovered.
pub fn saliency_recall_precision(frames: &[SaliencyFrame], threshold: f64) -> Result<MetricSummary> {
    if frames.is_empty() {
        return Err(Error::contract("no frames to evaluate"));
    }
    let hits: Vec<&SaliencyFrame> = frames.iter().filter(|f| frame_hit(f, threshold)).collect();
    let recall = 100.0 * hits.len() as f64 / frames.len() as f64;
    let precision = if hits.is_empty() {
        0.0
    } else {
        100.0 * hits.iter().map(|f| 1.0 - f.area_above(threshold)).sum::<f64>() / hits.len() as f64
    };
    Ok(MetricSummary {
        recall,
        precision,
        f1: f1_score(recall, precision),
        n_frames: frames.len(),
        n_hit: hits.len(),
    })
}

/// Harmonic mean; zero when both inputs are zero.
pub fn f1_score(recall: f64, precision: f64) -> f64 {
    if recall + precision <= 0.0 {
        return 0.0;
    }
    2.0 * precision * recall / (precision + recall)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Classes with no true samples; they count as zero in the macro averages.
    pub absent_classes: Vec<usize>,
}

pub fn classification_metrics(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<ClassificationMetrics> {
    check_len("classification_metrics", predictions.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::contract("classification_metrics on empty input"));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::contract(format!(
                "class index out of range for {n_classes} classes"
            )));
        }
        confusion[y][p] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let mut absent_classes = Vec::new();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..n_classes {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = (0..n_classes).map(|y| confusion[y][c]).sum();
        if actual == 0 {
            absent_classes.push(c);
        }
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        sp += precision;
        sr += recall;
        sf += f1_score(recall, precision);
    }
    let k = n_classes as f64;
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / labels.len() as f64,
        macro_precision: sp / k,
        macro_recall: sr / k,
        macro_f1: sf / k,
        absent_classes,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract("t-test needs at least two values per sample"));
    }
    Ok(())
}

fn finish_t(diff: f64, se: f64, df: f64) -> TTest {
    if se == 0.0 {
        return if diff == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest {
                t: diff.signum() * f64::INFINITY,
                df,
                p: 0.0,
            }
        };
    }
    let t = diff / se;
    TTest {
        t,
        df,
        p: student_t_two_sided_p(t, df),
    }
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_samples(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (qa, qb) = (variance(a) / na, variance(b) / nb);
    let se2 = qa + qb;
    let df = if se2 == 0.0 {
        na + nb - 2.0
    } else {
        se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0))
    };
    Ok(finish_t(mean(a) - mean(b), se2.sqrt(), df))
}

/// Classic pooled-variance two-sample t-test.
pub fn pooled_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    check_samples(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let df = na + nb - 2.0;
    let pooled = ((na - 1.0) * variance(a) + (nb - 1.0) * variance(b)) / df;
    let se = (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    Ok(finish_t(mean(a) - mean(b), se, df))
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Student's t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Lanczos approximation (g = 7, n = 9) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` by the modified Lentz continued fraction, using the symmetry
/// `I_x(a, b) = 1 − I_{1−x}(b, a)` where the fraction converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_fraction(1.0 - x, b, a) / b
    }
}

fn beta_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, above: usize, gt_value: f64) -> SaliencyFrame {
        let mut map = vec![0.0; h * w];
        for v in map.iter_mut().take(above) {
            *v = 0.9;
        }
        map[0] = gt_value;
        SaliencyFrame::new(h, w, map, (0, 0)).unwrap()
    }

    #[test]
    fn hit_is_strict() {
        assert!(frame_hit(&grid(3, 3, 1, 0.8), 0.7));
        assert!(!frame_hit(&grid(3, 3, 1, 0.7), 0.7));
        assert!(!frame_hit(&grid(3, 3, 0, 0.0), 0.7));
        assert!(SaliencyFrame::new(2, 2, vec![0.0; 4], (2, 0)).is_err());
        assert!(SaliencyFrame::new(2, 2, vec![1.5; 4], (0, 0)).is_err());
    }

    #[test]
    fn recall_precision_examples() {
        let frames = vec![grid(10, 10, 1, 0.9), grid(10, 10, 1, 0.9)];
        let s = saliency_recall_precision(&frames, 0.7).unwrap();
        assert_eq!(s.recall, 100.0);
        assert!((s.precision - 99.0).abs() < 1e-12);

        let none = vec![grid(4, 4, 0, 0.1); 3];
        let s = saliency_recall_precision(&none, 0.7).unwrap();
        assert_eq!((s.recall, s.precision, s.f1), (0.0, 0.0, 0.0));

        let mixed = vec![grid(4, 4, 8, 0.9), grid(4, 4, 0, 0.2)];
        let s = saliency_recall_precision(&mixed, 0.7).unwrap();
        assert_eq!((s.recall, s.precision, s.n_hit), (50.0, 50.0, 1));
        assert!(saliency_recall_precision(&[], 0.7).is_err());
    }

    #[test]
    fn f1_examples() {
        assert!((f1_score(55.85, 31.74) - 40.48).abs() <= 0.01);
        assert!((f1_score(37.10, 25.07) - 29.92).abs() <= 0.01);
        assert!((f1_score(42.0, 42.0) - 42.0).abs() < 1e-12);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        assert_eq!(f1_score(12.5, 80.0), f1_score(80.0, 12.5));
    }

    #[test]
    fn classification_examples() {
        let m = classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(
            (m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1),
            (1.0, 1.0, 1.0, 1.0)
        );

        let m = classification_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.macro_recall, 0.5);

        // confusion rows (truth) [[2,0,0],[1,1,0],[0,0,2]]
        let labels = [0, 0, 1, 1, 2, 2];
        let preds = [0, 0, 0, 1, 2, 2];
        let m = classification_metrics(&preds, &labels, 3).unwrap();
        assert!((m.macro_recall - (1.0 + 0.5 + 1.0) / 3.0).abs() < 1e-15);

        let m = classification_metrics(&[0, 0], &[0, 0], 2).unwrap();
        assert_eq!(m.absent_classes, vec![1]);
        assert!(classification_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn identical_samples_have_no_difference() {
        let a = [1.0, 2.0, 3.5, 4.0];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
        let flat = welch_t_test(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!((flat.t, flat.p), (0.0, 1.0));
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn welch_matches_pooled_for_equal_variances() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [3.0, 4.0, 5.0, 6.0];
        let w = welch_t_test(&a, &b).unwrap();
        let p = pooled_t_test(&a, &b).unwrap();
        assert!((w.t - p.t).abs() < 1e-10);
        assert!((w.df - 6.0).abs() < 1e-12);
    }

    #[test]
    fn t_cdf_reference_points() {
        // df = 1 is Cauchy: F(t) = 1/2 + atan(t)/π.
        for t in [-3.0, -0.5, 0.0, 0.7, 4.0] {
            let cauchy = 0.5 + f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0) - cauchy).abs() < 1e-12);
        }
        // df = 2: F(t) = 1/2 + t / (2 √(2 + t²)).
        for t in [-2.0, 0.3, 5.0] {
            let closed = 0.5 + t / (2.0 * f64::sqrt(2.0 + t * t));
            assert!((student_t_cdf(t, 2.0) - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn ln_gamma_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }
}
