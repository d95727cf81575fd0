//! Affect metrics (RMSE, Pearson correlation, CCC, ICC), class-balance weights,
//! fold reports and the differentiable training objectives built from them.
//!
//! All moments are population moments: variances divide by `n`.

mod loss;

pub use loss::{adversarial_losses, affect_loss, quadrant_cross_entropy, AdversarialForm};

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("{0} is undefined for zero-variance input")]
    Degenerate(&'static str),
    #[error("value {0} outside [{1}, {2}]")]
    OutOfRange(f64, f64, f64),
    #[error("quadrant index {0} out of range")]
    BadQuadrant(usize),
    #[error("cannot aggregate reports of different models: {0:?} vs {1:?}")]
    ModelMismatch(String, String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Valence/arousal pair. Ground truth lies in `[-1, 1]`; predictions use the
/// same type without clamping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct AffectLabel {
    pub valence: f64,
    pub arousal: f64,
}

impl AffectLabel {
    pub fn new(valence: f64, arousal: f64) -> Self {
        Self { valence, arousal }
    }

    /// `0` for valence, `1` for arousal.
    pub fn get(&self, dim: usize) -> f64 {
        if dim == 0 {
            self.valence
        } else {
            self.arousal
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.valence, self.arousal]
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }
}

struct Moments<T> {
    mean_a: T,
    mean_b: T,
    var_a: T,
    var_b: T,
    cov: T,
}

fn moments<T: Scalar>(a: &[T], b: &[T]) -> Result<Moments<T>, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = T::of(a.len() as f64);
    let mean_a = a.iter().copied().sum::<T>() / n;
    let mean_b = b.iter().copied().sum::<T>() / n;
    let (mut var_a, mut var_b, mut cov) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        var_a += dx * dx;
        var_b += dy * dy;
        cov += dx * dy;
    }
    Ok(Moments {
        mean_a,
        mean_b,
        var_a: var_a / n,
        var_b: var_b / n,
        cov: cov / n,
    })
}

pub fn rmse<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let sq: T = pred.iter().zip(truth).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok((sq / T::of(pred.len() as f64)).sqrt())
}

/// Pearson correlation `cov / (σ̂ σ)`.
pub fn pearson_cor<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T, MetricError> {
    let m = moments(pred, truth)?;
    if m.var_a <= T::zero() || m.var_b <= T::zero() {
        return Err(MetricError::Degenerate("COR"));
    }
    Ok(m.cov / (m.var_a.sqrt() * m.var_b.sqrt()))
}

/// Concordance correlation `2 cov / (σ̂² + σ² + (μ̂ − μ)²)`.
pub fn ccc<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T, MetricError> {
    let m = moments(pred, truth)?;
    let d = m.mean_a - m.mean_b;
    let denom = m.var_a + m.var_b + d * d;
    if denom <= T::zero() {
        return Err(MetricError::Degenerate("CCC"));
    }
    Ok(T::of(2.0) * m.cov / denom)
}

/// Intraclass correlation `2 cov / (σ̂² + σ²)`: CCC without the mean penalty.
pub fn icc<T: Scalar>(pred: &[T], truth: &[T]) -> Result<T, MetricError> {
    let m = moments(pred, truth)?;
    let denom = m.var_a + m.var_b;
    if denom <= T::zero() {
        return Err(MetricError::Degenerate("ICC"));
    }
    Ok(T::of(2.0) * m.cov / denom)
}

pub const CLASS_BINS: usize = 10;

/// Equal-width bin of `[-1, 1]`; out-of-range values land in the end bins.
pub fn bin_of(value: f64) -> usize {
    let b = ((value + 1.0) / (2.0 / CLASS_BINS as f64)).floor();
    (b.max(0.0) as usize).min(CLASS_BINS - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    /// Normalized inverse frequency over occupied bins.
    #[default]
    InverseFrequency,
    /// `f_i / F`: proportional to frequency.
    Literal,
}

/// Per-dimension bin counts and weights; index 0 is valence, 1 is arousal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub counts: [[usize; CLASS_BINS]; 2],
    pub weights: [[f64; CLASS_BINS]; 2],
}

impl ClassWeights {
    pub fn weight(&self, dim: usize, value: f64) -> f64 {
        self.weights[dim][bin_of(value)]
    }
}

pub fn class_weights(labels: &[AffectLabel]) -> Result<ClassWeights, MetricError> {
    class_weights_with(labels, ClassWeighting::InverseFrequency)
}

pub fn class_weights_with(labels: &[AffectLabel], mode: ClassWeighting) -> Result<ClassWeights, MetricError> {
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut counts = [[0usize; CLASS_BINS]; 2];
    for l in labels {
        for (dim, row) in counts.iter_mut().enumerate() {
            row[bin_of(l.get(dim))] += 1;
        }
    }
    let mut weights = [[0.0; CLASS_BINS]; 2];
    for dim in 0..2 {
        let raw: Vec<f64> = counts[dim]
            .iter()
            .map(|&f| match (f, mode) {
                (0, _) => 0.0,
                (f, ClassWeighting::InverseFrequency) => 1.0 / f as f64,
                (f, ClassWeighting::Literal) => f as f64,
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (w, r) in weights[dim].iter_mut().zip(&raw) {
            *w = r / total;
        }
    }
    Ok(ClassWeights { counts, weights })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DimensionMetrics {
    pub rmse: f64,
    pub cor: f64,
    pub ccc: f64,
    pub icc: f64,
}

impl DimensionMetrics {
    /// Degenerate correlations are reported as 0.
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self, MetricError> {
        Ok(Self {
            rmse: rmse(pred, truth)?,
            cor: pearson_cor(pred, truth).or_else(zero_if_degenerate)?,
            ccc: ccc(pred, truth).or_else(zero_if_degenerate)?,
            icc: icc(pred, truth).or_else(zero_if_degenerate)?,
        })
    }

    fn mean(a: &Self, b: &Self) -> Self {
        Self {
            rmse: (a.rmse + b.rmse) / 2.0,
            cor: (a.cor + b.cor) / 2.0,
            ccc: (a.ccc + b.ccc) / 2.0,
            icc: (a.icc + b.icc) / 2.0,
        }
    }
}

fn zero_if_degenerate(e: MetricError) -> Result<f64, MetricError> {
    match e {
        MetricError::Degenerate(_) => Ok(0.0),
        other => Err(other),
    }
}

/// One row of a results table: per-dimension metrics and their average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub fold: Option<usize>,
    pub seq_len: usize,
    pub samples: usize,
    pub valence: DimensionMetrics,
    pub arousal: DimensionMetrics,
    pub avg: DimensionMetrics,
}

impl MetricReport {
    pub fn new(
        model: impl Into<String>,
        fold: Option<usize>,
        seq_len: usize,
        samples: usize,
        valence: DimensionMetrics,
        arousal: DimensionMetrics,
    ) -> Self {
        Self {
            model: model.into(),
            fold,
            seq_len,
            samples,
            valence,
            arousal,
            avg: DimensionMetrics::mean(&valence, &arousal),
        }
    }

    pub fn from_predictions(
        model: impl Into<String>,
        fold: Option<usize>,
        seq_len: usize,
        preds: &[AffectLabel],
        truths: &[AffectLabel],
    ) -> Result<Self, MetricError> {
        let col = |xs: &[AffectLabel], d: usize| xs.iter().map(|l| l.get(d)).collect::<Vec<f64>>();
        let valence = DimensionMetrics::compute(&col(preds, 0), &col(truths, 0))?;
        let arousal = DimensionMetrics::compute(&col(preds, 1), &col(truths, 1))?;
        Ok(Self::new(model, fold, seq_len, preds.len(), valence, arousal))
    }
}

/// Cell-wise mean over folds; `avg` is recomputed as the mean of valence and arousal.
pub fn aggregate_report(per_fold: &[MetricReport]) -> Result<MetricReport, MetricError> {
    let first = per_fold.first().ok_or(MetricError::Empty)?;
    if let Some(other) = per_fold.iter().find(|r| r.model != first.model) {
        return Err(MetricError::ModelMismatch(first.model.clone(), other.model.clone()));
    }
    if per_fold.len() == 1 {
        return Ok(first.clone());
    }
    let n = per_fold.len() as f64;
    let mean_of = |f: &dyn Fn(&MetricReport) -> DimensionMetrics| {
        let mut acc = DimensionMetrics::default();
        for r in per_fold {
            let m = f(r);
            acc.rmse += m.rmse / n;
            acc.cor += m.cor / n;
            acc.ccc += m.ccc / n;
            acc.icc += m.icc / n;
        }
        acc
    };
    let valence = mean_of(&|r| r.valence);
    let arousal = mean_of(&|r| r.arousal);
    let samples = per_fold.iter().map(|r| r.samples).sum();
    Ok(MetricReport::new(first.model.clone(), None, first.seq_len, samples, valence, arousal))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let r = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
        assert!((r - (25.0f64 / 2.0).sqrt()).abs() < 1e-12);
        assert!((r - 3.53553).abs() < 1e-5);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]), rmse(&[3.0, 4.0], &[0.0, 0.0]));
        assert_eq!(rmse::<f64>(&[], &[]), Err(MetricError::Empty));
        assert_eq!(rmse(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch(1, 2)));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let yn: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_cor(&x, &y2).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_cor(&x, &yn).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson_cor(&[1.0f64, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(pearson_cor(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::Degenerate("COR")));
    }

    #[test]
    fn ccc_and_icc_examples() {
        let x = [1.0f64, 2.0, 3.0];
        let y = [2.0, 4.0, 6.0];
        assert_eq!(ccc(&x, &x).unwrap(), 1.0);
        assert!((ccc(&x, &y).unwrap() - 4.0 / 11.0).abs() < 1e-15);
        assert!((icc(&x, &y).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(icc(&x, &x).unwrap(), 1.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 1.5).collect();
        // 2σ²/(2σ² + c²) with σ² = 2/3, c = 1.5
        let expected = (4.0 / 3.0) / (4.0 / 3.0 + 2.25);
        assert!((ccc(&x, &shifted).unwrap() - expected).abs() < 1e-12);
        assert!((icc(&x, &shifted).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ccc(&[2.0, 2.0], &[2.0, 2.0]), Err(MetricError::Degenerate("CCC")));
        assert_eq!(icc(&[2.0, 2.0], &[3.0, 3.0]), Err(MetricError::Degenerate("ICC")));
    }

    #[test]
    fn class_weight_examples() {
        let uniform: Vec<AffectLabel> = (0..10)
            .map(|i| {
                let v = -0.9 + 0.2 * i as f64;
                AffectLabel::new(v, v)
            })
            .collect();
        let w = class_weights(&uniform).unwrap();
        for dim in 0..2 {
            for b in 0..CLASS_BINS {
                assert!((w.weights[dim][b] - 0.1).abs() < 1e-15);
            }
        }

        let mut two = vec![AffectLabel::new(-0.5, 0.5); 30];
        two.extend(vec![AffectLabel::new(0.5, 0.5); 10]);
        let w = class_weights(&two).unwrap();
        assert!((w.weights[0][bin_of(-0.5)] - 0.25).abs() < 1e-15);
        assert!((w.weights[0][bin_of(0.5)] - 0.75).abs() < 1e-15);
        assert!((w.weights[1][bin_of(0.5)] - 1.0).abs() < 1e-15);
        assert!((w.weights[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let lit = class_weights_with(&two, ClassWeighting::Literal).unwrap();
        assert!((lit.weights[0][bin_of(-0.5)] - 0.75).abs() < 1e-15);
        assert_eq!(class_weights(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn bins_partition_the_range() {
        assert_eq!(bin_of(-1.0), 0);
        assert_eq!(bin_of(1.0), 9);
        assert_eq!(bin_of(0.0), 5);
        assert_eq!(bin_of(-0.0001), 4);
    }

    #[test]
    fn report_average_and_aggregation() {
        let dims = |rmse, cor| DimensionMetrics {
            rmse,
            cor,
            ccc: 0.0,
            icc: 0.0,
        };
        let r = MetricReport::new("m", Some(0), 8, 10, dims(2.0, 0.5), dims(1.0, 0.3));
        assert_eq!(r.avg.rmse, 1.5);
        assert!((r.avg.cor - 0.4).abs() < 1e-15);
        assert_eq!(aggregate_report(std::slice::from_ref(&r)).unwrap(), r);

        let r2 = MetricReport::new("m", Some(1), 8, 10, dims(4.0, 0.7), dims(3.0, 0.1));
        let agg = aggregate_report(&[r.clone(), r2]).unwrap();
        assert_eq!(agg.valence.rmse, 3.0);
        assert_eq!(agg.avg.rmse, 2.5);
        assert_eq!(agg.samples, 20);

        let other = MetricReport::new("x", Some(1), 8, 10, dims(4.0, 0.7), dims(3.0, 0.1));
        assert!(matches!(aggregate_report(&[r, other]), Err(MetricError::ModelMismatch(..))));
        assert_eq!(aggregate_report(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn perfect_predictor_report() {
        let truths: Vec<AffectLabel> = (0..20)
            .map(|i| AffectLabel::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos() * 0.5))
            .collect();
        let r = MetricReport::from_predictions("oracle", None, 1, &truths, &truths).unwrap();
        for d in [r.valence, r.arousal, r.avg] {
            assert_eq!(d.rmse, 0.0);
            assert!((d.cor - 1.0).abs() < 1e-12);
            assert!((d.ccc - 1.0).abs() < 1e-12);
            assert!((d.icc - 1.0).abs() < 1e-12);
        }
    }
}
