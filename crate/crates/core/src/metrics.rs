//! Classification metrics and Fréchet distance between feature sets.

use confaug_nn::{Scalar, Tensor};
use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::DownstreamModel;
use crate::dataset::PixelTensor;
use crate::model::ModelError;

/// Tolerance below zero for eigenvalues of Σ₁Σ₂ treated as round-off,
/// scaled by the largest eigenvalue magnitude when that exceeds 1.
pub const EIGEN_NEGATIVE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no predictions to evaluate")]
    Empty,
    #[error("class {class} out of range for {count} classes")]
    ClassOutOfRange { class: usize, count: usize },
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("covariance matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("covariance product has eigenvalue {0:e} below the round-off tolerance")]
    NonPSDProduct(f64),
    #[error("need at least 2 samples for a covariance, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No prediction named this class; precision counted as 0.
    pub zero_predicted: bool,
    /// No example of this class; recall counted as 0.
    pub zero_support: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean cross-entropy when the report comes from a model evaluation.
    pub loss: Option<f64>,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub support: Vec<usize>,
    pub per_class: Vec<ClassMetrics>,
}

/// Accuracy and macro-averaged precision, recall and F1.
pub fn classification_report(predictions: &[usize], labels: &[usize], k: usize) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&c) = predictions.iter().chain(labels).find(|&&c| c >= k) {
        return Err(MetricsError::ClassOutOfRange { class: c, count: k });
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let predicted: Vec<usize> = (0..k).map(|c| confusion.iter().map(|r| r[c]).sum()).collect();
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let precision = if predicted[c] == 0 { 0.0 } else { tp / predicted[c] as f64 };
            let recall = if support[c] == 0 { 0.0 } else { tp / support[c] as f64 };
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { precision, recall, f1, zero_predicted: predicted[c] == 0, zero_support: support[c] == 0 }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(EvalReport {
        loss: None,
        accuracy: correct as f64 / labels.len() as f64,
        precision_macro: mean(|m| m.precision),
        recall_macro: mean(|m| m.recall),
        f1_macro: mean(|m| m.f1),
        confusion,
        support,
        per_class,
    })
}

/// Gaussian fit of a feature distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    pub mean: Vec<f64>,
    /// Unbiased covariance, row-major rows.
    pub covariance: Vec<Vec<f64>>,
    pub count: usize,
    pub extractor_id: String,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.covariance[i][j])
    }

    fn check_symmetric(&self) -> Result<()> {
        let d = self.dim();
        if self.covariance.len() != d || self.covariance.iter().any(|r| r.len() != d) {
            return Err(MetricsError::DimensionMismatch(self.covariance.len(), d));
        }
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..i {
                worst = worst.max((self.covariance[i][j] - self.covariance[j][i]).abs());
            }
        }
        if worst > 1e-9 {
            return Err(MetricsError::Asymmetric(worst));
        }
        Ok(())
    }
}

/// Streaming mean and centred second moments (Chan et al. pairwise update),
/// mergeable exactly up to round-off.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAccumulator {
    dim: usize,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl FeatureAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { dim, count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim * dim] }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(MetricsError::DimensionMismatch(row.len(), self.dim));
        }
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = row.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        let d = self.dim;
        for i in 0..d {
            let post = row[i] - self.mean[i];
            for j in 0..d {
                self.m2[i * d + j] += delta[j] * post;
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &FeatureAccumulator) -> Result<FeatureAccumulator> {
        if self.dim != other.dim {
            return Err(MetricsError::DimensionMismatch(self.dim, other.dim));
        }
        if other.count == 0 {
            return Ok(self.clone());
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        let mean = self.mean.iter().zip(&delta).map(|(a, d)| a + d * nb / n).collect();
        let d = self.dim;
        let mut m2 = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m2[i * d + j] = self.m2[i * d + j] + other.m2[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        Ok(FeatureAccumulator { dim: d, count: self.count + other.count, mean, m2 })
    }

    /// Mean and unbiased covariance; symmetrized to remove round-off.
    pub fn finish(&self, extractor_id: &str) -> Result<FrechetStats> {
        if self.count < 2 {
            return Err(MetricsError::TooFewSamples(self.count));
        }
        let d = self.dim;
        let denom = (self.count - 1) as f64;
        let covariance = (0..d)
            .map(|i| (0..d).map(|j| 0.5 * (self.m2[i * d + j] + self.m2[j * d + i]) / denom).collect())
            .collect();
        Ok(FrechetStats { mean: self.mean.clone(), covariance, count: self.count, extractor_id: extractor_id.into() })
    }
}

/// Statistics of a feature matrix, accumulated over parallel shards.
pub fn frechet_stats(rows: &[Vec<f64>], extractor_id: &str) -> Result<FrechetStats> {
    let dim = rows.first().map_or(0, Vec::len);
    let acc = rows
        .par_chunks(256)
        .map(|chunk| {
            let mut a = FeatureAccumulator::new(dim);
            for r in chunk {
                a.push(r)?;
            }
            Ok(a)
        })
        .collect::<Result<Vec<_>>>()?
        .iter()
        .try_fold(FeatureAccumulator::new(dim), |acc, a| acc.merge(a))?;
    acc.finish(extractor_id)
}

/// Squared Fréchet distance ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2}), with
/// the trace of the square root taken from the eigenvalues of Σ₁Σ₂.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(MetricsError::DimensionMismatch(a.dim(), b.dim()));
    }
    a.check_symmetric()?;
    b.check_symmetric()?;
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (s1, s2) = (a.cov_matrix(), b.cov_matrix());
    let trace = s1.trace() + s2.trace();
    let eig = (&s1 * &s2).complex_eigenvalues();
    let scale = eig.iter().map(|l| l.norm()).fold(1.0_f64, f64::max);
    let tol = EIGEN_NEGATIVE_TOLERANCE * scale;
    let mut sqrt_trace = 0.0;
    for l in eig.iter() {
        let mut re = l.re;
        if re < -tol {
            return Err(MetricsError::NonPSDProduct(re));
        }
        if re < 0.0 {
            log::warn!("clamping eigenvalue {re:e} of the covariance product to 0");
            re = 0.0;
        }
        sqrt_trace += Complex::new(re, l.im).sqrt().re;
    }
    let d2 = mean_term + trace - 2.0 * sqrt_trace;
    if d2 < 0.0 {
        log::warn!("clamping Fréchet distance {d2:e} to 0");
        return Ok(0.0);
    }
    Ok(d2)
}

/// Short identifier of a feature extractor: its preset plus a digest of
/// its parameters.
pub fn extractor_id<T: Scalar>(model: &DownstreamModel<T>, layer: &str) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.params.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    format!("{}:{}:{}", model.id(), layer, &hex::encode(h.finalize())[..12])
}

/// Activations of `layer` for each image, one row per image.
pub fn extract_features<T: Scalar>(
    images: &[&PixelTensor<T>],
    model: &DownstreamModel<T>,
    layer: &str,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let width = model.layer_width(layer)?;
    let chunks = images
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let x = Tensor::stack(&chunk.iter().map(|p| p.values()).collect::<Vec<_>>()).map_err(ModelError::from)?;
            let f = model.features(&x, layer)?;
            Ok(f.data().chunks(width).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub fid: f64,
    pub real_count: usize,
    pub synthetic_count: usize,
    pub extractor_id: String,
    pub feature_dim: usize,
}

/// Fréchet distance between extracted features of two image sets.
pub fn fid_between_sets<T: Scalar>(
    real: &[&PixelTensor<T>],
    synthetic: &[&PixelTensor<T>],
    model: &DownstreamModel<T>,
    layer: &str,
) -> Result<FidReport> {
    let dim = model.layer_width(layer)?;
    for n in [real.len(), synthetic.len()] {
        if n < 2 {
            return Err(MetricsError::TooFewSamples(n));
        }
        if n < dim + 1 {
            log::warn!("{n} images for {dim}-dimensional features leaves the covariance rank deficient");
        }
    }
    let id = extractor_id(model, layer);
    let a = frechet_stats(&extract_features(real, model, layer, 64)?, &id)?;
    let b = frechet_stats(&extract_features(synthetic, model, layer, 64)?, &id)?;
    Ok(FidReport {
        fid: frechet_distance(&a, &b)?,
        real_count: real.len(),
        synthetic_count: synthetic.len(),
        extractor_id: id,
        feature_dim: dim,
    })
}

/// One row of a baseline/retrained comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub role: String,
    pub report: EvalReport,
}

const COMPARISON_HEADER: [&str; 7] = ["Model", "Role", "Loss", "Accuracy", "Precision", "Recall", "F1"];

fn comparison_cells(r: &ComparisonRow) -> [String; 7] {
    [
        r.model.clone(),
        r.role.clone(),
        r.report.loss.map_or_else(|| "-".to_string(), |l| format!("{l:.3}")),
        format!("{:.3}", r.report.accuracy),
        format!("{:.4}", r.report.precision_macro),
        format!("{:.4}", r.report.recall_macro),
        format!("{:.4}", r.report.f1_macro),
    ]
}

/// Aligned text table with one row per (model, role).
pub fn render_comparison_text(rows: &[ComparisonRow]) -> String {
    let cells: Vec<[String; 7]> = rows.iter().map(comparison_cells).collect();
    let mut widths: Vec<usize> = COMPARISON_HEADER.iter().map(|h| h.len()).collect();
    for c in &cells {
        for (w, s) in widths.iter_mut().zip(c) {
            *w = (*w).max(s.len());
        }
    }
    let line = |c: &[String]| {
        c.iter()
            .enumerate()
            .map(|(i, s)| if i < 2 { format!("{s:<w$}", w = widths[i]) } else { format!("{s:>w$}", w = widths[i]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let header: Vec<String> = COMPARISON_HEADER.iter().map(|s| s.to_string()).collect();
    let mut out = vec![line(&header)];
    out.extend(cells.iter().map(|c| line(c)));
    out.join("\n") + "\n"
}

pub fn render_comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = COMPARISON_HEADER.join(",").to_lowercase() + "\n";
    for r in rows {
        out.push_str(&comparison_cells(r).join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors() {
        assert!(matches!(classification_report(&[0], &[0, 1], 2), Err(MetricsError::LengthMismatch { .. })));
        assert!(matches!(classification_report(&[2], &[0], 2), Err(MetricsError::ClassOutOfRange { class: 2, .. })));
        assert!(matches!(classification_report(&[], &[], 2), Err(MetricsError::Empty)));
    }

    #[test]
    fn merge_matches_sequential() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let mut all = FeatureAccumulator::new(2);
        rows.iter().for_each(|r| all.push(r).unwrap());
        let mut a = FeatureAccumulator::new(2);
        let mut b = FeatureAccumulator::new(2);
        rows[..7].iter().for_each(|r| a.push(r).unwrap());
        rows[7..].iter().for_each(|r| b.push(r).unwrap());
        let m = a.merge(&b).unwrap().finish("x").unwrap();
        let s = all.finish("x").unwrap();
        for i in 0..2 {
            assert!((m.mean[i] - s.mean[i]).abs() < 1e-12);
            for j in 0..2 {
                assert!((m.covariance[i][j] - s.covariance[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let mut a = FeatureAccumulator::new(1);
        a.push(&[1.0]).unwrap();
        assert!(matches!(a.finish("x"), Err(MetricsError::TooFewSamples(1))));
    }

    #[test]
    fn table_rendering() {
        let report = classification_report(&[0, 1], &[0, 1], 2).unwrap();
        let rows = vec![ComparisonRow { model: "residual-desk".into(), role: "baseline".into(), report }];
        let csv = render_comparison_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), "model,role,loss,accuracy,precision,recall,f1");
        assert!(csv.contains("residual-desk,baseline,-,1.000,1.0000,1.0000,1.0000"));
        assert!(render_comparison_text(&rows).contains("Accuracy"));
    }
}
