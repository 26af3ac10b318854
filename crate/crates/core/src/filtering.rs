//! Confidence gate over synthetic samples.

use std::collections::BTreeMap;

use confaug_nn::{Scalar, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifiers::{DownstreamModel, Prediction};
use crate::model::ModelError;
use crate::sampler::{SampleConfidence, SyntheticSampleRecord};

pub const DEFAULT_THRESHOLD: f64 = 0.90;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("sample intended for class {class} but classifier `{model}` has {classes} classes")]
    ClassMismatch { model: String, class: usize, classes: usize },
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("{scores} scores for {records} records")]
    LengthMismatch { records: usize, scores: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = FilterError> = std::result::Result<T, E>;

/// Anything that can assign class probabilities to images.
pub trait ConfidenceScorer<T: Scalar>: Sync {
    fn id(&self) -> String;
    fn class_count(&self) -> usize;
    /// Predictions for a `[n, 1, S, S]` batch.
    fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<Prediction>>;
}

impl<T: Scalar> ConfidenceScorer<T> for DownstreamModel<T> {
    fn id(&self) -> String {
        DownstreamModel::id(self)
    }

    fn class_count(&self) -> usize {
        self.spec.class_count
    }

    fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<Prediction>> {
        Ok(self.predict(x)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterOptions {
    pub threshold: f64,
    /// Also require the predicted class to equal the intended class.
    pub require_argmax_match: bool,
    pub batch_size: usize,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, require_argmax_match: false, batch_size: 64 }
    }
}

impl FilterOptions {
    pub fn with_threshold(threshold: f64) -> Self {
        Self { threshold, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(FilterError::InvalidThreshold(self.threshold));
        }
        Ok(())
    }

    /// Retention rule: p(intended) ≥ threshold, inclusive.
    pub fn retains(&self, intended: usize, c: &SampleConfidence) -> bool {
        c.intended_probability >= self.threshold && (!self.require_argmax_match || c.predicted_class == intended)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRetention {
    #[serde(rename = "in")]
    pub input: usize,
    pub retained: usize,
}

/// Mergeable retention counts; [`FilterReport`] is derived from it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterTally {
    pub per_class: BTreeMap<usize, ClassRetention>,
    pub retained_confidence_sum: f64,
    pub rejected_confidence_sum: f64,
}

impl FilterTally {
    pub fn record(&mut self, class: usize, confidence: f64, retained: bool) {
        let e = self.per_class.entry(class).or_default();
        e.input += 1;
        if retained {
            e.retained += 1;
            self.retained_confidence_sum += confidence;
        } else {
            self.rejected_confidence_sum += confidence;
        }
    }

    pub fn merge(mut self, other: &FilterTally) -> FilterTally {
        for (&c, r) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.input += r.input;
            e.retained += r.retained;
        }
        self.retained_confidence_sum += other.retained_confidence_sum;
        self.rejected_confidence_sum += other.rejected_confidence_sum;
        self
    }

    pub fn total_in(&self) -> usize {
        self.per_class.values().map(|r| r.input).sum()
    }

    pub fn total_retained(&self) -> usize {
        self.per_class.values().map(|r| r.retained).sum()
    }

    pub fn report(&self, filter_model_id: &str, opts: &FilterOptions) -> FilterReport {
        let (n_in, n_ret) = (self.total_in(), self.total_retained());
        let n_rej = n_in - n_ret;
        FilterReport {
            filter_model_id: filter_model_id.to_string(),
            threshold: opts.threshold,
            require_argmax_match: opts.require_argmax_match,
            total_in: n_in,
            total_retained: n_ret,
            per_class: self.per_class.clone(),
            mean_confidence_retained: (n_ret > 0).then(|| self.retained_confidence_sum / n_ret as f64),
            mean_confidence_rejected: (n_rej > 0).then(|| self.rejected_confidence_sum / n_rej as f64),
        }
    }
}

/// Retention statistics of one filter. Mean confidences are over the
/// intended-class probability and absent for empty partitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub filter_model_id: String,
    pub threshold: f64,
    pub require_argmax_match: bool,
    pub total_in: usize,
    pub total_retained: usize,
    pub per_class: BTreeMap<usize, ClassRetention>,
    pub mean_confidence_retained: Option<f64>,
    pub mean_confidence_rejected: Option<f64>,
}

impl FilterReport {
    pub fn retention_rate(&self) -> f64 {
        if self.total_in == 0 {
            0.0
        } else {
            self.total_retained as f64 / self.total_in as f64
        }
    }
}

fn confidence_of(p: &Prediction, intended: usize) -> SampleConfidence {
    SampleConfidence {
        predicted_class: p.predicted_class,
        confidence: p.confidence,
        intended_probability: p.probabilities[intended],
    }
}

/// Scores every record with `scorer`, sharding batches across workers.
pub fn score_records<T: Scalar>(
    records: &[SyntheticSampleRecord<T>],
    scorer: &dyn ConfidenceScorer<T>,
    batch_size: usize,
) -> Result<Vec<SampleConfidence>> {
    let k = scorer.class_count();
    if let Some(r) = records.iter().find(|r| r.intended_class >= k) {
        return Err(FilterError::ClassMismatch { model: scorer.id(), class: r.intended_class, classes: k });
    }
    let chunks: Vec<Vec<SampleConfidence>> = records
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let imgs: Vec<&Tensor<T>> = chunk.iter().map(|r| r.image.values()).collect();
            let x = Tensor::stack(&imgs).map_err(ModelError::from)?;
            let preds = scorer.predict_batch(&x)?;
            Ok(chunk.iter().zip(&preds).map(|(r, p)| confidence_of(p, r.intended_class)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Applies the threshold rule to precomputed scores. Retained records are
/// copies carrying an entry for `model_id`; the input is left untouched.
pub fn filter_scored<T: Clone>(
    records: &[SyntheticSampleRecord<T>],
    scores: &[SampleConfidence],
    model_id: &str,
    opts: &FilterOptions,
) -> Result<(Vec<SyntheticSampleRecord<T>>, FilterReport)> {
    opts.validate()?;
    if scores.len() != records.len() {
        return Err(FilterError::LengthMismatch { records: records.len(), scores: scores.len() });
    }
    let mut tally = FilterTally::default();
    let mut retained = Vec::new();
    for (r, c) in records.iter().zip(scores) {
        let keep = opts.retains(r.intended_class, c);
        tally.record(r.intended_class, c.intended_probability, keep);
        if keep {
            let mut r = r.clone();
            r.confidences.insert(model_id.to_string(), c.clone());
            retained.push(r);
        }
    }
    Ok((retained, tally.report(model_id, opts)))
}

pub fn filter_batch<T: Scalar>(
    records: &[SyntheticSampleRecord<T>],
    scorer: &dyn ConfidenceScorer<T>,
    opts: &FilterOptions,
) -> Result<(Vec<SyntheticSampleRecord<T>>, FilterReport)> {
    opts.validate()?;
    let scores = score_records(records, scorer, opts.batch_size)?;
    filter_scored(records, &scores, &scorer.id(), opts)
}

pub type FilterOutcome<T> = (Vec<SyntheticSampleRecord<T>>, FilterReport);

/// Runs every filter independently against the same pool.
pub fn multi_filter<T: Scalar>(
    records: &[SyntheticSampleRecord<T>],
    scorers: &[&dyn ConfidenceScorer<T>],
    opts: &FilterOptions,
) -> Result<BTreeMap<String, FilterOutcome<T>>> {
    let mut out = BTreeMap::new();
    for s in scorers {
        out.insert(s.id(), filter_batch(records, *s, opts)?);
    }
    Ok(out)
}

/// Aligned text table: filter, retained, rate, and FID when known.
pub fn render_retention_table(rows: &[(FilterReport, Option<f64>)], unfiltered: Option<(usize, Option<f64>)>) -> String {
    let fmt_fid = |f: Option<f64>| f.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    let mut lines = vec![format!("{:<24} {:>10} {:>8} {:>10}", "Dataset", "Retained", "Rate", "FID")];
    if let Some((n, fid)) = unfiltered {
        lines.push(format!("{:<24} {:>10} {:>8} {:>10}", "Unfiltered", n, "100.0%", fmt_fid(fid)));
    }
    for (r, fid) in rows {
        lines.push(format!(
            "{:<24} {:>10} {:>7.1}% {:>10}",
            format!("{} filtered", r.filter_model_id),
            r.total_retained,
            100.0 * r.retention_rate(),
            fmt_fid(*fid)
        ));
    }
    lines.join("\n") + "\n"
}
