//! Training loops for the denoiser, the guidance classifier and the
//! downstream classifiers.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use confaug_nn::{clip_grad_norm, AdamW, Ema, Graph, ParamStore, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, Denoiser};
use crate::classifiers::{argmax, softmax, DownstreamModel, DownstreamModelSpec, GuidanceClassifier};
use crate::dataset::{DatasetError, DatasetManifest, LabeledImages, Split};
use crate::metrics::{classification_report, EvalReport, MetricsError};
use crate::model::ModelError;
use crate::schedule::{q_sample_batch, NoiseSchedule, ScheduleError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty {0} split")]
    EmptySplit(Split),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (examples: {keys:?})")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64, keys: Vec<String> },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model has {model} classes but the data has {data}")]
    ClassCountMismatch { model: usize, data: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<confaug_nn::NnError> for TrainError {
    fn from(e: confaug_nn::NnError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub ema_decay: Option<f64>,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Cosine decay of the learning rate to zero over `max_epochs`.
    pub cosine_lr: bool,
    pub grad_clip: Option<f64>,
    /// Diffusion loops only: draw t from `0..=max_timestep` instead of the
    /// whole schedule.
    pub max_timestep: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 50,
            early_stop_patience: 10,
            weight_decay: 0.01,
            seed: 0,
            ema_decay: None,
            eval_every: 1,
            cosine_lr: false,
            grad_clip: None,
            max_timestep: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return bad("ema_decay must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metrics: Option<ValMetrics>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stop_reason: StopReason,
}

impl RunLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("records serialize") + "\n").collect()
    }

    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "epochs": self.epochs.len(),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
        })
        .to_string()
    }

    pub fn write(&self, log_path: &Path, summary_path: &Path) -> Result<()> {
        std::fs::File::create(log_path)?.write_all(self.to_jsonl().as_bytes())?;
        std::fs::write(summary_path, self.summary_json() + "\n")?;
        Ok(())
    }
}

/// Early stopping on strict improvement of the validation loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, stale: 0 }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        match self.best {
            Some((_, b)) if loss >= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, loss));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }
}

/// Cooperative cancellation and progress reporting.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub cancel: Option<&'a AtomicBool>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

pub trait HasParams<T: Scalar> {
    fn params(&self) -> &ParamStore<T>;
    fn params_mut(&mut self) -> &mut ParamStore<T>;
}

macro_rules! has_params {
    ($($ty:ident),*) => {$(
        impl<T: Scalar> HasParams<T> for $ty<T> {
            fn params(&self) -> &ParamStore<T> {
                &self.params
            }
            fn params_mut(&mut self) -> &mut ParamStore<T> {
                &mut self.params
            }
        }
    )*};
}

has_params!(Denoiser, GuidanceClassifier, DownstreamModel);

/// Loss and parameter gradients of one minibatch.
pub struct StepOutput<T> {
    pub loss: f64,
    pub grads: Vec<Option<Tensor<T>>>,
}

pub struct ValOutput {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Shared epoch loop: shuffled minibatches, AdamW, optional EMA, early
/// stopping with restore-best. `keys` name the training examples in
/// diagnostics.
pub fn train_loop<T: Scalar, M: HasParams<T>>(
    model: &mut M,
    cfg: &TrainConfig,
    keys: &[String],
    mut step: impl FnMut(&M, &[usize], &mut ChaCha8Rng) -> Result<StepOutput<T>>,
    mut validate: impl FnMut(&M) -> Result<ValOutput>,
    hooks: TrainHooks<'_>,
) -> Result<RunLog> {
    cfg.validate()?;
    let TrainHooks { cancel, mut on_epoch } = hooks;
    let n = keys.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::<T>::new(cfg.learning_rate, cfg.weight_decay);
    let mut ema = cfg.ema_decay.map(|d| Ema::new(model.params(), d));
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_params: Option<ParamStore<T>> = None;
    let mut log = RunLog { epochs: Vec::new(), best_epoch: None, best_val_loss: None, stop_reason: StopReason::MaxEpochs };
    let batches_per_epoch = n.div_ceil(cfg.batch_size).max(1);
    let total_steps = (cfg.max_epochs * batches_per_epoch).max(1);
    let start = Instant::now();
    let mut order: Vec<usize> = (0..n).collect();

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                log.stop_reason = StopReason::User;
                break 'epochs;
            }
            let out = step(model, idx, &mut rng)?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: out.loss,
                    keys: idx.iter().map(|&i| keys[i].clone()).collect(),
                });
            }
            loss_sum += out.loss * idx.len() as f64;
            let mut grads = out.grads;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            if cfg.cosine_lr {
                let done = opt.steps_taken() as f64 / total_steps as f64;
                opt.lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * done).cos());
            }
            opt.step(model.params_mut(), &grads);
            if let Some(e) = ema.as_mut() {
                e.update(model.params());
            }
        }
        let mut rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n.max(1) as f64,
            val_loss: None,
            val_metrics: None,
            wall_time_secs: start.elapsed().as_secs_f64(),
        };
        let mut stop = false;
        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            // evaluate the EMA weights when present
            let live = ema.as_ref().map(|e| std::mem::replace(model.params_mut(), e.shadow.clone()));
            let v = validate(model)?;
            rec.val_loss = Some(v.loss);
            rec.val_metrics = v.accuracy.map(|accuracy| ValMetrics { accuracy });
            match stopper.observe(epoch, v.loss) {
                Verdict::Improved => best_params = Some(model.params().clone()),
                Verdict::Stop => stop = true,
                Verdict::Continue => {}
            }
            if let Some(p) = live {
                *model.params_mut() = p;
            }
        }
        rec.wall_time_secs = start.elapsed().as_secs_f64();
        if let Some(f) = on_epoch.as_mut() {
            f(&rec);
        }
        log.epochs.push(rec);
        if stop {
            log.stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    if let Some((e, l)) = stopper.best() {
        log.best_epoch = Some(e);
        log.best_val_loss = Some(l);
    }
    if let Some(p) = best_params {
        *model.params_mut() = p;
    } else if let Some(e) = ema {
        *model.params_mut() = e.shadow;
    }
    Ok(log)
}

/// Seed of the fixed validation draw for one example, keyed by identity.
pub fn example_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn timestep_limit(cfg: &TrainConfig, sched: &NoiseSchedule) -> usize {
    cfg.max_timestep.map_or(sched.len(), |m| (m + 1).min(sched.len()))
}

/// Keyed (t, ε) for each example, independent of ordering.
fn keyed_noise<T: Scalar>(data: &LabeledImages<T>, seed: u64, t_max: usize) -> (Vec<usize>, Vec<Tensor<T>>) {
    data.keys
        .iter()
        .zip(&data.images)
        .map(|(k, img)| {
            let mut r = ChaCha8Rng::seed_from_u64(example_seed(seed, k));
            let t = r.random_range(0..t_max);
            (t, Tensor::randn(img.shape(), &mut r))
        })
        .unzip()
}

/// Indices sorted by key, so batch composition ignores input order.
fn key_order<T>(data: &LabeledImages<T>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.keys.len()).collect();
    idx.sort_by(|&a, &b| data.keys[a].cmp(&data.keys[b]));
    idx
}

fn require<T: Scalar>(data: &LabeledImages<T>, split: Split) -> Result<()> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit(split));
    }
    Ok(())
}

fn stack<T: Scalar>(items: &[Tensor<T>], idx: &[usize]) -> Result<Tensor<T>> {
    Ok(Tensor::stack(&idx.iter().map(|&i| &items[i]).collect::<Vec<_>>())?)
}

/// ε-prediction regression on in-memory splits.
pub fn train_denoiser_on<T: Scalar>(
    model: &mut Denoiser<T>,
    train: &LabeledImages<T>,
    val: &LabeledImages<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<RunLog> {
    require(train, Split::Train)?;
    require(val, Split::Val)?;
    if model.timesteps != sched.len() {
        return Err(TrainError::InvalidConfig(format!(
            "denoiser expects {} timesteps, schedule has {}",
            model.timesteps,
            sched.len()
        )));
    }
    let t_max = timestep_limit(cfg, sched);
    let (val_ts, val_eps) = keyed_noise(val, cfg.seed, t_max);
    let val_order = key_order(val);
    let bs = cfg.batch_size;
    train_loop(
        model,
        cfg,
        &train.keys,
        |m, idx, rng| {
            let x0 = train.batch(idx);
            let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(0..t_max)).collect();
            let eps = Tensor::<T>::randn(x0.shape(), rng);
            let xt = q_sample_batch(&x0, &ts, &eps, sched)?;
            let ys: Vec<Option<usize>> = train.labels_of(idx).into_iter().map(Some).collect();
            let mut g = Graph::new();
            let xv = g.input(xt);
            let target = g.input(eps);
            let pred = m.forward(&mut g, xv, &ts, &ys, rng)?;
            let loss = g.mse(pred, target)?;
            let lv = g.value(loss).item().as_f64();
            let grads = g.backward(loss)?.for_params(&m.params);
            Ok(StepOutput { loss: lv, grads })
        },
        |m| {
            let mut total = 0.0;
            for idx in val_order.chunks(bs) {
                let x0 = val.batch(idx);
                let ts: Vec<usize> = idx.iter().map(|&i| val_ts[i]).collect();
                let eps = stack(&val_eps, idx)?;
                let xt = q_sample_batch(&x0, &ts, &eps, sched)?;
                let ys: Vec<Option<usize>> = val.labels_of(idx).into_iter().map(Some).collect();
                let pred = m.predict(&xt, &ts, &ys)?;
                let per = pred.numel() / idx.len();
                for (p, e) in pred.data().chunks(per).zip(eps.data().chunks(per)) {
                    total += p.iter().zip(e).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / per as f64;
                }
            }
            Ok(ValOutput { loss: total / val.len() as f64, accuracy: None })
        },
        hooks,
    )
}

/// Cross-entropy of the time-conditioned classifier on diffused inputs.
pub fn train_guidance_on<T: Scalar>(
    model: &mut GuidanceClassifier<T>,
    train: &LabeledImages<T>,
    val: &LabeledImages<T>,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<RunLog> {
    require(train, Split::Train)?;
    require(val, Split::Val)?;
    let t_max = timestep_limit(cfg, sched).min(model.timesteps);
    let (val_ts, val_eps) = keyed_noise(val, cfg.seed, t_max);
    let val_order = key_order(val);
    let bs = cfg.batch_size;
    train_loop(
        model,
        cfg,
        &train.keys,
        |m, idx, rng| {
            let x0 = train.batch(idx);
            let ts: Vec<usize> = idx.iter().map(|_| rng.random_range(0..t_max)).collect();
            let eps = Tensor::<T>::randn(x0.shape(), rng);
            let xt = q_sample_batch(&x0, &ts, &eps, sched)?;
            let mut g = Graph::new();
            let xv = g.input(xt);
            let logits = m.forward(&mut g, xv, &ts, rng)?;
            let loss = g.cross_entropy(logits, &train.labels_of(idx))?;
            let lv = g.value(loss).item().as_f64();
            let grads = g.backward(loss)?.for_params(&m.params);
            Ok(StepOutput { loss: lv, grads })
        },
        |m| {
            let (mut total, mut correct) = (0.0, 0usize);
            for idx in val_order.chunks(bs) {
                let x0 = val.batch(idx);
                let ts: Vec<usize> = idx.iter().map(|&i| val_ts[i]).collect();
                let xt = q_sample_batch(&x0, &ts, &stack(&val_eps, idx)?, sched)?;
                let logits = m.logits(&xt, &ts)?;
                let (l, c) = ce_and_hits(&logits, &val.labels_of(idx));
                total += l;
                correct += c;
            }
            Ok(ValOutput { loss: total / val.len() as f64, accuracy: Some(correct as f64 / val.len() as f64) })
        },
        hooks,
    )
}

/// Summed cross-entropy and correct count of a logits batch.
fn ce_and_hits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (f64, usize) {
    let k = logits.shape()[1];
    let mut loss = 0.0;
    let mut hits = 0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let r: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let p = softmax(&r);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();
        hits += usize::from(argmax(&p) == y);
    }
    (loss, hits)
}

/// Loss, predictions and metrics of a classifier over a split.
pub fn evaluate_downstream<T: Scalar>(model: &DownstreamModel<T>, data: &LabeledImages<T>) -> Result<EvalReport> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    for chunk in idx.chunks(128) {
        let logits = model.logits(&data.batch(chunk))?;
        let k = logits.shape()[1];
        let (l, _) = ce_and_hits(&logits, &data.labels_of(chunk));
        loss += l;
        preds.extend(logits.data().chunks(k).map(|r| argmax(&r.iter().map(|v| v.as_f64()).collect::<Vec<_>>())));
    }
    let mut report = classification_report(&preds, &data.labels, model.spec.class_count)?;
    report.loss = Some(loss / data.len().max(1) as f64);
    Ok(report)
}

/// Supervised cross-entropy training; returns the test-split report of the
/// best checkpoint.
pub fn train_downstream_on<T: Scalar>(
    model: &mut DownstreamModel<T>,
    train: &LabeledImages<T>,
    val: &LabeledImages<T>,
    test: &LabeledImages<T>,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<(RunLog, EvalReport)> {
    require(train, Split::Train)?;
    require(val, Split::Val)?;
    require(test, Split::Test)?;
    let log = train_loop(
        model,
        cfg,
        &train.keys,
        |m, idx, rng| {
            let mut g = Graph::new();
            let xv = g.input(train.batch(idx));
            let logits = m.forward(&mut g, xv, rng)?;
            let loss = g.cross_entropy(logits, &train.labels_of(idx))?;
            let lv = g.value(loss).item().as_f64();
            let grads = g.backward(loss)?.for_params(&m.params);
            Ok(StepOutput { loss: lv, grads })
        },
        |m| {
            let r = evaluate_downstream(m, val)?;
            Ok(ValOutput { loss: r.loss.unwrap_or(f64::NAN), accuracy: Some(r.accuracy) })
        },
        hooks,
    )?;
    let report = evaluate_downstream(model, test)?;
    Ok((log, report))
}

fn check_classes(model: usize, manifest: &DatasetManifest) -> Result<()> {
    if model != manifest.class_count {
        return Err(TrainError::ClassCountMismatch { model, data: manifest.class_count });
    }
    Ok(())
}

pub fn train_denoiser<T: Scalar>(
    manifest: &DatasetManifest,
    sched: &NoiseSchedule,
    config: &BackboneConfig,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<(Denoiser<T>, RunLog)> {
    check_classes(config.class_count, manifest)?;
    let train = manifest.load_split::<T>(Split::Train)?;
    let val = manifest.load_split::<T>(Split::Val)?;
    let mut model = Denoiser::new(config.clone(), sched.len(), cfg.seed)?;
    let log = train_denoiser_on(&mut model, &train, &val, sched, cfg, hooks)?;
    Ok((model, log))
}

pub fn train_guidance_classifier<T: Scalar>(
    manifest: &DatasetManifest,
    sched: &NoiseSchedule,
    config: &BackboneConfig,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<(GuidanceClassifier<T>, RunLog)> {
    check_classes(config.class_count, manifest)?;
    let train = manifest.load_split::<T>(Split::Train)?;
    let val = manifest.load_split::<T>(Split::Val)?;
    let mut model = GuidanceClassifier::new(config.clone(), sched.len(), cfg.seed)?;
    let log = train_guidance_on(&mut model, &train, &val, sched, cfg, hooks)?;
    Ok((model, log))
}

pub fn train_downstream<T: Scalar>(
    manifest: &DatasetManifest,
    spec: &DownstreamModelSpec,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<(DownstreamModel<T>, RunLog, EvalReport)> {
    check_classes(spec.class_count, manifest)?;
    let train = manifest.load_split::<T>(Split::Train)?;
    let val = manifest.load_split::<T>(Split::Val)?;
    let test = manifest.load_split::<T>(Split::Test)?;
    let mut model = DownstreamModel::new(spec.clone(), cfg.seed)?;
    let (log, report) = train_downstream_on(&mut model, &train, &val, &test, cfg, hooks)?;
    Ok((model, log, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_semantics() {
        let mut s = EarlyStopping::new(2);
        let v: Vec<Verdict> = [1.0, 0.9, 0.91, 0.92].iter().enumerate().map(|(i, &l)| s.observe(i + 1, l)).collect();
        assert_eq!(v, vec![Verdict::Improved, Verdict::Improved, Verdict::Continue, Verdict::Stop]);
        assert_eq!(s.best(), Some((2, 0.9)));
    }

    #[test]
    fn equal_loss_is_not_improvement() {
        let mut s = EarlyStopping::new(1);
        s.observe(1, 0.5);
        assert_eq!(s.observe(2, 0.5), Verdict::Stop);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { early_stop_patience: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn example_seed_depends_on_key_and_seed() {
        assert_ne!(example_seed(1, "a"), example_seed(1, "b"));
        assert_ne!(example_seed(1, "a"), example_seed(2, "a"));
        assert_eq!(example_seed(7, "x.png"), example_seed(7, "x.png"));
    }
}
