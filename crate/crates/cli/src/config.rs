use std::path::{Path, PathBuf};

use confaug::backbone::BackboneConfig;
use confaug::classifiers::{DepthPreset, DownstreamModelSpec, Family};
use confaug::dataset::Split;
use confaug::sampler::{SamplerConfig, SamplingMethod};
use confaug::schedule::{make_schedule, NoiseSchedule, ScheduleKind, VarianceKind};
use confaug::{FilterOptions, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

/// Everything a subcommand may read. Unknown keys are rejected at every
/// level; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub backbone: BackboneConfig,
    pub training: TrainingSection,
    pub sampler: SamplerSection,
    pub filter: FilterOptions,
    pub classifier: ClassifierSection,
    pub metrics: MetricsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            schedule: ScheduleSection::default(),
            backbone: BackboneConfig::default(),
            training: TrainingSection::default(),
            sampler: SamplerSection::default(),
            filter: FilterOptions::default(),
            classifier: ClassifierSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Manifest used when a subcommand gets no `--data`.
    pub manifest: Option<PathBuf>,
    pub classes: usize,
    pub per_class: usize,
    /// `prepare-data` also writes a manifest keeping this many training
    /// images per class.
    pub train_per_class: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { manifest: None, classes: 5, per_class: 200, train_per_class: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule, CliError> {
        Ok(make_schedule(self.kind, self.timesteps, self.beta_start, self.beta_end).map_err(confaug::Error::from)?)
    }
}

/// [`TrainConfig`] without its seed, which comes from the global one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub weight_decay: f64,
    pub ema_decay: Option<f64>,
    pub eval_every: usize,
    pub cosine_lr: bool,
    pub grad_clip: Option<f64>,
    pub max_timestep: Option<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            early_stop_patience: d.early_stop_patience,
            weight_decay: d.weight_decay,
            ema_decay: d.ema_decay,
            eval_every: d.eval_every,
            cosine_lr: d.cosine_lr,
            grad_clip: d.grad_clip,
            max_timestep: d.max_timestep,
        }
    }
}

impl TrainingSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            weight_decay: self.weight_decay,
            seed,
            ema_decay: self.ema_decay,
            eval_every: self.eval_every,
            cosine_lr: self.cosine_lr,
            grad_clip: self.grad_clip,
            max_timestep: self.max_timestep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub per_class: usize,
    pub steps: usize,
    pub guidance_scale: f64,
    pub method: SamplingMethod,
    pub ddim_eta: f64,
    pub clamp_each_step: bool,
    pub variance: VarianceKind,
    pub batch_size: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            per_class: 200,
            steps: d.steps,
            guidance_scale: d.guidance_scale,
            method: d.method,
            ddim_eta: d.ddim_eta,
            clamp_each_step: d.clamp_each_step,
            variance: d.variance,
            batch_size: d.batch_size,
        }
    }
}

impl SamplerSection {
    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            method: self.method,
            ddim_eta: self.ddim_eta,
            clamp_each_step: self.clamp_each_step,
            variance: self.variance,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    pub family: Family,
    pub preset: DepthPreset,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self { family: Family::Residual, preset: DepthPreset::Desk }
    }
}

impl ClassifierSection {
    pub fn spec(&self, class_count: usize) -> DownstreamModelSpec {
        DownstreamModelSpec { family: self.family, depth_preset: self.preset, class_count, input_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Extractor layer used for Fréchet statistics.
    pub layer: String,
    /// Real split compared against synthetic sets.
    pub real_split: Split,
    /// Split scored by `evaluate`.
    pub eval_split: Split,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { layer: "penultimate".into(), real_split: Split::Train, eval_split: Split::Test }
    }
}

/// A `--dotted.key value` pair from the command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
}

/// Splits `--a.b value` pairs (and `--seed value`) out of argv; the rest
/// goes to the regular parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !(key.contains('.') || key == "seed") {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?,
        };
        overrides.push(Override { key, value });
    }
    Ok((rest, overrides))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let unknown = || CliError::Usage(format!("unknown config key `{key}`"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        let slot = obj.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(unknown())
}

/// JSON when it parses as such, otherwise a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn strict<T: for<'de> Deserialize<'de>>(v: Value, origin: &str) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{origin}: {e}")))
}

/// Defaults, then the config file, then command-line overrides.
pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> Result<ExperimentConfig, CliError> {
    let base: ExperimentConfig = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            strict(v, &p.display().to_string())?
        }
        None => ExperimentConfig::default(),
    };
    let mut v = serde_json::to_value(&base).expect("config serializes");
    for o in overrides {
        set_path(&mut v, &o.key, parse_value(&o.value))?;
    }
    strict(v, "command-line overrides")
}
