//! Reverse-process generation with optional classifier guidance.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use confaug_nn::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Denoiser;
use crate::classifiers::GuidanceClassifier;
use crate::dataset::{load_image, DatasetError, PixelTensor};
use crate::model::ModelError;
use crate::schedule::{posterior_params, predict_x0_from_eps, NoiseSchedule, ScheduleError, VarianceKind};

#[derive(Debug, thiserror::Error)]
pub enum SamplerError {
    #[error("class {class} out of range for {count} classes")]
    ClassOutOfRange { class: usize, count: usize },
    #[error("timestep {t} out of range for {len} steps")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("DDIM step must move to an earlier timestep, got {from} -> {to}")]
    TimestepOrder { from: usize, to: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("sidecar {path}:{line}: {msg}")]
    Sidecar { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(ScheduleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("cannot write image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ScheduleError> for SamplerError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::TimestepOutOfRange { t, len } => SamplerError::TimestepOutOfRange { t, len },
            ScheduleError::ShapeMismatch(m) => SamplerError::ShapeMismatch(m),
            other => SamplerError::Schedule(other),
        }
    }
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMethod {
    #[default]
    Ddpm,
    Ddim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of reverse steps; 0 means every timestep of the schedule.
    pub steps: usize,
    pub guidance_scale: f64,
    pub method: SamplingMethod,
    pub ddim_eta: f64,
    /// Clamp the predicted clean image to [-1, 1] inside every step.
    pub clamp_each_step: bool,
    pub variance: VarianceKind,
    /// Samples evaluated together; has no effect on the outputs.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            guidance_scale: 1.0,
            method: SamplingMethod::Ddpm,
            ddim_eta: 0.0,
            clamp_each_step: false,
            variance: VarianceKind::Posterior,
            batch_size: 32,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if self.steps > timesteps {
            return bad(format!("{} steps exceed the {timesteps}-step schedule", self.steps));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return bad(format!("guidance scale {} must be finite and non-negative", self.guidance_scale));
        }
        if !(0.0..=1.0).contains(&self.ddim_eta) {
            return bad(format!("ddim_eta {} outside [0, 1]", self.ddim_eta));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        Ok(())
    }

    /// Number of reverse steps actually taken.
    pub fn effective_steps(&self, timesteps: usize) -> usize {
        if self.steps == 0 {
            timesteps
        } else {
            self.steps
        }
    }
}

/// One filter's verdict on a sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfidence {
    pub predicted_class: usize,
    pub confidence: f64,
    /// Softmax probability of the intended class.
    pub intended_probability: f64,
}

/// A generated image and its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSampleRecord<T = f32> {
    pub image: PixelTensor<T>,
    pub intended_class: usize,
    pub guidance_scale: f64,
    pub steps: usize,
    pub seed: u64,
    /// Position in the generation request; selects the noise stream.
    pub sample_index: u64,
    /// Image location once written to disk.
    pub path: Option<PathBuf>,
    /// Keyed by filter model identifier.
    pub confidences: BTreeMap<String, SampleConfidence>,
}

/// Noise predictor used by the reverse process.
pub trait EpsModel<T: Scalar>: Sync {
    fn class_count(&self) -> usize;
    fn predict_eps(&self, x: &Tensor<T>, ts: &[usize], ys: &[Option<usize>]) -> Result<Tensor<T>>;
}

/// Source of ∇ₓ log p(y | x_t).
pub trait GuidanceGrad<T: Scalar>: Sync {
    fn log_prob_grad(&self, x: &Tensor<T>, ts: &[usize], ys: &[usize]) -> Result<Tensor<T>>;
}

impl<T: Scalar> EpsModel<T> for Denoiser<T> {
    fn class_count(&self) -> usize {
        self.config.class_count
    }

    fn predict_eps(&self, x: &Tensor<T>, ts: &[usize], ys: &[Option<usize>]) -> Result<Tensor<T>> {
        Ok(self.predict(x, ts, ys)?)
    }
}

impl<T: Scalar> GuidanceGrad<T> for GuidanceClassifier<T> {
    fn log_prob_grad(&self, x: &Tensor<T>, ts: &[usize], ys: &[usize]) -> Result<Tensor<T>> {
        Ok(GuidanceClassifier::log_prob_grad(self, x, ts, ys)?)
    }
}

/// Presents a model trained on the full schedule as one indexed by a
/// respaced schedule: index `i` is forwarded as `map[i]`.
pub struct Respaced<'a, M: ?Sized> {
    pub inner: &'a M,
    pub map: &'a [usize],
}

impl<M: ?Sized> Respaced<'_, M> {
    fn map_ts(&self, ts: &[usize]) -> Result<Vec<usize>> {
        ts.iter()
            .map(|&t| {
                self.map.get(t).copied().ok_or(SamplerError::TimestepOutOfRange { t, len: self.map.len() })
            })
            .collect()
    }
}

impl<T: Scalar, M: EpsModel<T> + ?Sized> EpsModel<T> for Respaced<'_, M> {
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn predict_eps(&self, x: &Tensor<T>, ts: &[usize], ys: &[Option<usize>]) -> Result<Tensor<T>> {
        self.inner.predict_eps(x, &self.map_ts(ts)?, ys)
    }
}

impl<T: Scalar, M: GuidanceGrad<T> + ?Sized> GuidanceGrad<T> for Respaced<'_, M> {
    fn log_prob_grad(&self, x: &Tensor<T>, ts: &[usize], ys: &[usize]) -> Result<Tensor<T>> {
        self.inner.log_prob_grad(x, &self.map_ts(ts)?, ys)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SamplerError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// mean + s·variance·grad
pub fn apply_guidance<T: Scalar>(mean: &Tensor<T>, variance: f64, grad: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    same_shape(mean, grad, "apply_guidance")?;
    if variance < 0.0 {
        return Err(SamplerError::InvalidConfig(format!("negative variance {variance}")));
    }
    let k = T::of(s * variance);
    Ok(mean.zip_map(grad, |m, g| m + k * g).expect("shapes checked"))
}

/// ε̂ consistent with the clamped x̂₀, so the mean becomes the posterior
/// mean of the clamped prediction.
fn clamp_eps<T: Scalar>(x: &Tensor<T>, eps: Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    let x0 = predict_x0_from_eps(x, &eps, t, sched, true)?;
    let ab = sched.alpha_bars[t];
    let (a, b) = (T::of(ab.sqrt()), T::of(1.0 / (1.0 - ab).sqrt()));
    Ok(x.zip_map(&x0, |xt, x0| (xt - a * x0) * b).expect("same shape"))
}

fn check_batch<T: Scalar>(x: &Tensor<T>, ys: &[usize], count: usize) -> Result<()> {
    if x.rank() == 0 || x.dim(0) != ys.len() {
        return Err(SamplerError::ShapeMismatch(format!("{} labels for batch {:?}", ys.len(), x.shape())));
    }
    if let Some(&c) = ys.iter().find(|&&c| c >= count) {
        return Err(SamplerError::ClassOutOfRange { class: c, count });
    }
    Ok(())
}

/// Per-step inputs shared by [`ddpm_step`] and [`ddim_step`].
pub struct StepModels<'a, T: Scalar> {
    pub denoiser: &'a dyn EpsModel<T>,
    pub guidance: Option<&'a dyn GuidanceGrad<T>>,
    pub scale: f64,
    pub variance: VarianceKind,
    pub clamp_x0: bool,
}

impl<'a, T: Scalar> StepModels<'a, T> {
    pub fn unguided(denoiser: &'a dyn EpsModel<T>) -> Self {
        Self { denoiser, guidance: None, scale: 0.0, variance: VarianceKind::Posterior, clamp_x0: false }
    }

    pub fn guided(denoiser: &'a dyn EpsModel<T>, guidance: &'a dyn GuidanceGrad<T>, scale: f64) -> Self {
        Self { guidance: Some(guidance), scale, ..Self::unguided(denoiser) }
    }

    fn eps(&self, x: &Tensor<T>, t: usize, ys: &[usize], sched: &NoiseSchedule) -> Result<Tensor<T>> {
        let ts = vec![t; ys.len()];
        let yo: Vec<Option<usize>> = ys.iter().map(|&y| Some(y)).collect();
        let eps = self.denoiser.predict_eps(x, &ts, &yo)?;
        same_shape(x, &eps, "denoiser output")?;
        if self.clamp_x0 {
            clamp_eps(x, eps, t, sched)
        } else {
            Ok(eps)
        }
    }

    fn grad(&self, x: &Tensor<T>, t: usize, ys: &[usize]) -> Result<Option<Tensor<T>>> {
        match self.guidance {
            Some(g) if self.scale != 0.0 => {
                let grad = g.log_prob_grad(x, &vec![t; ys.len()], ys)?;
                same_shape(x, &grad, "guidance gradient")?;
                Ok(Some(grad))
            }
            _ => Ok(None),
        }
    }
}

/// One ancestral step x_t → x_{t−1} for a batch sharing timestep `t`.
/// `noise` is required unless `t = 0`, where the guided mean is returned.
pub fn ddpm_step<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    ys: &[usize],
    models: &StepModels<'_, T>,
    sched: &NoiseSchedule,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    check_batch(x_t, ys, models.denoiser.class_count())?;
    let eps = models.eps(x_t, t, ys, sched)?;
    let (mean, _) = posterior_params(x_t, &eps, t, sched)?;
    let var = sched.variance(t, models.variance);
    let mean = match models.grad(x_t, t, ys)? {
        Some(g) => apply_guidance(&mean, var, &g, models.scale)?,
        None => mean,
    };
    if t == 0 {
        return Ok(mean);
    }
    let z = noise.ok_or_else(|| SamplerError::InvalidConfig(format!("noise required at t = {t}")))?;
    same_shape(&mean, z, "ddpm noise")?;
    let sd = T::of(var.sqrt());
    Ok(mean.zip_map(z, |m, z| m + sd * z).expect("shapes checked"))
}

/// σ for a DDIM transition; `t_to = None` is the clean endpoint.
pub fn ddim_sigma(sched: &NoiseSchedule, t_from: usize, t_to: Option<usize>, eta: f64) -> f64 {
    let ab_from = sched.alpha_bars[t_from];
    let ab_to = t_to.map_or(1.0, |t| sched.alpha_bars[t]);
    let v = (1.0 - ab_to) / (1.0 - ab_from) * (1.0 - ab_from / ab_to);
    eta * v.max(0.0).sqrt()
}

/// Deterministic (η = 0) or stochastic DDIM transition from `t_from` to the
/// earlier `t_to`; `None` means the final clean image. Guidance shifts ε̂ by
/// −√(1−ᾱ)·s·∇.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Scalar>(
    x_t: &Tensor<T>,
    t_from: usize,
    t_to: Option<usize>,
    ys: &[usize],
    models: &StepModels<'_, T>,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    sched.check_t(t_from)?;
    if let Some(to) = t_to {
        sched.check_t(to)?;
        if to >= t_from {
            return Err(SamplerError::TimestepOrder { from: t_from, to });
        }
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(SamplerError::InvalidConfig(format!("ddim_eta {eta} outside [0, 1]")));
    }
    check_batch(x_t, ys, models.denoiser.class_count())?;
    let mut eps = models.eps(x_t, t_from, ys, sched)?;
    let ab_from = sched.alpha_bars[t_from];
    if let Some(g) = models.grad(x_t, t_from, ys)? {
        let k = T::of((1.0 - ab_from).sqrt() * models.scale);
        eps = eps.zip_map(&g, |e, g| e - k * g).expect("shapes checked");
    }
    let x0 = predict_x0_from_eps(x_t, &eps, t_from, sched, models.clamp_x0)?;
    let ab_to = t_to.map_or(1.0, |t| sched.alpha_bars[t]);
    let sigma = ddim_sigma(sched, t_from, t_to, eta);
    let (a, b) = (T::of(ab_to.sqrt()), T::of((1.0 - ab_to - sigma * sigma).max(0.0).sqrt()));
    let mut out = x0.zip_map(&eps, |x0, e| a * x0 + b * e).expect("shapes checked");
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| SamplerError::InvalidConfig("noise required for eta > 0".into()))?;
        same_shape(&out, z, "ddim noise")?;
        let s = T::of(sigma);
        out = out.zip_map(z, |o, z| o + s * z).expect("shapes checked");
    }
    Ok(out)
}

/// Uniformly strided subset of `0..timesteps` with `steps` entries,
/// ascending, always starting at 0.
pub fn sampling_timesteps(timesteps: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, timesteps.max(1));
    (0..steps).map(|i| i * timesteps / steps).collect()
}

/// Noise stream of one sample: independent of batch composition.
pub fn sample_rng(seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_index);
    rng
}

fn draw<T: Scalar>(rngs: &mut [ChaCha8Rng], per: usize, shape: &[usize]) -> Tensor<T> {
    let mut data = Vec::with_capacity(rngs.len() * per);
    for r in rngs.iter_mut() {
        data.extend((0..per).map(|_| {
            let z: f64 = StandardNormal.sample(r);
            T::of(z)
        }));
    }
    Tensor::new(shape, data).expect("shape matches")
}

/// [`generate_with`] without step tracing.
pub fn generate<T: Scalar>(
    labels: &[usize],
    cfg: &SamplerConfig,
    denoiser: &dyn EpsModel<T>,
    guidance: Option<&dyn GuidanceGrad<T>>,
    sched: &NoiseSchedule,
    image_size: usize,
    seed: u64,
) -> Result<Vec<SyntheticSampleRecord<T>>> {
    generate_with(labels, cfg, denoiser, guidance, sched, image_size, seed, &|_| {})
}

/// Generates one sample per label. `on_step` receives every full-schedule
/// timestep at which the denoiser is evaluated (once per batch).
#[allow(clippy::too_many_arguments)]
pub fn generate_with<T: Scalar>(
    labels: &[usize],
    cfg: &SamplerConfig,
    denoiser: &dyn EpsModel<T>,
    guidance: Option<&dyn GuidanceGrad<T>>,
    sched: &NoiseSchedule,
    image_size: usize,
    seed: u64,
    on_step: &(dyn Fn(usize) + Sync),
) -> Result<Vec<SyntheticSampleRecord<T>>> {
    cfg.validate(sched.len())?;
    let k = denoiser.class_count();
    if let Some(&c) = labels.iter().find(|&&c| c >= k) {
        return Err(SamplerError::ClassOutOfRange { class: c, count: k });
    }
    let steps = cfg.effective_steps(sched.len());
    let plan = sampling_timesteps(sched.len(), steps);
    let respaced = if plan.len() < sched.len() { Some(sched.respace(&plan)?) } else { None };
    let per = image_size * image_size;

    let chunks: Vec<(usize, &[usize])> =
        labels.chunks(cfg.batch_size).enumerate().map(|(i, c)| (i * cfg.batch_size, c)).collect();
    let batches: Vec<Vec<SyntheticSampleRecord<T>>> = chunks
        .par_iter()
        .map(|&(offset, ys)| -> Result<Vec<SyntheticSampleRecord<T>>> {
            let n = ys.len();
            let shape = [n, 1, image_size, image_size];
            let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| sample_rng(seed, (offset + i) as u64)).collect();
            let mut x = draw::<T>(&mut rngs, per, &shape);
            match cfg.method {
                SamplingMethod::Ddpm => {
                    let den_r;
                    let gui_r;
                    let (den, gui, s): (&dyn EpsModel<T>, Option<&dyn GuidanceGrad<T>>, &NoiseSchedule) =
                        match &respaced {
                            Some(rs) => {
                                den_r = Respaced { inner: denoiser, map: &plan };
                                gui_r = guidance.map(|g| Respaced { inner: g, map: &plan });
                                (&den_r, gui_r.as_ref().map(|g| g as &dyn GuidanceGrad<T>), rs)
                            }
                            None => (denoiser, guidance, sched),
                        };
                    let models = StepModels {
                        denoiser: den,
                        guidance: gui,
                        scale: cfg.guidance_scale,
                        variance: cfg.variance,
                        clamp_x0: cfg.clamp_each_step,
                    };
                    for i in (0..plan.len()).rev() {
                        on_step(plan[i]);
                        let z = if i > 0 { Some(draw::<T>(&mut rngs, per, &shape)) } else { None };
                        x = ddpm_step(&x, i, ys, &models, s, z.as_ref())?;
                    }
                }
                SamplingMethod::Ddim => {
                    let models = StepModels {
                        denoiser,
                        guidance,
                        scale: cfg.guidance_scale,
                        variance: cfg.variance,
                        clamp_x0: cfg.clamp_each_step,
                    };
                    for i in (0..plan.len()).rev() {
                        on_step(plan[i]);
                        let to = if i > 0 { Some(plan[i - 1]) } else { None };
                        let z = if cfg.ddim_eta > 0.0 && to.is_some() {
                            Some(draw::<T>(&mut rngs, per, &shape))
                        } else {
                            None
                        };
                        x = ddim_step(&x, plan[i], to, ys, &models, sched, cfg.ddim_eta, z.as_ref())?;
                    }
                }
            }
            let x = x.clamp(-T::one(), T::one());
            ys.iter()
                .enumerate()
                .map(|(i, &y)| {
                    let img = x.narrow0(i, 1).and_then(|t| t.reshape(&[1, image_size, image_size]));
                    let img = img.map_err(|e| SamplerError::Model(e.into()))?;
                    Ok(SyntheticSampleRecord {
                        image: PixelTensor::new(img).map_err(SamplerError::ShapeMismatch)?,
                        intended_class: y,
                        guidance_scale: cfg.guidance_scale,
                        steps,
                        seed,
                        sample_index: (offset + i) as u64,
                        path: None,
                        confidences: BTreeMap::new(),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// One JSON line of a sample sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarEntry {
    pub path: PathBuf,
    pub intended_class: usize,
    pub guidance_scale: f64,
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub sample_index: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub confidences: BTreeMap<String, SampleConfidence>,
}

impl<T> SyntheticSampleRecord<T> {
    /// Sidecar line with the path made relative to `base` when possible.
    pub fn sidecar_entry(&self, base: &Path) -> Option<SidecarEntry> {
        let path = self.path.as_ref()?;
        let rel = path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.clone());
        Some(SidecarEntry {
            path: rel,
            intended_class: self.intended_class,
            guidance_scale: self.guidance_scale,
            steps: self.steps,
            seed: self.seed,
            sample_index: self.sample_index,
            confidences: self.confidences.clone(),
        })
    }
}

/// Writes each record as an 8-bit PNG under `image_dir` and sets its path.
pub fn write_sample_images<T: Scalar>(records: &mut [SyntheticSampleRecord<T>], image_dir: &Path) -> Result<()> {
    fs::create_dir_all(image_dir)?;
    records.par_iter_mut().try_for_each(|r| -> Result<()> {
        let path = image_dir.join(format!("sample_{:06}_class{}.png", r.sample_index, r.intended_class));
        r.image
            .to_gray_image()
            .save(&path)
            .map_err(|e| SamplerError::Image { path: path.clone(), msg: e.to_string() })?;
        r.path = Some(path);
        Ok(())
    })
}

/// Writes a JSON-lines sidecar; every record must already have a path.
pub fn write_sidecar<T>(records: &[SyntheticSampleRecord<T>], path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        let e = r.sidecar_entry(base).ok_or(DatasetError::MissingImagePath(i))?;
        out.push_str(&serde_json::to_string(&e).expect("sidecar entries serialize"));
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Sidecar entries with paths resolved against the sidecar's directory.
pub fn read_sidecar_entries(path: &Path) -> Result<Vec<SidecarEntry>> {
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.to_path_buf()).into());
    }
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: SidecarEntry = serde_json::from_str(&line).map_err(|err| SamplerError::Sidecar {
            path: path.to_path_buf(),
            line: i + 1,
            msg: err.to_string(),
        })?;
        e.path = base.join(&e.path);
        out.push(e);
    }
    Ok(out)
}

/// Loads a sidecar and its images.
pub fn read_sidecar<T: Scalar>(path: &Path, image_size: usize) -> Result<Vec<SyntheticSampleRecord<T>>> {
    read_sidecar_entries(path)?
        .into_par_iter()
        .map(|e| {
            Ok(SyntheticSampleRecord {
                image: load_image(&e.path, image_size)?,
                intended_class: e.intended_class,
                guidance_scale: e.guidance_scale,
                steps: e.steps,
                seed: e.seed,
                sample_index: e.sample_index,
                path: Some(e.path),
                confidences: e.confidences,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{make_schedule, q_sample, ScheduleKind};

    /// Returns a fixed ε regardless of input.
    struct Oracle(Tensor<f64>);

    impl EpsModel<f64> for Oracle {
        fn class_count(&self) -> usize {
            2
        }
        fn predict_eps(&self, _: &Tensor<f64>, _: &[usize], _: &[Option<usize>]) -> Result<Tensor<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn guidance_arithmetic() {
        let m = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let g = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(apply_guidance(&m, 0.5, &g, 3.0).unwrap(), Tensor::full(&[1, 1, 2, 2], 1.5));
        assert!(matches!(apply_guidance(&m, 0.5, &Tensor::zeros(&[4]), 1.0), Err(SamplerError::ShapeMismatch(_))));
    }

    #[test]
    fn strided_plan() {
        assert_eq!(sampling_timesteps(10, 5), vec![0, 2, 4, 6, 8]);
        assert_eq!(sampling_timesteps(4, 4), vec![0, 1, 2, 3]);
        assert_eq!(sampling_timesteps(200, 50).len(), 50);
    }

    #[test]
    fn ddim_rejects_forward_steps() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let o = Oracle(x.clone());
        let m = StepModels::unguided(&o);
        assert!(matches!(
            ddim_step(&x, 4, Some(4), &[0], &m, &s, 0.0, None),
            Err(SamplerError::TimestepOrder { from: 4, to: 4 })
        ));
    }

    #[test]
    fn ddim_to_clean_recovers_x0() {
        let s = make_schedule(ScheduleKind::Cosine, 50, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::<f64>::randn(&[1, 1, 3, 3], &mut rng);
        let eps = Tensor::<f64>::randn(&[1, 1, 3, 3], &mut rng);
        let xt = q_sample(&x0, 30, &eps, &s).unwrap();
        let o = Oracle(eps);
        let out = ddim_step(&xt, 30, None, &[1], &StepModels::unguided(&o), &s, 0.0, None).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-10);
    }
}
