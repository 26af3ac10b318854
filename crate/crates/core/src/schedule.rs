//! Noise schedules and the closed-form pieces of forward and reverse
//! diffusion.
//!
//! Timesteps are 0-indexed. `alpha_bars[t]` is the cumulative product of
//! `alphas[0..=t]`, and the "previous" cumulative product at `t = 0` is taken
//! to be 1, which makes the posterior variance at the first step exactly 0.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use confaug_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule range: {0}")]
    InvalidRange(String),
    #[error("timestep count must be positive")]
    NonPositiveT,
    #[error("timestep {t} out of range for a {len}-step schedule")]
    TimestepOutOfRange { t: usize, len: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("schedule config: {0}")]
    Config(String),
}

pub type Result<T, E = ScheduleError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = ScheduleError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(ScheduleError::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Which per-step variance the reverse process uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceKind {
    Beta,
    #[default]
    Posterior,
}

const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub posterior_variances: Vec<f64>,
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(ScheduleError::NonPositiveT);
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
                return Err(ScheduleError::InvalidRange(format!(
                    "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
                )));
            }
            if steps == 1 {
                vec![beta_start]
            } else {
                let span = (steps - 1) as f64;
                (0..steps)
                    .map(|t| {
                        if t == steps - 1 {
                            beta_end
                        } else {
                            beta_start + (beta_end - beta_start) * (t as f64 / span)
                        }
                    })
                    .collect()
            }
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let a = ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
                a.cos().powi(2)
            };
            let f0 = f(0.0);
            (0..steps)
                .map(|t| {
                    let prev = f(t as f64) / f0;
                    let next = f((t + 1) as f64) / f0;
                    (1.0 - next / prev).min(COSINE_MAX_BETA)
                })
                .collect()
        }
    };
    let mut s = NoiseSchedule::from_betas(betas)?;
    s.kind = kind;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    Ok(s)
}

impl NoiseSchedule {
    /// Builds every derived array from raw betas. The result is tagged as a
    /// linear schedule with the first and last beta as its endpoints.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(ScheduleError::NonPositiveT);
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(ScheduleError::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = (0..betas.len())
            .map(|t| {
                let prev = if t == 0 { 1.0 } else { alpha_bars[t - 1] };
                betas[t] * (1.0 - prev) / (1.0 - alpha_bars[t])
            })
            .collect();
        Ok(Self {
            kind: ScheduleKind::Linear,
            beta_start: betas[0],
            beta_end: *betas.last().unwrap(),
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
        })
    }

    /// Number of timesteps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(ScheduleError::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    /// ᾱ at the previous step, 1 at t = 0.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn variance(&self, t: usize, kind: VarianceKind) -> f64 {
        match kind {
            VarianceKind::Beta => self.betas[t],
            VarianceKind::Posterior => self.posterior_variances[t],
        }
    }

    /// Signal-to-noise ratio ᾱ/(1-ᾱ).
    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bars[t] / (1.0 - self.alpha_bars[t])
    }

    /// SHA-256 over the little-endian bytes of the betas, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.betas {
            h.update(b.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Schedule over a subset of timesteps whose cumulative products agree
    /// with this one at the kept steps. `timesteps` must be strictly
    /// increasing.
    pub fn respace(&self, timesteps: &[usize]) -> Result<NoiseSchedule> {
        let mut prev_bar = 1.0;
        let mut last: Option<usize> = None;
        let mut betas = Vec::with_capacity(timesteps.len());
        for &t in timesteps {
            self.check_t(t)?;
            if last.is_some_and(|l| t <= l) {
                return Err(ScheduleError::InvalidRange("respaced timesteps must increase".into()));
            }
            betas.push(1.0 - self.alpha_bars[t] / prev_bar);
            prev_bar = self.alpha_bars[t];
            last = Some(t);
        }
        NoiseSchedule::from_betas(betas)
    }

    /// Flat key-value form stored in checkpoints.
    pub fn to_config(&self, prefix: &str) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert(format!("{prefix}kind"), self.kind.to_string());
        m.insert(format!("{prefix}timesteps"), self.len().to_string());
        m.insert(format!("{prefix}beta_start"), format!("{:?}", self.beta_start));
        m.insert(format!("{prefix}beta_end"), format!("{:?}", self.beta_end));
        m.insert(format!("{prefix}betas_sha256"), self.checksum());
        m
    }

    /// Rebuilds a schedule from [`NoiseSchedule::to_config`] output and
    /// verifies the stored betas checksum.
    pub fn from_config(m: &BTreeMap<String, String>, prefix: &str) -> Result<Self> {
        let get = |k: &str| {
            m.get(&format!("{prefix}{k}"))
                .ok_or_else(|| ScheduleError::Config(format!("missing `{prefix}{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| ScheduleError::Config(format!("bad number for `{prefix}{k}`")))
        };
        let kind: ScheduleKind = get("kind")?.parse()?;
        let steps: usize =
            get("timesteps")?.parse().map_err(|_| ScheduleError::Config("bad timestep count".into()))?;
        let s = make_schedule(kind, steps, num("beta_start")?, num("beta_end")?)?;
        if &s.checksum() != get("betas_sha256")? {
            return Err(ScheduleError::Config("betas checksum does not match the recomputed schedule".into()));
        }
        Ok(s)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(ScheduleError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε
pub fn q_sample<T: Scalar>(x0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    same_shape(x0, eps, "q_sample")?;
    let ab = sched.alpha_bars[t];
    let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e).expect("shapes checked"))
}

/// [`q_sample`] with one timestep per leading-axis item.
pub fn q_sample_batch<T: Scalar>(
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    same_shape(x0, eps, "q_sample_batch")?;
    if x0.rank() == 0 || x0.dim(0) != ts.len() {
        return Err(ScheduleError::ShapeMismatch(format!("{} timesteps for batch {:?}", ts.len(), x0.shape())));
    }
    let per = x0.numel() / ts.len().max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        sched.check_t(t)?;
        let ab = sched.alpha_bars[t];
        let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Ok(Tensor::new(x0.shape(), out).expect("same numel"))
}

/// Reverse-posterior mean μ = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t and the
/// posterior variance σ̃²_t.
pub fn posterior_params<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(Tensor<T>, f64)> {
    sched.check_t(t)?;
    same_shape(x_t, eps_hat, "posterior_params")?;
    let inv_sqrt_alpha = 1.0 / sched.alphas[t].sqrt();
    let coef = sched.betas[t] / (1.0 - sched.alpha_bars[t]).sqrt();
    let (a, c) = (T::of(inv_sqrt_alpha), T::of(inv_sqrt_alpha * coef));
    let mean = x_t.zip_map(eps_hat, |x, e| a * x - c * e).expect("shapes checked");
    Ok((mean, sched.posterior_variances[t]))
}

/// x̂₀ = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t, optionally clamped to [-1, 1].
pub fn predict_x0_from_eps<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    clamp: bool,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    same_shape(x_t, eps_hat, "predict_x0_from_eps")?;
    let ab = sched.alpha_bars[t];
    let (a, b) = (T::of(1.0 / ab.sqrt()), T::of((1.0 - ab).sqrt() / ab.sqrt()));
    let x0 = x_t.zip_map(eps_hat, |x, e| a * x - b * e).expect("shapes checked");
    Ok(if clamp { x0.clamp(-T::one(), T::one()) } else { x0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_linear() {
        let s = make_schedule(ScheduleKind::Linear, 1, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas, vec![1e-4]);
        assert_eq!(s.alpha_bars, vec![1.0 - 1e-4]);
        assert_eq!(s.posterior_variances, vec![0.0]);
    }

    #[test]
    fn linear_endpoints_are_exact() {
        let s = make_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas[0], 1e-4);
        assert_eq!(s.betas[999], 0.02);
        assert_eq!(s.alpha_bars[0], s.alphas[0]);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert_eq!(make_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02), Err(ScheduleError::NonPositiveT));
        assert!(matches!(make_schedule(ScheduleKind::Linear, 10, 0.02, 1e-4), Err(ScheduleError::InvalidRange(_))));
        assert!(matches!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.02), Err(ScheduleError::InvalidRange(_))));
        assert!(matches!(make_schedule(ScheduleKind::Linear, 10, 1e-4, 1.0), Err(ScheduleError::InvalidRange(_))));
    }

    #[test]
    fn cosine_betas_are_clamped() {
        let s = make_schedule(ScheduleKind::Cosine, 1000, 0.0, 0.0).unwrap();
        assert!(s.betas.iter().all(|&b| b > 0.0 && b <= COSINE_MAX_BETA));
        assert_eq!(*s.betas.last().unwrap(), COSINE_MAX_BETA);
    }

    #[test]
    fn respacing_keeps_cumulative_products() {
        let s = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
        let keep = [0, 40, 80, 120, 160, 199];
        let r = s.respace(&keep).unwrap();
        for (i, &t) in keep.iter().enumerate() {
            assert!((r.alpha_bars[i] - s.alpha_bars[t]).abs() < 1e-12);
        }
        assert!(s.respace(&[3, 3]).is_err());
    }

    #[test]
    fn config_round_trip_checks_betas() {
        let s = make_schedule(ScheduleKind::Cosine, 50, 1e-4, 0.02).unwrap();
        let mut cfg = s.to_config("schedule.");
        let back = NoiseSchedule::from_config(&cfg, "schedule.").unwrap();
        assert_eq!(back, s);
        cfg.insert("schedule.betas_sha256".into(), "00".into());
        assert!(NoiseSchedule::from_config(&cfg, "schedule.").is_err());
    }

    #[test]
    fn clamped_reconstruction() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let ab = s.alpha_bars[3];
        let x_t = Tensor::new(&[1], vec![1.7 * ab.sqrt()]).unwrap();
        let eps = Tensor::zeros(&[1]);
        let raw = predict_x0_from_eps(&x_t, &eps, 3, &s, false).unwrap();
        assert!((raw.data()[0] - 1.7f64).abs() < 1e-12);
        assert_eq!(predict_x0_from_eps(&x_t, &eps, 3, &s, true).unwrap().data()[0], 1.0);
    }

    #[test]
    fn timestep_and_shape_errors() {
        let s = make_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        let a = Tensor::<f64>::zeros(&[2]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert_eq!(q_sample(&a, 10, &a, &s), Err(ScheduleError::TimestepOutOfRange { t: 10, len: 10 }));
        assert!(matches!(q_sample(&a, 0, &b, &s), Err(ScheduleError::ShapeMismatch(_))));
        assert!(posterior_params(&a, &b, 1, &s).is_err());
    }
}
