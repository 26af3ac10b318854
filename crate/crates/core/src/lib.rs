//! Confidence-guided diffusion augmentation for small grayscale character
//! images: a class-conditional denoiser with an SE-ResNet U-Net, classifier
//! guided sampling, a confidence gate over synthetic samples, and the
//! classification and Fréchet metrics used to judge the result.
//!
//! Models are generic over the scalar type; [`f32`] aliases are provided
//! for training and [`f64`] aliases for numerical checks.

pub mod backbone;
pub mod blocks;
pub mod classifiers;
pub mod dataset;
pub mod filtering;
pub mod glyphs;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod training;

pub use confaug_nn as nn;

pub use backbone::{BackboneConfig, Denoiser};
pub use classifiers::{DepthPreset, DownstreamModel, DownstreamModelSpec, Family, GuidanceClassifier, Prediction};
pub use dataset::{DatasetManifest, PixelTensor, Split};
pub use filtering::{FilterOptions, FilterReport};
pub use metrics::{EvalReport, FrechetStats};
pub use sampler::{SamplerConfig, SyntheticSampleRecord};
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use training::{RunLog, TrainConfig};

pub type DenoiserF32 = Denoiser<f32>;
pub type DenoiserF64 = Denoiser<f64>;
pub type GuidanceClassifierF32 = GuidanceClassifier<f32>;
pub type GuidanceClassifierF64 = GuidanceClassifier<f64>;
pub type DownstreamModelF32 = DownstreamModel<f32>;
pub type DownstreamModelF64 = DownstreamModel<f64>;
pub type SampleRecord = SyntheticSampleRecord<f32>;
pub type Pixels = PixelTensor<f32>;

/// Any failure surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Schedule(#[from] schedule::ScheduleError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Sampler(#[from] sampler::SamplerError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Filter(#[from] filtering::FilterError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Nn(#[from] confaug_nn::NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
