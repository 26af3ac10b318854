#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad command line or configuration; exit code 2.
    #[error("{0}")]
    Usage(String),
    #[error("run directory {0} is in use by another command")]
    Locked(std::path::PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Domain(#[from] confaug::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Locked(_) => "locked",
            CliError::Invalid(_) => "invalid",
            CliError::Domain(_) => "domain",
            CliError::Io(_) => "io",
        }
    }
}

macro_rules! domain_from {
    ($($ty:path),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Domain(e.into())
            }
        }
    )*};
}

domain_from!(
    confaug::dataset::DatasetError,
    confaug::model::ModelError,
    confaug::sampler::SamplerError,
    confaug::training::TrainError,
    confaug::filtering::FilterError,
    confaug::metrics::MetricsError,
    confaug::schedule::ScheduleError,
    confaug::nn::NnError
);
