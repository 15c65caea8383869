use synthkd::data::DataError;
use synthkd::diffusion::DiffusionError;
use synthkd::distill::DistillError;
use synthkd::metrics::MetricsError;
use synthkd::nets::NetError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::NonFiniteLoss { .. }
            | DiffusionError::NonFinite { .. }
            | DiffusionError::SamplingFailed { .. } => CliError::Numerical(e.to_string()),
            DiffusionError::InvalidConfig(_)
            | DiffusionError::InvalidGuidance(_)
            | DiffusionError::InvalidSchedule(_)
            | DiffusionError::TimestepOutOfRange { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::NonFiniteLoss { .. } | DistillError::NonFiniteLogits { .. } => {
                CliError::Numerical(e.to_string())
            }
            DistillError::InvalidConfig(_) | DistillError::BadTemperature(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
