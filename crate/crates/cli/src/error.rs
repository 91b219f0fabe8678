use signpatch::adapters::AdapterError;
use signpatch::camera::CameraError;
use signpatch::compositor::CompositorError;
use signpatch::evalsim::EvalError;
use signpatch::optimizer::OptimizerError;
use signpatch::raster::RasterError;
use signpatch::report::ReportError;

/// Failure classes, each with its own process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("report precondition failed: {0}")]
    Precondition(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Capability(_) => 4,
            CliError::Precondition(_) => 5,
        }
    }
}

impl From<CameraError> for CliError {
    fn from(e: CameraError) -> Self {
        match e {
            CameraError::Parse { .. } | CameraError::Validation(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::NoGradientSupport => CliError::Capability(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CompositorError> for CliError {
    fn from(e: CompositorError) -> Self {
        match e {
            CompositorError::InvalidConfig(_) | CompositorError::ConfigInfeasible { .. } => {
                CliError::Config(e.to_string())
            }
            CompositorError::Camera(c) => c.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<OptimizerError> for CliError {
    fn from(e: OptimizerError) -> Self {
        match e {
            OptimizerError::NoGradientSupport(_) => CliError::Capability(e.to_string()),
            OptimizerError::Adapter(a) => a.into(),
            OptimizerError::InvalidConfig(_) | OptimizerError::CheckpointMismatch(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(_) => CliError::Config(e.to_string()),
            EvalError::Camera(c) => c.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::MissingCleanBaseline { .. } | ReportError::InsufficientData(_) => {
                CliError::Precondition(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
