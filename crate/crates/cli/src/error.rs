use prunekit::dataset::DatasetError;
use prunekit::engine::EngineError;
use prunekit::features::FeatureError;
use prunekit::lassopath::LassoError;
use prunekit::netir::NetError;
use prunekit::probe::ProbeError;
use prunekit::pruner::PruneError;
use prunekit::synthfaces::{PrimaryError, SynthError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::UnknownLayer(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::UnknownColumn(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            EngineError::Net(n) => n.into(),
            EngineError::UnknownFrozen(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::Engine(x) => x.into(),
            FeatureError::Net(x) => x.into(),
            FeatureError::NotFilterLayer(_) => CliError::Config(e.to_string()),
            FeatureError::Degenerate(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Feature(x) => x.into(),
            ProbeError::Engine(x) => x.into(),
            ProbeError::Net(x) => x.into(),
            ProbeError::ConstantTarget(_) => CliError::Numerical(e.to_string()),
            ProbeError::Format(_) | ProbeError::Dimension { .. } => CliError::Input(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<LassoError> for CliError {
    fn from(e: LassoError) -> Self {
        match e {
            LassoError::ConstantTarget => CliError::Numerical(e.to_string()),
            LassoError::Io(_) | LassoError::Csv(_) => CliError::Input(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PruneError> for CliError {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::Net(x) => x.into(),
            PruneError::Engine(x) => x.into(),
            PruneError::Feature(x) => x.into(),
            PruneError::Probe(x) => x.into(),
            PruneError::Lasso(x) => x.into(),
            PruneError::Other(_) => CliError::Numerical(e.to_string()),
            PruneError::Convention { .. } => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Spec(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<PrimaryError> for CliError {
    fn from(e: PrimaryError) -> Self {
        match e {
            PrimaryError::Dataset(x) => x.into(),
            PrimaryError::Net(x) => x.into(),
            PrimaryError::Engine(x) => x.into(),
            PrimaryError::NotClasses(_) => CliError::Config(e.to_string()),
            PrimaryError::NotConverged { .. } => CliError::Numerical(e.to_string()),
        }
    }
}
