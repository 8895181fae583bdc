use std::path::PathBuf;

use fire_core::llm::GatewayError;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("stage {stage} depends on {upstream}, which is out of date; re-run {upstream} or pass --force")]
    Stale { stage: &'static str, upstream: &'static str },
    #[error("stage {stage} needs {missing}; run stage {upstream} first")]
    MissingUpstream {
        stage: &'static str,
        upstream: &'static str,
        missing: PathBuf,
    },
    #[error("external service failure: {0}")]
    External(String),
    #[error("{} is held by another run; delete it if no run is active", .0.display())]
    Locked(PathBuf),
    #[error("{0}")]
    Other(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Stale { .. } => 3,
            RunError::External(_) => 4,
            RunError::MissingUpstream { .. } | RunError::Locked(_) | RunError::Other(_) => 1,
        }
    }
}

impl From<GatewayError> for RunError {
    fn from(e: GatewayError) -> Self {
        if e.is_systemic() {
            RunError::External(e.to_string())
        } else {
            RunError::Other(e.to_string())
        }
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Other(e.to_string())
    }
}

/// Routes errors that wrap a gateway failure to `External`.
macro_rules! via_gateway {
    ($($ty:path => $variant:ident),* $(,)?) => {$(
        impl From<$ty> for RunError {
            fn from(e: $ty) -> Self {
                type E = $ty;
                match e {
                    E::$variant(g) => g.into(),
                    other => RunError::Other(other.to_string()),
                }
            }
        }
    )*};
}

via_gateway!(
    fire_core::extraction::ExtractionError => Gateway,
    fire_core::explainer::ExplainError => Gateway,
    fire_core::evaluation::EvalError => Gateway,
    fire_core::featurization::FeatureError => Gateway,
);

macro_rules! as_other {
    ($($ty:path),* $(,)?) => {$(
        impl From<$ty> for RunError {
            fn from(e: $ty) -> Self {
                RunError::Other(e.to_string())
            }
        }
    )*};
}

as_other!(
    fire_core::corpus::CorpusError,
    fire_core::clustering::ClusterError,
    fire_core::classifier::ClassifierError,
    fire_core::classifier::MetricError,
    fire_core::attribution::AttributionError,
    fire_core::prompts::PromptError,
    serde_json::Error,
);
