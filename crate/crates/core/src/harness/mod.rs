//! End-to-end harness: configuration, synthetic scenes and the staged
//! pipeline behind the `rsd` binary.

pub mod config;
pub mod pipeline;
pub mod scene;

use std::fmt;

use thiserror::Error;

use crate::annotation::AnnotationError;
use crate::geometry::GeometryError;
use crate::io::IoError;
use crate::losses::LossError;
use crate::metrics::MetricError;
use crate::rebatch::RebatchError;
use crate::riskhead::gradcheck::GradcheckError;
use crate::riskhead::RiskHeadError;

pub use config::RunConfig;
pub use pipeline::{run_pipeline, RunArtifacts};
pub use scene::{gen_scene, write_scene, SyntheticScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Geometry,
    Rebatch,
    RiskHead,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Geometry => "geometry",
            Stage::Rebatch => "rebatch",
            Stage::RiskHead => "riskhead",
            Stage::Eval => "eval",
        })
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Rebatch(#[from] RebatchError),
    #[error(transparent)]
    RiskHead(#[from] RiskHeadError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Gradcheck(#[from] GradcheckError),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
    #[error("{stage} stage: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<HarnessError>,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn in_stage(self, stage: Stage) -> Self {
        match self {
            already @ HarnessError::Stage { .. } => already,
            other => HarnessError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// The stage that failed, if the error was tagged.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            HarnessError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// Malformed user input (config, files, annotations) rather than an
    /// internal or environmental failure.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::Stage { source, .. } => source.is_validation(),
            HarnessError::Config(_)
            | HarnessError::Input(_)
            | HarnessError::Annotation(_)
            | HarnessError::Geometry(_)
            | HarnessError::Metric(MetricError::InvalidInput(_) | MetricError::DegenerateBox(_)) => true,
            HarnessError::Io(IoError::Json { .. } | IoError::Format { .. } | IoError::MissingTensor(_)) => true,
            HarnessError::Metric(MetricError::Io(IoError::Json { .. } | IoError::Format { .. })) => true,
            _ => false,
        }
    }
}
