//! Risk annotation toolchain: grounding detections, prompt rendering, parsing
//! and checking of the language model's rank-keyed output, semantic masks and
//! a fixture replay client.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod mask;
pub mod relaxed;
pub mod vg;
pub mod vlm;

pub use mask::draw_semantic_mask;
pub use relaxed::SyntaxError;
pub use vg::{parse_vg, render_prompt, PromptBundle, VgDetection};
pub use vlm::{
    check_bbox_bounds, check_rank_score_consistency, parse_vlm_output, parse_vlm_output_with, serialize,
    AnnotationWarning, ParsedAnnotations, RiskAnnotationEntry, RiskLevel, Vocabulary,
};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("syntax error: {0}")]
    Syntax(#[from] SyntaxError),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid `{field}`: {reason}")]
    InvalidField { field: String, reason: String },
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("no fixture for frame `{frame}` in {dir}")]
    NotFound { frame: String, dir: PathBuf },
    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AnnotationError>;

/// Recorded grounding/language-model responses, `<frame>.vg.json` and
/// `<frame>.vlm.json` in one directory. Returned verbatim; parsing is the
/// caller's business.
#[derive(Clone, Debug)]
pub struct ReplayClient {
    dir: PathBuf,
}

impl ReplayClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn read(&self, frame: &str, suffix: &str) -> Result<String> {
        let path = self.dir.join(format!("{frame}.{suffix}.json"));
        match std::fs::read_to_string(&path) {
            Ok(text) => Ok(text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(AnnotationError::NotFound {
                frame: frame.to_string(),
                dir: self.dir.clone(),
            }),
            Err(source) => Err(AnnotationError::Read { path, source }),
        }
    }

    pub fn grounding(&self, frame: &str) -> Result<String> {
        self.read(frame, "vg")
    }

    pub fn language(&self, frame: &str) -> Result<String> {
        self.read(frame, "vlm")
    }

    pub fn fetch(&self, frame: &str) -> Result<(String, String)> {
        Ok((self.grounding(frame)?, self.language(frame)?))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
