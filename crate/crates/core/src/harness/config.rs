use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::annotation::Vocabulary;
use crate::geometry::{BevGrid, PointCloudRange, DEFAULT_DEPTH_EPS};
use crate::losses::{LossTerms, LossWeights};
use crate::metrics::{DiffRiskMode, EvalOptions, ScaleErrorMode, PLANNING_HZ};
use crate::riskhead::{DEFAULT_OFFSET_SCALE, DEFAULT_PV_HEIGHT, DEFAULT_PV_VIEWS, DEFAULT_PV_WIDTH, DEFAULT_RISK_THRESHOLD};

/// BEV lattice and volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    /// Pillar heights `D`.
    pub z_samples: usize,
    pub range: PointCloudRange,
    pub depth_eps: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rows: 100,
            cols: 100,
            z_samples: 4,
            range: PointCloudRange::default(),
            depth_eps: DEFAULT_DEPTH_EPS,
        }
    }
}

impl GridConfig {
    pub fn bev_grid(&self) -> Result<BevGrid> {
        Ok(BevGrid::new(self.rows, self.cols, self.z_samples, self.range)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d` of BEV and PV queries.
    pub dim: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub offset_scale: f64,
    /// Reference points per PV query; defaults to `grid.z_samples`.
    pub n_ref: Option<usize>,
    pub pv_views: usize,
    pub pv_height: usize,
    pub pv_width: usize,
    pub risk_threshold: f64,
    /// Decoder gain on the risk channel (feature 0).
    pub decoder_gain: f64,
    pub decoder_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n_heads: 1,
            n_points: 4,
            offset_scale: DEFAULT_OFFSET_SCALE,
            n_ref: None,
            pv_views: DEFAULT_PV_VIEWS,
            pv_height: DEFAULT_PV_HEIGHT,
            pv_width: DEFAULT_PV_WIDTH,
            risk_threshold: DEFAULT_RISK_THRESHOLD,
            decoder_gain: 12.0,
            decoder_bias: -4.0,
        }
    }
}

/// Loss weights plus the six externally supplied planner terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_map: f64,
    pub w_mot: f64,
    pub w_col: f64,
    pub w_bd: f64,
    pub w_dir: f64,
    pub w_limi: f64,
    pub w_risk: f64,
    pub planner_terms: PlannerTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::from_weights(&LossWeights::default())
    }
}

impl LossConfig {
    pub fn from_weights(w: &LossWeights) -> Self {
        Self {
            w_map: w.w_map,
            w_mot: w.w_mot,
            w_col: w.w_col,
            w_bd: w.w_bd,
            w_dir: w.w_dir,
            w_limi: w.w_limi,
            w_risk: w.w_risk,
            planner_terms: PlannerTerms::default(),
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights::from_array([self.w_map, self.w_mot, self.w_col, self.w_bd, self.w_dir, self.w_limi, self.w_risk])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerTerms {
    pub map: f64,
    pub mot: f64,
    pub col: f64,
    pub bd: f64,
    pub dir: f64,
    pub limi: f64,
}

impl PlannerTerms {
    pub fn with_risk(&self, risk: f64) -> LossTerms {
        LossTerms::from_array([self.map, self.mot, self.col, self.bd, self.dir, self.limi, risk])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub diff_risk: DiffRiskMode,
    pub scale_error: ScaleErrorMode,
    pub planning_hz: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            diff_risk: DiffRiskMode::Frobenius,
            scale_error: ScaleErrorMode::SizeIou,
            planning_hz: PLANNING_HZ,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            diff_risk: self.diff_risk,
            scale_error: self.scale_error,
            planning_hz: self.planning_hz,
        }
    }
}

/// Categories added to (or overriding) the built-in annotation vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationConfig {
    pub categories: BTreeMap<String, i64>,
}

impl AnnotationConfig {
    pub fn vocabulary(&self) -> Vocabulary {
        let mut v = Vocabulary::default();
        for (name, id) in &self.categories {
            v.insert(name, *id);
        }
        v
    }
}

/// Which intermediate artifacts a run writes beyond the report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpConfig {
    pub mask_pgm: bool,
    pub indices: bool,
    pub risk_maps: bool,
}

impl Default for DumpConfig {
    fn default() -> Self {
        Self {
            mask_pgm: false,
            indices: true,
            risk_maps: true,
        }
    }
}

/// Full run configuration, read from TOML. Every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Parameter bundle for the risk head; initialized from `seed` when absent.
    pub params: Option<std::path::PathBuf>,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub annotation: AnnotationConfig,
    pub dump: DumpConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            params: None,
            grid: GridConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            annotation: AnnotationConfig::default(),
            dump: DumpConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Reference points per PV query after defaulting.
    pub fn n_ref(&self) -> usize {
        self.model.n_ref.unwrap_or(self.grid.z_samples)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.grid.bev_grid().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.grid.depth_eps.is_finite() && self.grid.depth_eps > 0.0) {
            return bad(format!("grid.depth_eps must be positive, got {}", self.grid.depth_eps));
        }
        let m = &self.model;
        if m.dim == 0 || m.n_heads == 0 || m.n_points == 0 || !m.dim.is_multiple_of(m.n_heads) {
            return bad(format!(
                "model.dim ({}) must be a positive multiple of model.n_heads ({}); n_points ({}) must be positive",
                m.dim, m.n_heads, m.n_points
            ));
        }
        if m.dim < 2 {
            return bad("model.dim must be at least 2 (risk and occupancy channels)".into());
        }
        if m.n_ref == Some(0) {
            return bad("model.n_ref must be at least 1".into());
        }
        if m.pv_views == 0 || m.pv_height == 0 || m.pv_width == 0 {
            return bad("PV grid dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&m.risk_threshold) {
            return bad(format!("model.risk_threshold must be in [0, 1), got {}", m.risk_threshold));
        }
        for (k, v) in [
            ("model.offset_scale", m.offset_scale),
            ("model.decoder_gain", m.decoder_gain),
            ("model.decoder_bias", m.decoder_bias),
        ] {
            if !v.is_finite() {
                return bad(format!("{k} must be finite"));
            }
        }
        self.loss
            .weights()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.eval.planning_hz.is_finite() && self.eval.planning_hz > 0.0) {
            return bad("eval.planning_hz must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.grid.rows, cfg.grid.cols, cfg.grid.z_samples), (100, 100, 4));
        assert_eq!((cfg.model.pv_views, cfg.model.pv_height, cfg.model.pv_width), (6, 80, 45));
        assert_eq!((cfg.model.n_heads, cfg.model.n_points, cfg.n_ref()), (1, 4, 4));
    }

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_override() {
        let cfg = RunConfig::from_toml("seed = 3\n[grid]\nz_samples = 1\n[loss]\nw_risk = 2.5\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.grid.z_samples, 1);
        assert_eq!(cfg.grid.rows, 100);
        assert_eq!(cfg.loss.w_risk, 2.5);
        assert_eq!(cfg.loss.w_map, 1.0);
        assert_eq!(cfg.n_ref(), 1);
    }

    #[test]
    fn vocabulary_extends_from_config() {
        let cfg = RunConfig::from_toml("[annotation.categories]
truck = 4
car = 7
").unwrap();
        let v = cfg.annotation.vocabulary();
        assert_eq!(v.id("truck"), Some(4));
        assert_eq!(v.id("car"), Some(7));
        assert_eq!(v.id("bus"), Some(1));
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "[model]\ndim = 30\nn_heads = 4",
            "[grid]\nrows = 0",
            "[loss]\nw_col = -1.0",
            "[model]\nrisk_threshold = 1.5",
            "[model]\nn_ref = 0",
            "[grid]\ndepth_eps = 0.0",
            "unknown = 1",
            "[grid]\nrange = { x_min = 1.0, x_max = 0.0, y_min = 0.0, y_max = 1.0, z_min = 0.0, z_max = 1.0 }",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(HarnessError::Config(_))), "{text}");
        }
    }
}
