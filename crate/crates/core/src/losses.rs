//! Weighted composition of the planner's training terms plus the L1 risk term.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("risk vectors differ in length: predicted {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("loss term `{name}` must be finite and non-negative, got {value}")]
    InvalidTerm { name: &'static str, value: f64 },
    #[error("loss weight `{name}` must be finite and non-negative, got {value}")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("non-finite risk value at index {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, LossError>;

pub const TERM_NAMES: [&str; 7] = ["map", "mot", "col", "bd", "dir", "limi", "risk"];

/// How the per-object absolute errors of the risk term are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskReduction {
    /// `||pred - gt||_1`
    #[default]
    Sum,
    Mean,
}

/// `L_risk` between aligned predicted and ground-truth risk scores.
pub fn risk_loss(pred: &[f64], gt: &[f64], reduction: RiskReduction) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let mut total = 0.0;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if !(p.is_finite() && g.is_finite()) {
            return Err(LossError::NonFinite(i));
        }
        total += (p - g).abs();
    }
    Ok(match reduction {
        RiskReduction::Sum => total,
        RiskReduction::Mean if pred.is_empty() => 0.0,
        RiskReduction::Mean => total / pred.len() as f64,
    })
}

/// Subgradient of the summed risk loss w.r.t. the prediction (0 at kinks).
pub fn risk_loss_grad(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(LossError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| match p.partial_cmp(g) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => -1.0,
            _ => 0.0,
        })
        .collect())
}

/// Weights `w_map .. w_risk`; all default to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_map: f64,
    pub w_mot: f64,
    pub w_col: f64,
    pub w_bd: f64,
    pub w_dir: f64,
    pub w_limi: f64,
    pub w_risk: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl LossWeights {
    pub fn uniform(w: f64) -> Self {
        Self::from_array([w; 7])
    }

    pub fn from_array(w: [f64; 7]) -> Self {
        Self {
            w_map: w[0],
            w_mot: w[1],
            w_col: w[2],
            w_bd: w[3],
            w_dir: w[4],
            w_limi: w[5],
            w_risk: w[6],
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [
            self.w_map,
            self.w_mot,
            self.w_col,
            self.w_bd,
            self.w_dir,
            self.w_limi,
            self.w_risk,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in TERM_NAMES.iter().zip(self.as_array()) {
            if !(value.is_finite() && value >= 0.0) {
                return Err(LossError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }
}

/// The seven unweighted loss terms. The six planner terms are supplied by
/// the caller.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub map: f64,
    pub mot: f64,
    pub col: f64,
    pub bd: f64,
    pub dir: f64,
    pub limi: f64,
    pub risk: f64,
}

impl LossTerms {
    pub fn from_array(t: [f64; 7]) -> Self {
        Self {
            map: t[0],
            mot: t[1],
            col: t[2],
            bd: t[3],
            dir: t[4],
            limi: t[5],
            risk: t[6],
        }
    }

    pub fn as_array(&self) -> [f64; 7] {
        [self.map, self.mot, self.col, self.bd, self.dir, self.limi, self.risk]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    /// `w_i * term_i`
    pub weighted: LossTerms,
    pub total: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let t = terms.as_array();
    for (name, value) in TERM_NAMES.iter().zip(t) {
        if !(value.is_finite() && value >= 0.0) {
            return Err(LossError::InvalidTerm { name, value });
        }
    }
    let w = weights.as_array();
    let weighted: [f64; 7] = std::array::from_fn(|i| w[i] * t[i]);
    Ok(LossBreakdown {
        terms: *terms,
        weighted: LossTerms::from_array(weighted),
        total: weighted.iter().sum(),
    })
}
