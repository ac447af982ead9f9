//! Rank-keyed risk annotations produced by the language model.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::{relaxed, AnnotationError, Result};

pub const HIGH_RISK_MIN: f64 = 0.7;
pub const LOW_RISK_MAX: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskLevel {
    High,
    Medium,
    Low,
}

impl RiskLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            RiskLevel::High => "high",
            RiskLevel::Medium => "medium",
            RiskLevel::Low => "low",
        }
    }

    /// Inclusive at 0.7 (high) and 0.3 (low); medium is the open interval.
    pub fn admits(self, score: f64) -> bool {
        match self {
            RiskLevel::High => score >= HIGH_RISK_MIN,
            RiskLevel::Low => score <= LOW_RISK_MAX,
            RiskLevel::Medium => score > LOW_RISK_MAX && score < HIGH_RISK_MIN,
        }
    }
}

/// Category name to id table; extend with [`Vocabulary::insert`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub ids: BTreeMap<String, i64>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let ids = [("pedestrian", 0), ("bus", 1), ("bicycle", 2), ("car", 3)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        Self { ids }
    }
}

impl Vocabulary {
    pub fn insert(&mut self, name: &str, id: i64) {
        self.ids.insert(name.to_string(), id);
    }

    pub fn id(&self, name: &str) -> Option<i64> {
        self.ids.get(name).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskAnnotationEntry {
    pub rank: usize,
    pub category_id: i64,
    /// `[x1, y1, x2, y2]` pixels.
    pub bbox: [f64; 4],
    pub risk_score: f64,
    pub risk_level: RiskLevel,
    pub category_name: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnnotationWarning {
    /// A misspelled level was accepted as `level`.
    LevelAlias { rank: usize, found: String, level: RiskLevel },
    /// Rank `first` precedes rank `second` but has a lower score.
    RankInversion { first: usize, second: usize, scores: (f64, f64) },
    UnknownCategory { rank: usize, name: String },
    BboxClipped { rank: usize, bbox: [f64; 4] },
}

impl fmt::Display for AnnotationWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LevelAlias { rank, found, level } => {
                write!(f, "entry {rank}: risk_level `{found}` read as `{}`", level.as_str())
            }
            Self::RankInversion { first, second, scores } => write!(
                f,
                "entries {first} and {second}: rank order contradicts scores {} < {}",
                scores.0, scores.1
            ),
            Self::UnknownCategory { rank, name } => write!(f, "entry {rank}: category `{name}` not in vocabulary"),
            Self::BboxClipped { rank, bbox } => write!(f, "entry {rank}: bbox {bbox:?} clipped to the image"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedAnnotations {
    pub entries: Vec<RiskAnnotationEntry>,
    pub warnings: Vec<AnnotationWarning>,
}

fn parse_level(s: &str) -> Option<(RiskLevel, bool)> {
    match s.trim().to_ascii_lowercase().as_str() {
        "high" => Some((RiskLevel::High, false)),
        "medium" => Some((RiskLevel::Medium, false)),
        "low" => Some((RiskLevel::Low, false)),
        "mediam" => Some((RiskLevel::Medium, true)),
        _ => None,
    }
}

fn field<'a>(obj: &'a Map<String, Value>, rank: usize, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| AnnotationError::Schema(format!("entry {rank}: missing `{name}`")))
}

fn number(v: &Value, rank: usize, name: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| AnnotationError::Schema(format!("entry {rank}: `{name}` must be a number, got {v}")))
}

fn string(v: &Value, rank: usize, name: &str) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| AnnotationError::Schema(format!("entry {rank}: `{name}` must be a string, got {v}")))
}

/// Parses with the default vocabulary.
pub fn parse_vlm_output(text: &str) -> Result<ParsedAnnotations> {
    parse_vlm_output_with(text, &Vocabulary::default())
}

/// Keys `"0".."n-1"` give the ranking. Schema problems fail immediately;
/// rule violations (level vs. score, score range, category id, bbox order)
/// are collected and reported together.
pub fn parse_vlm_output_with(text: &str, vocab: &Vocabulary) -> Result<ParsedAnnotations> {
    let Value::Object(root) = relaxed::parse(text)? else {
        return Err(AnnotationError::Schema("expected a rank-keyed object".into()));
    };
    let mut keyed: Vec<(usize, &Map<String, Value>)> = Vec::with_capacity(root.len());
    for (k, v) in &root {
        let rank: usize = k
            .trim()
            .parse()
            .map_err(|_| AnnotationError::Schema(format!("rank key `{k}` is not a non-negative integer")))?;
        let obj = v
            .as_object()
            .ok_or_else(|| AnnotationError::Schema(format!("entry {k} is not an object")))?;
        keyed.push((rank, obj));
    }
    keyed.sort_by_key(|(r, _)| *r);
    let ranks: Vec<usize> = keyed.iter().map(|(r, _)| *r).collect();
    if ranks.iter().enumerate().any(|(i, r)| *r != i) {
        return Err(AnnotationError::Validation(vec![format!(
            "rank keys must be 0..{} without gaps or repeats, got {ranks:?}",
            ranks.len()
        )]));
    }

    let mut entries = Vec::with_capacity(keyed.len());
    let mut warnings = Vec::new();
    let mut problems = Vec::new();
    for (rank, obj) in keyed {
        let category_id = field(obj, rank, "category_id")?
            .as_i64()
            .ok_or_else(|| AnnotationError::Schema(format!("entry {rank}: `category_id` must be an integer")))?;
        let bbox_v = field(obj, rank, "bbox")?;
        let bbox_items = bbox_v
            .as_array()
            .filter(|a| a.len() == 4)
            .ok_or_else(|| AnnotationError::Schema(format!("entry {rank}: `bbox` must have 4 numbers")))?;
        let mut bbox = [0.0; 4];
        for (b, v) in bbox.iter_mut().zip(bbox_items) {
            *b = number(v, rank, "bbox")?;
        }
        let risk_score = number(field(obj, rank, "risk_score")?, rank, "risk_score")?;
        let level_text = string(field(obj, rank, "risk_level")?, rank, "risk_level")?;
        let category_name = string(field(obj, rank, "category_name")?, rank, "category_name")?;
        let reason = match obj.get("reason") {
            Some(v) => string(v, rank, "reason")?,
            None => String::new(),
        };

        let risk_level = match parse_level(&level_text) {
            Some((level, alias)) => {
                if alias {
                    log::warn!("entry {rank}: risk_level `{level_text}` normalized to `{}`", level.as_str());
                    warnings.push(AnnotationWarning::LevelAlias {
                        rank,
                        found: level_text.clone(),
                        level,
                    });
                }
                Some(level)
            }
            None => {
                problems.push(format!("entry {rank}: unknown risk_level `{level_text}`"));
                None
            }
        };
        if !(0.0..=1.0).contains(&risk_score) {
            problems.push(format!("entry {rank}: risk_score {risk_score} outside [0, 1]"));
        }
        if let Some(level) = risk_level {
            if !level.admits(risk_score) {
                problems.push(format!(
                    "entry {rank}: risk_level `{}` inconsistent with risk_score {risk_score}",
                    level.as_str()
                ));
            }
        }
        if bbox[0] > bbox[2] || bbox[1] > bbox[3] {
            problems.push(format!("entry {rank}: bbox {bbox:?} has x1 > x2 or y1 > y2"));
        }
        match vocab.id(&category_name) {
            Some(id) if id != category_id => problems.push(format!(
                "entry {rank}: category `{category_name}` has id {id}, got {category_id}"
            )),
            Some(_) => {}
            None => warnings.push(AnnotationWarning::UnknownCategory {
                rank,
                name: category_name.clone(),
            }),
        }
        if let Some(risk_level) = risk_level {
            entries.push(RiskAnnotationEntry {
                rank,
                category_id,
                bbox,
                risk_score,
                risk_level,
                category_name,
                reason,
            });
        }
    }
    if !problems.is_empty() {
        return Err(AnnotationError::Validation(problems));
    }
    Ok(ParsedAnnotations { entries, warnings })
}

/// Bounds check against an image of `width` x `height` pixels.
pub fn check_bbox_bounds(entries: &[RiskAnnotationEntry], width: f64, height: f64) -> Vec<AnnotationWarning> {
    entries
        .iter()
        .filter(|e| e.bbox[0] < 0.0 || e.bbox[1] < 0.0 || e.bbox[2] > width || e.bbox[3] > height)
        .map(|e| AnnotationWarning::BboxClipped { rank: e.rank, bbox: e.bbox })
        .collect()
}

/// One warning per adjacent pair whose score increases with rank.
pub fn check_rank_score_consistency(entries: &[RiskAnnotationEntry]) -> Vec<AnnotationWarning> {
    entries
        .windows(2)
        .filter(|w| w[0].risk_score < w[1].risk_score)
        .map(|w| AnnotationWarning::RankInversion {
            first: w[0].rank,
            second: w[1].rank,
            scores: (w[0].risk_score, w[1].risk_score),
        })
        .collect()
}

/// Canonical strict JSON of the normalized form, keys in rank order.
pub fn serialize(entries: &[RiskAnnotationEntry]) -> String {
    let mut out = String::from("{");
    for (i, e) in entries.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let body = json!({
            "category_id": e.category_id,
            "bbox": e.bbox,
            "risk_score": e.risk_score,
            "risk_level": e.risk_level.as_str(),
            "category_name": e.category_name,
            "reason": e.reason,
        });
        out.push_str(&format!("\n  \"{}\": {}", i, body));
    }
    out.push_str(if entries.is_empty() { "}" } else { "\n}" });
    out
}
