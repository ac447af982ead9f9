//! Grounding-model detections and prompt rendering.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{relaxed, AnnotationError, Result};

pub const TASK_DESCRIPTION: &str = "You are the brain of an autonomous vehicle. These image sequences are returned by your forward-facing camera. Analyze the risk critical objects in the diagram, such as occlusion that vehicles comes to lanes of ego vehicle suddenly or motorcycles obscured by cars or pedestrains obscured by cars, and you must detect all these critical objects in the image with its bounding box. And you can use the information from another grounding model, which describe the location of different objects. Notice that the socre of json is the confidence score of bbox.";

pub const OUTPUT_FORMAT: &str = "You must output the object in a risk order and don't omit the isntance with bbox in the image, and don't output any text other than the json data. Please note that if a median or fence is observed between a neighboring vehicle and your own vehicle, this should not be considered a risk. Please note that if you think the risk level of an object is high, its risk score should not be lower than 0.7; if you think the risk of an object is low, its risk score should not be higher than 0.3; and for the object in a medium risk level, its score should be between 0.3-0.7; Be careful not to pay too much risk attention to oncoming vehicles. You must output information in the json format followed and give rank based on the risk level, ";

/// The worked output example appended to [`OUTPUT_FORMAT`], kept verbatim
/// (including its irregular syntax).
pub const OUTPUT_FORMAT_EXAMPLE: &str = include_str!("output_format_example.txt");

/// A labelme-style rectangle from the grounding detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VgDetection {
    pub label: String,
    pub points: [[f64; 2]; 2],
    #[serde(default)]
    pub group_id: Value,
    pub shape_type: String,
    pub description: String,
    #[serde(default = "empty_object")]
    pub flags: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl VgDetection {
    /// Confidence parsed from `description` (`"score: <real>"`).
    pub fn score(&self) -> Option<f64> {
        let rest = self.description.trim().strip_prefix("score:")?;
        rest.trim().parse::<f64>().ok().filter(|s| (0.0..=1.0).contains(s))
    }

    /// `[x1, y1, x2, y2]` with ordered corners.
    pub fn bbox(&self) -> [f64; 4] {
        let [a, b] = self.points;
        [a[0].min(b[0]), a[1].min(b[1]), a[0].max(b[0]), a[1].max(b[1])]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| AnnotationError::InvalidField {
            field: field.to_string(),
            reason: why,
        };
        if self.label.trim().is_empty() {
            return Err(bad("label", "empty label".into()));
        }
        if self.shape_type != "rectangle" {
            return Err(bad("shape_type", format!("expected `rectangle`, got `{}`", self.shape_type)));
        }
        if !self.points.iter().flatten().all(|v| v.is_finite()) {
            return Err(bad("points", "non-finite coordinate".into()));
        }
        let [x1, y1, x2, y2] = self.bbox();
        if x1 == x2 || y1 == y2 {
            return Err(bad("points", "zero-area rectangle".into()));
        }
        if self.score().is_none() {
            return Err(bad(
                "description",
                format!("expected `score: <real in [0, 1]>`, got `{}`", self.description),
            ));
        }
        Ok(())
    }
}

/// Parses a grounding file: one detection object or a list of them.
pub fn parse_vg(text: &str) -> Result<Vec<VgDetection>> {
    let value = relaxed::parse(text)?;
    let list = match value {
        Value::Array(items) => items,
        obj @ Value::Object(_) => vec![obj],
        other => {
            return Err(AnnotationError::Schema(format!(
                "expected a detection object or list, got {other}"
            )))
        }
    };
    let mut out = Vec::with_capacity(list.len());
    for (i, item) in list.into_iter().enumerate() {
        let det: VgDetection =
            serde_json::from_value(item).map_err(|e| AnnotationError::Schema(format!("detection {i}: {e}")))?;
        det.validate()?;
        out.push(det);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub task_description: String,
    /// Compact JSON array of the detections, in input order.
    pub state_info: String,
    pub output_format: String,
}

impl PromptBundle {
    /// The three sections joined by blank lines.
    pub fn text(&self) -> String {
        format!("{}\n\n{}\n\n{}", self.task_description, self.state_info, self.output_format)
    }
}

pub fn render_prompt(vg: &[VgDetection]) -> Result<PromptBundle> {
    for d in vg {
        d.validate()?;
    }
    Ok(PromptBundle {
        task_description: TASK_DESCRIPTION.to_string(),
        state_info: serde_json::to_string(vg).expect("detections serialize"),
        output_format: format!("{OUTPUT_FORMAT}\n{OUTPUT_FORMAT_EXAMPLE}"),
    })
}
