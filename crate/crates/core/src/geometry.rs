//! Boxes, modalities and single-modal detections.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

/// Axis-aligned box in corner format `[x1, y1, x2, y2]`, real-valued pixels.
///
/// Constructed through [`BBox::new`], which rejects non-finite coordinates and
/// boxes without strictly positive width and height. Serialized as a
/// four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let reason = box_violation(x1, y1, x2, y2);
        match reason {
            None => Ok(Self { x1, y1, x2, y2 }),
            Some(reason) => Err(GeometryError::InvalidBox {
                x1,
                y1,
                x2,
                y2,
                reason,
            }),
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }
}

fn box_violation(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<&'static str> {
    if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
        Some("non-finite coordinate")
    } else if x2 <= x1 {
        Some("zero width")
    } else if y2 <= y1 {
        Some("zero height")
    } else {
        None
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Intersection over union. Both boxes are valid by construction, so the
/// union is always positive.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Thermal,
}

impl Modality {
    pub fn opposite(self) -> Self {
        match self {
            Modality::Rgb => Modality::Thermal,
            Modality::Thermal => Modality::Rgb,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Thermal => "thermal",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One single-modal detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub modality: Modality,
    pub class_label: String,
    pub image_id: String,
}

impl Detection {
    /// Builds a detection, rejecting scores outside `[0, 1]`.
    pub fn new(
        bbox: BBox,
        score: f64,
        modality: Modality,
        class_label: impl Into<String>,
        image_id: impl Into<String>,
    ) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::ScoreOutOfRange(score));
        }
        Ok(Self {
            bbox,
            score,
            modality,
            class_label: class_label.into(),
            image_id: image_id.into(),
        })
    }
}

/// A single broken detection invariant, as reported by [`validate_detection`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    ScoreOutOfRange,
    NonFiniteCoordinate,
    ZeroWidth,
    ZeroHeight,
}

impl Violation {
    pub fn message(self) -> &'static str {
        match self {
            Violation::ScoreOutOfRange => "score out of range",
            Violation::NonFiniteCoordinate => "non-finite coordinate",
            Violation::ZeroWidth => "zero width",
            Violation::ZeroHeight => "zero height",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

/// Checks raw detection fields without constructing anything. Returns every
/// violated invariant; an empty list means the detection is valid.
pub fn validate_detection(coords: [f64; 4], score: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(0.0..=1.0).contains(&score) {
        out.push(Violation::ScoreOutOfRange);
    }
    let [x1, y1, x2, y2] = coords;
    if !coords.iter().all(|v| v.is_finite()) {
        out.push(Violation::NonFiniteCoordinate);
        return out;
    }
    if x2 <= x1 {
        out.push(Violation::ZeroWidth);
    }
    if y2 <= y1 {
        out.push(Violation::ZeroHeight);
    }
    out
}
