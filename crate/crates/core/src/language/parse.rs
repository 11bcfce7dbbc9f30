//! Extraction of `[class, prediction score]` records from free text.

use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

static RECORD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\[\s*([^\[\],]+?)\s*,\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*\]")
        .expect("record pattern compiles")
});

#[derive(Debug, Clone, PartialEq, Error)]
#[error("no [class, prediction score] record in reply: {raw:?}")]
pub struct ParseError {
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Lowercased, trimmed.
    pub label: String,
    /// Clamped to `[0, 1]`.
    pub score: f64,
}

impl Prediction {
    pub fn is_person(&self) -> bool {
        self.label == "person"
    }

    /// Score with the class gate applied: zero unless the label is `person`.
    pub fn gated_score(&self) -> f64 {
        if self.is_person() {
            self.score
        } else {
            0.0
        }
    }
}

/// Every bracketed `[label, number]` record in order of appearance.
pub fn parse_prediction(text: &str) -> Result<Vec<Prediction>, ParseError> {
    let out: Vec<Prediction> = RECORD
        .captures_iter(text)
        .filter_map(|c| {
            let score: f64 = c[2].parse().ok()?;
            Some(Prediction {
                label: c[1].trim().to_lowercase(),
                score: score.clamp(0.0, 1.0),
            })
        })
        .collect();
    if out.is_empty() {
        Err(ParseError {
            raw: text.to_owned(),
        })
    } else {
        Ok(out)
    }
}
