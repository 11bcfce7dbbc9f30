//! Greedy cross-modality detection pairing.
//!
//! Both detection lists are merged into one working set. The highest-scoring
//! remaining detection is paired with the remaining opposite-modality
//! detection of highest IoU above the threshold; when no such partner exists
//! the detection is paired with a copy of itself. Both are then removed and
//! the process repeats until the working set is empty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox, Detection, Modality};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PairingError {
    #[error("IoU threshold {0} must lie strictly inside (0, 1)")]
    InvalidThreshold(f64),
    #[error("detections span several images: {0:?} and {1:?}")]
    MixedImages(String, String),
    #[error("{list} list entry {index} has modality {found}")]
    WrongModality {
        list: Modality,
        index: usize,
        found: Modality,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingConfig {
    pub tau: f64,
}

impl PairingConfig {
    pub fn new(tau: f64) -> Result<Self, PairingError> {
        let cfg = Self { tau };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PairingError> {
        if self.tau > 0.0 && self.tau < 1.0 {
            Ok(())
        } else {
            Err(PairingError::InvalidThreshold(self.tau))
        }
    }
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self { tau: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Matched,
    OverrideFromRgb,
    OverrideFromThermal,
}

impl Provenance {
    pub fn is_override(self) -> bool {
        !matches!(self, Provenance::Matched)
    }
}

/// An aligned (RGB, thermal) detection of one pedestrian.
///
/// For override pairs the empty slot holds a verbatim copy of the source
/// detection, including its modality tag. `rgb_source` / `thermal_source`
/// are ingest indices into the original lists; the copied slot has `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDetection {
    pub rgb: Detection,
    pub thermal: Detection,
    pub provenance: Provenance,
    pub rgb_source: Option<usize>,
    pub thermal_source: Option<usize>,
}

impl PairedDetection {
    pub fn image_id(&self) -> &str {
        &self.rgb.image_id
    }

    pub fn detection(&self, side: Modality) -> &Detection {
        match side {
            Modality::Rgb => &self.rgb,
            Modality::Thermal => &self.thermal,
        }
    }

    pub fn bbox(&self, side: Modality) -> &BBox {
        &self.detection(side).bbox
    }
}

struct Candidate<'a> {
    det: &'a Detection,
    modality: Modality,
    index: usize,
    alive: bool,
}

/// Pairs RGB and thermal detections of one image.
///
/// Ties on the top score go to RGB, then to the lower ingest index; ties on
/// IoU go to the lower ingest index. Output follows consumption order.
pub fn dpair(
    dets_rgb: &[Detection],
    dets_t: &[Detection],
    cfg: &PairingConfig,
) -> Result<Vec<PairedDetection>, PairingError> {
    cfg.validate()?;
    check_inputs(dets_rgb, dets_t)?;

    let mut pool: Vec<Candidate<'_>> = dets_rgb
        .iter()
        .enumerate()
        .map(|(index, det)| Candidate {
            det,
            modality: Modality::Rgb,
            index,
            alive: true,
        })
        .chain(dets_t.iter().enumerate().map(|(index, det)| Candidate {
            det,
            modality: Modality::Thermal,
            index,
            alive: true,
        }))
        .collect();

    let mut remaining = pool.len();
    let mut out = Vec::with_capacity(remaining);
    while remaining > 0 {
        let top = pool
            .iter()
            .enumerate()
            .filter(|(_, c)| c.alive)
            .reduce(|best, cur| if outranks(cur.1, best.1) { cur } else { best })
            .map(|(i, _)| i)
            .expect("remaining > 0 implies a live candidate");
        pool[top].alive = false;
        remaining -= 1;

        let top_box = &pool[top].det.bbox;
        let top_modality = pool[top].modality;
        let mut partner: Option<(usize, f64)> = None;
        for (i, c) in pool.iter().enumerate() {
            if !c.alive || c.modality == top_modality {
                continue;
            }
            let overlap = iou(top_box, &c.det.bbox);
            if overlap <= cfg.tau {
                continue;
            }
            // pool is in ingest order within a modality, so strict > keeps
            // the lower index on ties
            if partner.is_none_or(|(_, best)| overlap > best) {
                partner = Some((i, overlap));
            }
        }

        if let Some((p, _)) = partner {
            pool[p].alive = false;
            remaining -= 1;
        }
        let top_c = &pool[top];
        let pair = match partner {
            Some((p, _)) => {
                let (r, t) = match top_c.modality {
                    Modality::Rgb => (top_c, &pool[p]),
                    Modality::Thermal => (&pool[p], top_c),
                };
                PairedDetection {
                    rgb: r.det.clone(),
                    thermal: t.det.clone(),
                    provenance: Provenance::Matched,
                    rgb_source: Some(r.index),
                    thermal_source: Some(t.index),
                }
            }
            None => match top_c.modality {
                Modality::Rgb => PairedDetection {
                    rgb: top_c.det.clone(),
                    thermal: top_c.det.clone(),
                    provenance: Provenance::OverrideFromRgb,
                    rgb_source: Some(top_c.index),
                    thermal_source: None,
                },
                Modality::Thermal => PairedDetection {
                    rgb: top_c.det.clone(),
                    thermal: top_c.det.clone(),
                    provenance: Provenance::OverrideFromThermal,
                    rgb_source: None,
                    thermal_source: Some(top_c.index),
                },
            },
        };
        out.push(pair);
    }
    Ok(out)
}

fn outranks(a: &Candidate<'_>, b: &Candidate<'_>) -> bool {
    if a.det.score != b.det.score {
        return a.det.score > b.det.score;
    }
    if a.modality != b.modality {
        return a.modality == Modality::Rgb;
    }
    a.index < b.index
}

fn check_inputs(dets_rgb: &[Detection], dets_t: &[Detection]) -> Result<(), PairingError> {
    for (list, dets) in [(Modality::Rgb, dets_rgb), (Modality::Thermal, dets_t)] {
        if let Some((index, d)) = dets.iter().enumerate().find(|(_, d)| d.modality != list) {
            return Err(PairingError::WrongModality {
                list,
                index,
                found: d.modality,
            });
        }
    }
    let mut ids = dets_rgb.iter().chain(dets_t).map(|d| &d.image_id);
    if let Some(first) = ids.next() {
        if let Some(other) = ids.find(|id| *id != first) {
            return Err(PairingError::MixedImages(first.clone(), other.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(m: Modality, c: [f64; 4], s: f64) -> Detection {
        Detection::new(BBox::try_from(c).unwrap(), s, m, "person", "img").unwrap()
    }

    #[test]
    fn lone_rgb_detection_overrides() {
        let rgb = [det(Modality::Rgb, [0., 0., 10., 10.], 0.9)];
        let pairs = dpair(&rgb, &[], &PairingConfig::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].provenance, Provenance::OverrideFromRgb);
        assert_eq!(pairs[0].thermal.bbox, pairs[0].rgb.bbox);
        assert_eq!(pairs[0].thermal.score, 0.9);
    }

    #[test]
    fn overlapping_pair_matches() {
        // IoU 81/119 ~ 0.6807
        let rgb = [det(Modality::Rgb, [0., 0., 10., 10.], 0.9)];
        let t = [det(Modality::Thermal, [1., 1., 11., 11.], 0.7)];
        let pairs = dpair(&rgb, &t, &PairingConfig::default()).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].provenance, Provenance::Matched);
        assert_eq!(pairs[0].thermal.score, 0.7);
    }

    #[test]
    fn weak_overlap_gives_two_overrides() {
        // IoU 20/180 ~ 0.111
        let rgb = [det(Modality::Rgb, [0., 0., 10., 10.], 0.9)];
        let t = [det(Modality::Thermal, [8., 0., 18., 10.], 0.7)];
        let pairs = dpair(&rgb, &t, &PairingConfig::default()).unwrap();
        let prov: Vec<_> = pairs.iter().map(|p| p.provenance).collect();
        assert_eq!(
            prov,
            vec![Provenance::OverrideFromRgb, Provenance::OverrideFromThermal]
        );
    }

    #[test]
    fn thermal_first_when_it_scores_higher() {
        let rgb = [det(Modality::Rgb, [0., 0., 10., 10.], 0.4)];
        let t = [
            det(Modality::Thermal, [0., 0., 10., 10.], 0.8),
            det(Modality::Thermal, [50., 50., 60., 60.], 0.6),
        ];
        let pairs = dpair(&rgb, &t, &PairingConfig::default()).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].provenance, Provenance::Matched);
        assert_eq!(pairs[0].thermal_source, Some(0));
        assert_eq!(pairs[1].provenance, Provenance::OverrideFromThermal);
    }

    #[test]
    fn equal_scores_prefer_rgb() {
        let rgb = [det(Modality::Rgb, [0., 0., 10., 10.], 0.5)];
        let t = [det(Modality::Thermal, [40., 40., 50., 50.], 0.5)];
        let pairs = dpair(&rgb, &t, &PairingConfig::default()).unwrap();
        assert_eq!(pairs[0].provenance, Provenance::OverrideFromRgb);
    }

    #[test]
    fn equal_iou_prefers_lower_index() {
        let rgb = [det(Modality::Rgb, [0., 0., 10., 10.], 0.9)];
        let t = [
            det(Modality::Thermal, [1., 0., 11., 10.], 0.3),
            det(Modality::Thermal, [-1., 0., 9., 10.], 0.4),
        ];
        let pairs = dpair(&rgb, &t, &PairingConfig::default()).unwrap();
        assert_eq!(pairs[0].thermal_source, Some(0));
    }

    #[test]
    fn empty_inputs() {
        assert!(dpair(&[], &[], &PairingConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn input_errors() {
        let rgb = [det(Modality::Rgb, [0., 0., 10., 10.], 0.9)];
        let mut other = det(Modality::Thermal, [0., 0., 10., 10.], 0.9);
        other.image_id = "b".into();
        assert!(matches!(
            dpair(&rgb, &[other], &PairingConfig::default()),
            Err(PairingError::MixedImages(..))
        ));
        assert!(matches!(
            dpair(&[], &rgb, &PairingConfig::default()),
            Err(PairingError::WrongModality { .. })
        ));
        assert!(PairingConfig::new(1.0).is_err());
        assert!(PairingConfig::new(0.0).is_err());
    }
}
