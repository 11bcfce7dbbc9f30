//! Score and box fusion for paired detections.
//!
//! Three stages per pair:
//! - vision-driven: fuse the two detector scores and boxes;
//! - language-driven: fuse the two detector boxes weighted by the
//!   language-branch single-modal scores; the fused language score comes
//!   straight from chain-of-thought scoring;
//! - vision-language: fuse the outputs of the two branches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox, GeometryError};
use crate::language::MSCoTScores;
use crate::pairing::{PairedDetection, Provenance};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{pairs} pairs but {lang} language results")]
    LengthMismatch { pairs: usize, lang: usize },
    #[error("language result at position {position} belongs to pair {pair_index}")]
    Misaligned { position: usize, pair_index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreFusionStrategy {
    /// Mean of the two scores.
    Avg,
    /// Larger of the two scores (NMS-style voting).
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoxFusionStrategy {
    /// Score-weighted coordinate average.
    #[serde(rename = "s-avg", alias = "SAvg")]
    SAvg,
    /// Box of the higher score.
    #[serde(rename = "argmax", alias = "Argmax")]
    Argmax,
}

impl std::fmt::Display for ScoreFusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreFusionStrategy::Avg => "Avg",
            ScoreFusionStrategy::Max => "Max",
        })
    }
}

impl std::fmt::Display for BoxFusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoxFusionStrategy::SAvg => "s-avg",
            BoxFusionStrategy::Argmax => "argmax",
        })
    }
}

/// Strategy per fusion stage. `score_v` / `box_v` act on the vision branch,
/// `box_l` on the language branch, `score_vl` / `box_vl` on the final merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub score_v: ScoreFusionStrategy,
    pub score_vl: ScoreFusionStrategy,
    pub box_v: BoxFusionStrategy,
    pub box_l: BoxFusionStrategy,
    pub box_vl: BoxFusionStrategy,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            score_v: ScoreFusionStrategy::Max,
            score_vl: ScoreFusionStrategy::Avg,
            box_v: BoxFusionStrategy::SAvg,
            box_l: BoxFusionStrategy::SAvg,
            box_vl: BoxFusionStrategy::SAvg,
        }
    }
}

impl FusionConfig {
    /// The four (vision, vision-language) score strategy rows of the
    /// score-fusion ablation, box strategies at their defaults.
    pub fn score_grid() -> Vec<FusionConfig> {
        use ScoreFusionStrategy::*;
        [(Avg, Avg), (Avg, Max), (Max, Max), (Max, Avg)]
            .into_iter()
            .map(|(score_v, score_vl)| FusionConfig {
                score_v,
                score_vl,
                ..Default::default()
            })
            .collect()
    }

    /// All eight (V, L, VL) box strategy combinations, score strategies at
    /// their defaults. The all-s-avg row comes last.
    pub fn box_grid() -> Vec<FusionConfig> {
        use BoxFusionStrategy::*;
        let mut out = Vec::with_capacity(8);
        for box_vl in [Argmax, SAvg] {
            for box_l in [Argmax, SAvg] {
                for box_v in [Argmax, SAvg] {
                    out.push(FusionConfig {
                        box_v,
                        box_l,
                        box_vl,
                        ..Default::default()
                    });
                }
            }
        }
        out
    }

    /// Short row label such as `Max/Avg | s-avg/s-avg/s-avg`.
    pub fn label(&self) -> String {
        format!(
            "{}/{} | {}/{}/{}",
            self.score_v, self.score_vl, self.box_v, self.box_l, self.box_vl
        )
    }
}

fn check_score(s: f64) -> Result<f64, FusionError> {
    if (0.0..=1.0).contains(&s) {
        Ok(s)
    } else {
        Err(FusionError::ScoreOutOfRange(s))
    }
}

pub fn score_fuse(s1: f64, s2: f64, strategy: ScoreFusionStrategy) -> Result<f64, FusionError> {
    check_score(s1)?;
    check_score(s2)?;
    Ok(match strategy {
        ScoreFusionStrategy::Avg => (s1 + s2) / 2.0,
        ScoreFusionStrategy::Max => s1.max(s2),
    })
}

fn weighted(a: f64, wa: f64, b: f64, wb: f64) -> f64 {
    if a == b || wb == 0.0 {
        return a;
    }
    if wa == 0.0 {
        return b;
    }
    let v = (a * wa + b * wb) / (wa + wb);
    v.clamp(a.min(b), a.max(b))
}

/// Fuses two boxes. When both weights are zero, `SAvg` falls back to the
/// unweighted midpoint and `Argmax` to `b1`.
pub fn box_fuse(
    b1: &BBox,
    s1: f64,
    b2: &BBox,
    s2: f64,
    strategy: BoxFusionStrategy,
) -> Result<BBox, FusionError> {
    check_score(s1)?;
    check_score(s2)?;
    match strategy {
        BoxFusionStrategy::Argmax => Ok(if s2 > s1 { *b2 } else { *b1 }),
        BoxFusionStrategy::SAvg => {
            let (w1, w2) = if s1 + s2 > 0.0 { (s1, s2) } else { (1.0, 1.0) };
            let [a0, a1, a2, a3] = b1.to_array();
            let [c0, c1, c2, c3] = b2.to_array();
            Ok(BBox::new(
                weighted(a0, w1, c0, w2),
                weighted(a1, w1, c1, w2),
                weighted(a2, w1, c2, w2),
                weighted(a3, w1, c3, w2),
            )?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchOutput {
    pub score: f64,
    pub bbox: BBox,
    /// Both box weights were zero and the fallback rule was used.
    pub degenerate: bool,
}

pub fn vision_driven(
    pair: &PairedDetection,
    cfg: &FusionConfig,
) -> Result<BranchOutput, FusionError> {
    let (r, t) = (&pair.rgb, &pair.thermal);
    Ok(BranchOutput {
        score: score_fuse(r.score, t.score, cfg.score_v)?,
        bbox: box_fuse(&r.bbox, r.score, &t.bbox, t.score, cfg.box_v)?,
        degenerate: r.score + t.score == 0.0,
    })
}

/// Vision-branch boxes weighted by language-branch single-modal scores.
pub fn language_driven(
    pair: &PairedDetection,
    lang: &MSCoTScores,
    cfg: &FusionConfig,
) -> Result<BranchOutput, FusionError> {
    Ok(BranchOutput {
        score: check_score(lang.s_f_l)?,
        bbox: box_fuse(
            &pair.rgb.bbox,
            lang.s_rgb_l,
            &pair.thermal.bbox,
            lang.s_t_l,
            cfg.box_l,
        )?,
        degenerate: lang.s_rgb_l + lang.s_t_l == 0.0,
    })
}

/// Intermediate values behind one fused detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub provenance: Provenance,
    pub s_rgb_v: f64,
    pub s_t_v: f64,
    pub s_f_v: f64,
    pub b_f_v: BBox,
    pub s_rgb_l: Option<f64>,
    pub s_t_l: Option<f64>,
    pub s_f_l: Option<f64>,
    pub b_f_l: Option<BBox>,
    /// No usable language result; the vision branch was used alone.
    pub language_fallback: bool,
    pub degenerate_vision_weights: bool,
    pub degenerate_language_weights: bool,
    pub degenerate_fusion_weights: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedDetection {
    pub image_id: String,
    pub score: f64,
    pub bbox: BBox,
    pub trace: FusionTrace,
}

pub fn vl_fuse(
    pair: &PairedDetection,
    lang: Option<&MSCoTScores>,
    cfg: &FusionConfig,
) -> Result<FusedDetection, FusionError> {
    let vision = vision_driven(pair, cfg)?;
    let mut trace = FusionTrace {
        provenance: pair.provenance,
        s_rgb_v: pair.rgb.score,
        s_t_v: pair.thermal.score,
        s_f_v: vision.score,
        b_f_v: vision.bbox,
        s_rgb_l: None,
        s_t_l: None,
        s_f_l: None,
        b_f_l: None,
        language_fallback: lang.is_none(),
        degenerate_vision_weights: vision.degenerate,
        degenerate_language_weights: false,
        degenerate_fusion_weights: false,
    };
    let Some(lang) = lang else {
        return Ok(FusedDetection {
            image_id: pair.image_id().to_owned(),
            score: vision.score,
            bbox: vision.bbox,
            trace,
        });
    };

    let language = language_driven(pair, lang, cfg)?;
    trace.s_rgb_l = Some(lang.s_rgb_l);
    trace.s_t_l = Some(lang.s_t_l);
    trace.s_f_l = Some(language.score);
    trace.b_f_l = Some(language.bbox);
    trace.degenerate_language_weights = language.degenerate;
    trace.degenerate_fusion_weights = vision.score + language.score == 0.0;

    let score = score_fuse(vision.score, language.score, cfg.score_vl)?;
    let bbox = box_fuse(
        &vision.bbox,
        vision.score,
        &language.bbox,
        language.score,
        cfg.box_vl,
    )?;
    Ok(FusedDetection {
        image_id: pair.image_id().to_owned(),
        score,
        bbox,
        trace,
    })
}

/// Fuses every pair of one image. `lang[i]` must be absent or belong to
/// pair `i`.
pub fn fuse_image(
    pairs: &[PairedDetection],
    lang: &[Option<MSCoTScores>],
    cfg: &FusionConfig,
) -> Result<Vec<FusedDetection>, FusionError> {
    if pairs.len() != lang.len() {
        return Err(FusionError::LengthMismatch {
            pairs: pairs.len(),
            lang: lang.len(),
        });
    }
    pairs
        .iter()
        .zip(lang)
        .enumerate()
        .map(|(i, (pair, l))| {
            if let Some(l) = l {
                if l.pair_index != i {
                    return Err(FusionError::Misaligned {
                        position: i,
                        pair_index: l.pair_index,
                    });
                }
            }
            vl_fuse(pair, l.as_ref(), cfg)
        })
        .collect()
}

/// Greedy per-image NMS over fused detections; suppresses any detection
/// whose IoU with a higher-scoring kept one exceeds `iou_thr`. Survivors
/// keep their input order.
pub fn post_fusion_nms(dets: &[FusedDetection], iou_thr: f64) -> Vec<FusedDetection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep = vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let clash = kept.iter().any(|&k| {
            dets[k].image_id == dets[i].image_id && iou(&dets[k].bbox, &dets[i].bbox) > iou_thr
        });
        if !clash {
            keep[i] = true;
            kept.push(i);
        }
    }
    dets.iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(d, _)| d.clone())
        .collect()
}
