//! Detection evaluation: greedy IoU matching, all-point interpolated AP,
//! and log-average miss rate over FPPI in `[1e-2, 1e0]`, sliced by
//! day / night condition.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusedDetection;
use crate::geometry::{iou, BBox, Detection};

/// Number of log-spaced FPPI reference points.
pub const MR_POINTS: usize = 9;
/// Miss rates are floored here before taking logs.
pub const MR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("IoU threshold {0} must lie strictly inside (0, 1)")]
    InvalidThreshold(f64),
    #[error("matching spans several images: {0:?} and {1:?}")]
    MixedImages(String, String),
    #[error("image {0:?} has no condition entry")]
    UnknownImage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Day,
    Night,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    Day,
    Night,
    All,
}

impl Slice {
    pub fn includes(self, c: Condition) -> bool {
        match self {
            Slice::Day => c == Condition::Day,
            Slice::Night => c == Condition::Night,
            Slice::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub bbox: BBox,
    pub condition: Condition,
    #[serde(default)]
    pub ignore: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: String,
    pub condition: Condition,
}

/// Anything that can be ranked and matched against ground truth.
pub trait Scored {
    fn image_id(&self) -> &str;
    fn bbox(&self) -> &BBox;
    fn score(&self) -> f64;
}

impl Scored for FusedDetection {
    fn image_id(&self) -> &str {
        &self.image_id
    }
    fn bbox(&self) -> &BBox {
        &self.bbox
    }
    fn score(&self) -> f64 {
        self.score
    }
}

impl Scored for Detection {
    fn image_id(&self) -> &str {
        &self.image_id
    }
    fn bbox(&self) -> &BBox {
        &self.bbox
    }
    fn score(&self) -> f64 {
        self.score
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub image_id: String,
    pub bbox: BBox,
    pub score: f64,
}

impl Scored for ScoredBox {
    fn image_id(&self) -> &str {
        &self.image_id
    }
    fn bbox(&self) -> &BBox {
        &self.bbox
    }
    fn score(&self) -> f64 {
        self.score
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchLabel {
    Tp,
    Fp,
    /// Matched an ignore region; excluded from every count.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDetection {
    pub image_id: String,
    pub score: f64,
    pub label: MatchLabel,
    /// Index into the input detection slice.
    pub det_index: usize,
    /// Matched ground-truth index for TPs and ignored matches.
    pub gt_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// In descending score order (ties keep input order).
    pub labeled: Vec<LabeledDetection>,
    /// Non-ignore ground truths.
    pub total_gt: usize,
    /// Non-ignore ground truths left unmatched (false negatives).
    pub unmatched_gt: usize,
}

impl MatchResult {
    pub fn count(&self, label: MatchLabel) -> usize {
        self.labeled.iter().filter(|d| d.label == label).count()
    }
}

fn check_threshold(iou_thr: f64) -> Result<(), EvalError> {
    if iou_thr > 0.0 && iou_thr < 1.0 {
        Ok(())
    } else {
        Err(EvalError::InvalidThreshold(iou_thr))
    }
}

fn score_order<D: Scored>(dets: &[D]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()));
    order
}

/// Greedy one-to-one matching within a single image.
///
/// Detections are visited by descending score. Each takes the unmatched
/// non-ignore ground truth of highest IoU at or above `iou_thr` (TP);
/// failing that, any ignore region at or above the threshold absorbs it;
/// otherwise it is a FP.
pub fn match_detections<D: Scored>(
    dets: &[D],
    gts: &[GroundTruthBox],
    iou_thr: f64,
) -> Result<MatchResult, EvalError> {
    check_threshold(iou_thr)?;
    let mut ids = dets
        .iter()
        .map(|d| d.image_id())
        .chain(gts.iter().map(|g| g.image_id.as_str()));
    if let Some(first) = ids.next() {
        if let Some(other) = ids.find(|id| *id != first) {
            return Err(EvalError::MixedImages(first.to_owned(), other.to_owned()));
        }
    }

    let mut taken = vec![false; gts.len()];
    let mut labeled = Vec::with_capacity(dets.len());
    for i in score_order(dets) {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt.ignore || taken[g] {
                continue;
            }
            let overlap = iou(d.bbox(), &gt.bbox);
            if overlap >= iou_thr && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        let (label, gt_index) = match best {
            Some((g, _)) => {
                taken[g] = true;
                (MatchLabel::Tp, Some(g))
            }
            None => {
                let region = gts
                    .iter()
                    .position(|gt| gt.ignore && iou(d.bbox(), &gt.bbox) >= iou_thr);
                match region {
                    Some(g) => (MatchLabel::Ignored, Some(g)),
                    None => (MatchLabel::Fp, None),
                }
            }
        };
        labeled.push(LabeledDetection {
            image_id: d.image_id().to_owned(),
            score: d.score(),
            label,
            det_index: i,
            gt_index,
        });
    }

    let total_gt = gts.iter().filter(|g| !g.ignore).count();
    let tp = labeled.iter().filter(|d| d.label == MatchLabel::Tp).count();
    Ok(MatchResult {
        labeled,
        total_gt,
        unmatched_gt: total_gt - tp,
    })
}

/// Matches every image separately and concatenates the results, with
/// `det_index` referring to the full input slice.
pub fn match_all<D: Scored>(
    dets: &[D],
    gts: &[GroundTruthBox],
    iou_thr: f64,
) -> Result<MatchResult, EvalError> {
    check_threshold(iou_thr)?;
    let mut by_image: BTreeMap<&str, (Vec<usize>, Vec<GroundTruthBox>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_image.entry(d.image_id()).or_default().0.push(i);
    }
    for g in gts {
        by_image
            .entry(g.image_id.as_str())
            .or_default()
            .1
            .push(g.clone());
    }

    let mut out = MatchResult {
        labeled: Vec::with_capacity(dets.len()),
        total_gt: 0,
        unmatched_gt: 0,
    };
    for (det_ids, image_gts) in by_image.values() {
        let subset: Vec<&D> = det_ids.iter().map(|&i| &dets[i]).collect();
        let m = match_detections(&subset, image_gts, iou_thr)?;
        out.total_gt += m.total_gt;
        out.unmatched_gt += m.unmatched_gt;
        out.labeled.extend(m.labeled.into_iter().map(|mut l| {
            l.det_index = det_ids[l.det_index];
            l.gt_index = None;
            l
        }));
    }
    Ok(out)
}

impl<T: Scored + ?Sized> Scored for &T {
    fn image_id(&self) -> &str {
        (**self).image_id()
    }
    fn bbox(&self) -> &BBox {
        (**self).bbox()
    }
    fn score(&self) -> f64 {
        (**self).score()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

/// Cumulative curve over score-ranked, non-ignored detections; one point
/// per detection. With no ground truth, recall is taken as 1.
pub fn pr_curve(labeled: &[LabeledDetection], total_gt: usize, num_images: usize) -> Vec<PRPoint> {
    let mut ranked: Vec<&LabeledDetection> = labeled
        .iter()
        .filter(|d| d.label != MatchLabel::Ignored)
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

    let images = num_images.max(1) as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    ranked
        .into_iter()
        .map(|d| {
            match d.label {
                MatchLabel::Tp => tp += 1,
                _ => fp += 1,
            }
            let recall = if total_gt == 0 {
                1.0
            } else {
                tp as f64 / total_gt as f64
            };
            PRPoint {
                threshold: d.score,
                precision: tp as f64 / (tp + fp) as f64,
                recall,
                fppi: fp as f64 / images,
                miss_rate: 1.0 - recall,
            }
        })
        .collect()
}

/// All-point interpolated AP: area under the precision envelope made
/// monotone non-increasing in recall.
pub fn average_precision(labeled: &[LabeledDetection], total_gt: usize) -> f64 {
    let curve = pr_curve(labeled, total_gt, 1);
    if total_gt == 0 {
        return if curve.is_empty() { 1.0 } else { 0.0 };
    }
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (p, env) in curve.iter().zip(envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    ap
}

/// FPPI reference points `10^(-2 + 2i/8)`, `i = 0..9`.
pub fn mr_reference_points() -> [f64; MR_POINTS] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (MR_POINTS - 1) as f64))
}

/// Log-average miss rate. At each reference point the curve is read at the
/// highest FPPI not exceeding it; the empty prefix (no detections kept)
/// counts as FPPI 0 with miss rate 1 (0 when there is no ground truth).
pub fn log_average_miss_rate(
    labeled: &[LabeledDetection],
    total_gt: usize,
    num_images: usize,
) -> f64 {
    let curve = pr_curve(labeled, total_gt, num_images);
    let start_miss = if total_gt == 0 { 0.0 } else { 1.0 };
    let sampled: Vec<f64> = mr_reference_points()
        .iter()
        .map(|&r| {
            let k = curve.partition_point(|p| p.fppi <= r);
            if k == 0 {
                start_miss
            } else {
                curve[k - 1].miss_rate
            }
        })
        .collect();
    if sampled.iter().all(|&m| m == 0.0) {
        return 0.0;
    }
    let mean_log = sampled.iter().map(|m| m.max(MR_FLOOR).ln()).sum::<f64>() / MR_POINTS as f64;
    mean_log.exp()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceCounts {
    pub images: usize,
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceCountsBySlice {
    pub day: Option<SliceCounts>,
    pub night: Option<SliceCounts>,
    pub all: Option<SliceCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_all: f64,
    pub mr_day: Option<f64>,
    pub mr_night: Option<f64>,
    pub mr_all: Option<f64>,
    pub counts: SliceCountsBySlice,
    /// Curve over the whole set.
    pub curve: Vec<PRPoint>,
}

impl EvalReport {
    /// Fixed-width row: AP (All), MR (Day, Night, All), in percent.
    pub fn table_row(&self) -> String {
        let pct = |v: Option<f64>| match v {
            Some(v) => format!("{:>8.2}", v * 100.0),
            None => format!("{:>8}", "-"),
        };
        format!(
            "{} {} {} {}",
            pct(Some(self.ap_all)),
            pct(self.mr_day),
            pct(self.mr_night),
            pct(self.mr_all)
        )
    }

    pub fn table_header() -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8}",
            "AP-All", "MR-Day", "MR-Night", "MR-All"
        )
    }
}

/// Derives per-image conditions from ground truth. Images without ground
/// truth are not listed.
pub fn images_from_ground_truth(gts: &[GroundTruthBox]) -> Vec<ImageInfo> {
    let mut seen: BTreeMap<&str, Condition> = BTreeMap::new();
    for g in gts {
        seen.entry(g.image_id.as_str()).or_insert(g.condition);
    }
    seen.into_iter()
        .map(|(id, condition)| ImageInfo {
            image_id: id.to_owned(),
            condition,
        })
        .collect()
}

/// Matches per image, then reports AP over everything and MR for each
/// requested slice. A slice with no images is reported as absent.
pub fn evaluate<D: Scored>(
    dets: &[D],
    gts: &[GroundTruthBox],
    images: &[ImageInfo],
    slices: &[Slice],
    iou_thr: f64,
) -> Result<EvalReport, EvalError> {
    let conditions: HashMap<&str, Condition> = images
        .iter()
        .map(|i| (i.image_id.as_str(), i.condition))
        .collect();
    for id in dets
        .iter()
        .map(|d| d.image_id())
        .chain(gts.iter().map(|g| g.image_id.as_str()))
    {
        if !conditions.contains_key(id) {
            return Err(EvalError::UnknownImage(id.to_owned()));
        }
    }

    let matched = match_all(dets, gts, iou_thr)?;
    let slice_of = |slice: Slice| -> Option<(SliceCounts, f64, Vec<LabeledDetection>)> {
        let images = images
            .iter()
            .filter(|i| slice.includes(i.condition))
            .count();
        if images == 0 {
            return None;
        }
        let labeled: Vec<LabeledDetection> = matched
            .labeled
            .iter()
            .filter(|d| slice.includes(conditions[d.image_id.as_str()]))
            .cloned()
            .collect();
        let gt = gts
            .iter()
            .filter(|g| !g.ignore && slice.includes(conditions[g.image_id.as_str()]))
            .count();
        let tp = labeled.iter().filter(|d| d.label == MatchLabel::Tp).count();
        let fp = labeled.iter().filter(|d| d.label == MatchLabel::Fp).count();
        let counts = SliceCounts {
            images,
            gt,
            tp,
            fp,
            fn_: gt - tp,
        };
        let mr = log_average_miss_rate(&labeled, gt, images);
        Some((counts, mr, labeled))
    };

    let mut report = EvalReport {
        ap_all: average_precision(&matched.labeled, matched.total_gt),
        mr_day: None,
        mr_night: None,
        mr_all: None,
        counts: SliceCountsBySlice::default(),
        curve: pr_curve(&matched.labeled, matched.total_gt, images.len()),
    };
    for &slice in slices {
        let Some((counts, mr, _)) = slice_of(slice) else {
            continue;
        };
        match slice {
            Slice::Day => {
                report.mr_day = Some(mr);
                report.counts.day = Some(counts);
            }
            Slice::Night => {
                report.mr_night = Some(mr);
                report.counts.night = Some(counts);
            }
            Slice::All => {
                report.mr_all = Some(mr);
                report.counts.all = Some(counts);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(c: [f64; 4]) -> BBox {
        BBox::try_from(c).unwrap()
    }

    fn det(img: &str, c: [f64; 4], s: f64) -> ScoredBox {
        ScoredBox {
            image_id: img.into(),
            bbox: bx(c),
            score: s,
        }
    }

    fn gt(img: &str, c: [f64; 4]) -> GroundTruthBox {
        GroundTruthBox {
            image_id: img.into(),
            bbox: bx(c),
            condition: Condition::Day,
            ignore: false,
        }
    }

    fn labeled(seq: &[(f64, MatchLabel)]) -> Vec<LabeledDetection> {
        seq.iter()
            .enumerate()
            .map(|(i, &(score, label))| LabeledDetection {
                image_id: "a".into(),
                score,
                label,
                det_index: i,
                gt_index: None,
            })
            .collect()
    }

    #[test]
    fn single_exact_match() {
        let m = match_detections(
            &[det("a", [0., 0., 10., 10.], 0.9)],
            &[gt("a", [0., 0., 10., 10.])],
            0.5,
        )
        .unwrap();
        assert_eq!(
            (
                m.count(MatchLabel::Tp),
                m.count(MatchLabel::Fp),
                m.unmatched_gt
            ),
            (1, 0, 0)
        );
    }

    #[test]
    fn duplicate_is_fp() {
        let dets = [
            det("a", [0., 0., 10., 10.], 0.6),
            det("a", [0., 0., 10., 11.], 0.8),
        ];
        let m = match_detections(&dets, &[gt("a", [0., 0., 10., 10.])], 0.5).unwrap();
        assert_eq!(m.labeled[0].det_index, 1);
        assert_eq!(m.labeled[0].label, MatchLabel::Tp);
        assert_eq!(m.labeled[1].label, MatchLabel::Fp);
    }

    #[test]
    fn ignore_regions_absorb() {
        let mut region = gt("a", [50., 50., 70., 70.]);
        region.ignore = true;
        let dets = [
            det("a", [50., 50., 70., 70.], 0.9),
            det("a", [51., 50., 70., 70.], 0.8),
        ];
        let m = match_detections(&dets, &[region], 0.5).unwrap();
        assert_eq!(m.count(MatchLabel::Ignored), 2);
        assert_eq!(m.total_gt, 0);
        assert_eq!(average_precision(&m.labeled, 0), 1.0);
    }

    #[test]
    fn mixed_images_rejected() {
        let e = match_detections(
            &[det("a", [0., 0., 1., 1.], 0.5)],
            &[gt("b", [0., 0., 1., 1.])],
            0.5,
        );
        assert!(matches!(e, Err(EvalError::MixedImages(..))));
    }

    #[test]
    fn ap_examples() {
        use MatchLabel::*;
        assert_eq!(average_precision(&labeled(&[(0.9, Tp), (0.8, Tp)]), 2), 1.0);
        assert_eq!(average_precision(&[], 3), 0.0);
        let ap = average_precision(&labeled(&[(0.9, Tp), (0.8, Fp), (0.7, Tp)]), 2);
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[], 0), 1.0);
        assert_eq!(average_precision(&labeled(&[(0.3, Fp)]), 0), 0.0);
    }

    #[test]
    fn mr_examples() {
        use MatchLabel::*;
        assert_eq!(
            log_average_miss_rate(&labeled(&[(0.9, Tp), (0.8, Tp)]), 2, 1),
            0.0
        );
        assert_eq!(log_average_miss_rate(&[], 4, 2), 1.0);
        // one TP then a FP: miss 0.5 until FPPI 1 is reached
        let v = log_average_miss_rate(&labeled(&[(0.9, Tp), (0.8, Fp)]), 2, 1);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reference_points() {
        let r = mr_reference_points();
        assert!((r[0] - 0.01).abs() < 1e-15);
        assert!((r[4] - 0.1).abs() < 1e-15);
        assert_eq!(r[8], 1.0);
    }

    #[test]
    fn slices() {
        let dets = [det("d", [0., 0., 10., 10.], 0.9)];
        let gts = [gt("d", [0., 0., 10., 10.])];
        let images = images_from_ground_truth(&gts);
        let r = evaluate(
            &dets,
            &gts,
            &images,
            &[Slice::Day, Slice::Night, Slice::All],
            0.5,
        )
        .unwrap();
        assert_eq!(r.mr_day, Some(0.0));
        assert_eq!(r.mr_night, None);
        assert_eq!(r.ap_all, 1.0);
        assert_eq!(r.counts.day.unwrap().tp, 1);

        let night_images = vec![ImageInfo {
            image_id: "d".into(),
            condition: Condition::Night,
        }];
        let n = evaluate(&dets, &gts, &night_images, &[Slice::Day, Slice::Night], 0.5).unwrap();
        assert_eq!(n.mr_night, r.mr_day);
        assert_eq!(n.mr_day, None);

        assert!(matches!(
            evaluate(&dets, &gts, &[], &[Slice::All], 0.5),
            Err(EvalError::UnknownImage(_))
        ));
    }

    #[test]
    fn report_row_format() {
        let r = EvalReport {
            ap_all: 0.9039,
            mr_day: Some(0.1399),
            mr_night: None,
            mr_all: Some(0.1216),
            counts: SliceCountsBySlice::default(),
            curve: vec![],
        };
        assert_eq!(r.table_row(), "   90.39    13.99        -    12.16");
    }
}
