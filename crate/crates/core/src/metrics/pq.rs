//! Instance matching and panoptic quality.
//!
//! A ground-truth and a predicted instance match when their mask IoU is
//! strictly above 0.5. Two masks that each cover more than half of the
//! union can only pair with each other, so every instance matches at most
//! once and no assignment search is needed.
//!
//! `PQ = sum(IoU over matches) / (TP + FP / 2 + FN / 2)`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{extract_detections, DetectionSet};
use crate::error::{Error, Result};
use crate::scene::{check_dims, ClassId, LabeledScene, Source, NUM_CLASSES};

/// Matches need mask IoU strictly greater than this.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub gt_id: u32,
    pub pred_id: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// In canonical order of the ground-truth detections.
    pub pairs: Vec<MatchPair>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
}

impl MatchResult {
    pub fn stats(&self) -> PqStats {
        PqStats {
            tp: self.pairs.len() as u64,
            fp: self.unmatched_pred.len() as u64,
            fn_: self.unmatched_gt.len() as u64,
            iou_sum: self.pairs.iter().map(|p| p.iou).sum(),
        }
    }
}

/// Pairs ground-truth and predicted instances whose mask IoU exceeds 0.5.
pub fn match_instances(gt: &DetectionSet, pred: &DetectionSet) -> Result<MatchResult> {
    check_dims("ground truth", gt.dims(), "prediction", pred.dims())?;
    let width = gt.width() as usize;
    let mut owner = vec![usize::MAX; width * gt.height() as usize];
    for (k, d) in pred.detections().iter().enumerate() {
        for p in d.mask().iter() {
            owner[p.y as usize * width + p.x as usize] = k;
        }
    }

    let mut result = MatchResult::default();
    let mut pred_matched = vec![false; pred.len()];
    let mut overlaps: HashMap<usize, usize> = HashMap::new();
    for g in gt.detections() {
        overlaps.clear();
        for p in g.mask().iter() {
            let k = owner[p.y as usize * width + p.x as usize];
            if k != usize::MAX {
                *overlaps.entry(k).or_default() += 1;
            }
        }
        let hit = overlaps.iter().find_map(|(&k, &inter)| {
            let union = g.area() + pred.detections()[k].area() - inter;
            let iou = inter as f64 / union as f64;
            (iou > MATCH_IOU).then_some((k, iou))
        });
        match hit {
            Some((k, iou)) => {
                pred_matched[k] = true;
                result.pairs.push(MatchPair {
                    gt_id: g.id,
                    pred_id: pred.detections()[k].id,
                    iou,
                });
            }
            None => result.unmatched_gt.push(g.id),
        }
    }
    result.unmatched_pred = pred
        .detections()
        .iter()
        .zip(&pred_matched)
        .filter(|(_, &m)| !m)
        .map(|(d, _)| d.id)
        .collect();
    Ok(result)
}

/// Sufficient statistics for panoptic quality.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl PqStats {
    /// Whether any instance was seen on either side.
    pub fn is_defined(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    /// Panoptic quality; an empty comparison scores 1.0.
    pub fn pq(&self) -> f64 {
        if !self.is_defined() {
            return 1.0;
        }
        self.iou_sum / (self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64)
    }

    pub fn accumulate(&mut self, other: &PqStats) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
    }
}

pub fn panoptic_quality(matches: &MatchResult) -> f64 {
    matches.stats().pq()
}

/// Class-agnostic PQ of a single scene.
pub fn scene_pq(gt: &LabeledScene, pred: &LabeledScene) -> Result<f64> {
    let g = extract_detections(gt, Source::Semantic);
    let p = extract_detections(pred, Source::Fused);
    Ok(panoptic_quality(&match_instances(&g, &p)?))
}

/// Per-class matching statistics for one scene. Matching only considers
/// instances of the same class on both sides.
pub fn class_stats(gt: &LabeledScene, pred: &LabeledScene) -> Result<[PqStats; NUM_CLASSES]> {
    check_dims("ground truth", gt.dims(), "prediction", pred.dims())?;
    let g = extract_detections(gt, Source::Semantic);
    let p = extract_detections(pred, Source::Fused);
    let mut out = [PqStats::default(); NUM_CLASSES];
    for class in ClassId::foreground() {
        out[class.index()] = match_instances(&g.filter_class(class), &p.filter_class(class))?.stats();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqPlus {
    /// `None` where a class never appears in ground truth or prediction.
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub mpq_plus: f64,
    pub stats: [PqStats; NUM_CLASSES],
}

impl PqPlus {
    pub fn from_stats(stats: [PqStats; NUM_CLASSES]) -> Self {
        let per_class = stats.map(|s| s.is_defined().then(|| s.pq()));
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mpq_plus = if defined.is_empty() {
            1.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        PqPlus {
            per_class,
            mpq_plus,
            stats,
        }
    }
}

/// Dataset-level per-class PQ: counts and IoU sums are pooled over all
/// scenes before dividing, then averaged over the classes that occur.
pub fn multiclass_pq_plus(gt: &[LabeledScene], pred: &[LabeledScene]) -> Result<PqPlus> {
    if gt.len() != pred.len() {
        return Err(Error::LengthMismatch(gt.len(), pred.len()));
    }
    let per_scene: Vec<[PqStats; NUM_CLASSES]> = gt
        .par_iter()
        .zip(pred)
        .map(|(g, p)| class_stats(g, p))
        .collect::<Result<_>>()?;
    let mut total = [PqStats::default(); NUM_CLASSES];
    for scene in &per_scene {
        for (t, s) in total.iter_mut().zip(scene) {
            t.accumulate(s);
        }
    }
    Ok(PqPlus::from_stats(total))
}
