//! Panoptic-quality and count scoring of predicted scenes against ground truth.

mod loss;
mod pq;
mod r2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{cross_entropy, cross_entropy_gradient, OneHotLabelMap, ProbabilityMap, LOG_FLOOR};
pub use pq::{
    class_stats, match_instances, multiclass_pq_plus, panoptic_quality, scene_pq, MatchPair, MatchResult,
    PqPlus, PqStats, MATCH_IOU,
};
pub use r2::{count_cells, multiclass_r2, ClassCounts, R2};

use crate::error::{Error, Result};
use crate::scene::{LabeledScene, NUM_CLASSES};

/// Everything `eval` reports for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Mean over scenes of the class-agnostic PQ.
    pub pq: f64,
    pub pq_plus: [Option<f64>; NUM_CLASSES],
    pub mpq_plus: f64,
    pub r2: [Option<f64>; NUM_CLASSES],
    pub r2_mean: Option<f64>,
    /// Predicted cell counts per scene, in input order.
    pub per_scene_counts: Vec<ClassCounts>,
}

struct ScenePartial {
    pq: f64,
    class_stats: [PqStats; NUM_CLASSES],
    gt_counts: ClassCounts,
    pred_counts: ClassCounts,
}

/// Scores paired scenes. Scenes are processed in parallel; all sums are
/// taken afterwards in input order so the result does not depend on the
/// thread count.
pub fn evaluate(gt: &[LabeledScene], pred: &[LabeledScene]) -> Result<MetricsReport> {
    if gt.len() != pred.len() {
        return Err(Error::LengthMismatch(gt.len(), pred.len()));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("no scenes to evaluate"));
    }
    let partials: Vec<ScenePartial> = gt
        .par_iter()
        .zip(pred)
        .map(|(g, p)| {
            Ok(ScenePartial {
                pq: scene_pq(g, p)?,
                class_stats: class_stats(g, p)?,
                gt_counts: count_cells(g),
                pred_counts: count_cells(p),
            })
        })
        .collect::<Result<_>>()?;

    let pq = partials.iter().map(|s| s.pq).sum::<f64>() / partials.len() as f64;
    let mut totals = [PqStats::default(); NUM_CLASSES];
    for s in &partials {
        for (t, c) in totals.iter_mut().zip(&s.class_stats) {
            t.accumulate(c);
        }
    }
    let plus = PqPlus::from_stats(totals);
    let gt_counts: Vec<ClassCounts> = partials.iter().map(|s| s.gt_counts).collect();
    let pred_counts: Vec<ClassCounts> = partials.iter().map(|s| s.pred_counts).collect();
    let r2 = multiclass_r2(&gt_counts, &pred_counts)?;

    Ok(MetricsReport {
        pq,
        pq_plus: plus.per_class,
        mpq_plus: plus.mpq_plus,
        r2: r2.per_class,
        r2_mean: r2.mean,
        per_scene_counts: pred_counts,
    })
}
