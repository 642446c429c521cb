//! Per-class coefficient of determination over per-image cell counts.

use serde::{Deserialize, Serialize};

use crate::detection::extract_detections;
use crate::error::{Error, Result};
use crate::scene::{LabeledScene, Source, NUM_CLASSES};

/// Per-class cell counts for one scene, indexed by class 1..=6.
pub type ClassCounts = [u64; NUM_CLASSES];

/// Number of instances per class, each instance labelled by its majority class.
pub fn count_cells(scene: &LabeledScene) -> ClassCounts {
    let mut counts = [0; NUM_CLASSES];
    for d in extract_detections(scene, Source::Semantic).detections() {
        counts[d.label.index()] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2 {
    /// `None` for a class whose ground-truth counts are constant while the
    /// predictions deviate from them.
    pub per_class: [Option<f64>; NUM_CLASSES],
    /// Mean over the defined classes.
    pub mean: Option<f64>,
}

/// `R2_c = 1 - SS_res / SS_tot` for each class over the scene axis.
///
/// Sums are formed in exact integer arithmetic: with `n` scenes,
/// `n * SS_tot = n * sum(g^2) - (sum g)^2`, so the only rounding is the
/// final division. A class with zero ground-truth variance scores 1 when
/// every residual is zero and is left undefined otherwise.
pub fn multiclass_r2(gt: &[ClassCounts], pred: &[ClassCounts]) -> Result<R2> {
    if gt.len() != pred.len() {
        return Err(Error::LengthMismatch(gt.len(), pred.len()));
    }
    if gt.is_empty() {
        return Err(Error::EmptyInput("R² needs at least one scene"));
    }
    let n = gt.len() as i128;
    let mut per_class = [None; NUM_CLASSES];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let (mut sum, mut sum_sq, mut ss_res) = (0i128, 0i128, 0i128);
        for (g, p) in gt.iter().zip(pred) {
            let (g, p) = (g[c] as i128, p[c] as i128);
            sum += g;
            sum_sq += g * g;
            ss_res += (g - p) * (g - p);
        }
        let ss_tot_n = n * sum_sq - sum * sum;
        *slot = if ss_tot_n == 0 {
            (ss_res == 0).then_some(1.0)
        } else {
            Some(1.0 - (n * ss_res) as f64 / ss_tot_n as f64)
        };
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(R2 { per_class, mean })
}
