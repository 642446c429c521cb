//! Ensemble of a semantic and an instance producer by overlap grouping.
//!
//! Unlike classic NMS, which keeps one detection per overlapping cluster and
//! drops the rest, every cluster here is collapsed into a single nucleus
//! whose mask is the union of the member masks and whose label is chosen by
//! a per-producer, per-class weighted vote.
//!
//! Steps:
//!
//! 1. Link a semantic detection to an instance detection when their boxes
//!    overlap with IoU at or above the configured threshold. Links are only
//!    drawn across producers; each producer's own masks are disjoint.
//! 2. Connected components of the link graph with two or more members form
//!    [`FusionGroup`]s. Anything left over is unmatched.
//! 3. Each group is painted as one instance; unmatched detections are passed
//!    through if their producer is allowed to keep singletons.
//! 4. Output instances are painted in canonical geometric order. A pixel
//!    claimed twice keeps the earlier instance.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detection::{Detection, DetectionSet};
use crate::error::{Error, Result};
use crate::geometry::{bbox_iou, BBox, Mask};
use crate::scene::{ClassId, LabeledScene, Source, NUM_CLASSES};

/// The two upstream models that feed the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Producer {
    Semantic,
    Instance,
}

impl From<Producer> for Source {
    fn from(p: Producer) -> Source {
        match p {
            Producer::Semantic => Source::Semantic,
            Producer::Instance => Source::Instance,
        }
    }
}

/// Per-class vote weights for each producer, indexed by class 1..=6.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", deny_unknown_fields)]
pub struct VotingWeights {
    semantic: [f64; NUM_CLASSES],
    instance: [f64; NUM_CLASSES],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    semantic: [f64; NUM_CLASSES],
    instance: [f64; NUM_CLASSES],
}

impl TryFrom<RawWeights> for VotingWeights {
    type Error = Error;

    fn try_from(raw: RawWeights) -> Result<Self> {
        VotingWeights::new(raw.semantic, raw.instance)
    }
}

impl VotingWeights {
    /// Semantic producer: strong on the rare classes (neutrophil, plasma,
    /// eosinophil).
    pub const DEFAULT_SEMANTIC: [f64; NUM_CLASSES] = [2.0, 1.0, 1.0, 2.0, 2.0, 1.0];
    /// Instance producer: flat 1.5, which never ties a 1 or a 2.
    pub const DEFAULT_INSTANCE: [f64; NUM_CLASSES] = [1.5; NUM_CLASSES];

    pub fn new(semantic: [f64; NUM_CLASSES], instance: [f64; NUM_CLASSES]) -> Result<Self> {
        if let Some(w) = semantic
            .iter()
            .chain(&instance)
            .find(|w| !(w.is_finite() && **w > 0.0))
        {
            return Err(Error::Config(format!("vote weights must be finite and > 0, got {w}")));
        }
        Ok(VotingWeights { semantic, instance })
    }

    pub fn weight(&self, producer: Producer, class: ClassId) -> f64 {
        match producer {
            Producer::Semantic => self.semantic[class.index()],
            Producer::Instance => self.instance[class.index()],
        }
    }

    pub fn semantic(&self) -> &[f64; NUM_CLASSES] {
        &self.semantic
    }

    pub fn instance(&self) -> &[f64; NUM_CLASSES] {
        &self.instance
    }

    /// Both vectors multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        VotingWeights::new(
            self.semantic.map(|w| w * factor),
            self.instance.map(|w| w * factor),
        )
    }
}

impl Default for VotingWeights {
    fn default() -> Self {
        VotingWeights {
            semantic: Self::DEFAULT_SEMANTIC,
            instance: Self::DEFAULT_INSTANCE,
        }
    }
}

/// How to resolve equal vote totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    /// Among tied labels, prefer one voted by a semantic member, then the
    /// smaller class id.
    #[default]
    PreferSemanticThenLowerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub iou_threshold: f64,
    pub keep_unmatched_semantic: bool,
    pub keep_unmatched_instance: bool,
    pub tie_break: TieBreak,
}

impl FusionConfig {
    pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

    pub fn validate(&self) -> Result<()> {
        if self.iou_threshold > 0.0 && self.iou_threshold <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )))
        }
    }

    fn keeps(&self, producer: Producer) -> bool {
        match producer {
            Producer::Semantic => self.keep_unmatched_semantic,
            Producer::Instance => self.keep_unmatched_instance,
        }
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            iou_threshold: Self::DEFAULT_IOU_THRESHOLD,
            keep_unmatched_semantic: true,
            keep_unmatched_instance: true,
            tie_break: TieBreak::default(),
        }
    }
}

/// A detection tagged with the producer whose set it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub detection: Detection,
    pub producer: Producer,
}

/// Detections from both producers judged to be the same nucleus.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionGroup {
    /// Semantic members first, then instance members, each in canonical order.
    pub members: Vec<Member>,
    pub merged_mask: Mask,
    pub merged_bbox: BBox,
    /// Summed weight per class, indexed by class 1..=6.
    pub scores: [f64; NUM_CLASSES],
    pub winner: ClassId,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OverlapGroups {
    pub groups: Vec<FusionGroup>,
    /// Detections without any cross-producer link, in canonical order with
    /// semantic before instance on equal keys.
    pub unmatched: Vec<Member>,
}

/// Summed weight per class. Members are added in the order given.
pub fn tally_votes(members: &[(ClassId, Producer)], weights: &VotingWeights) -> [f64; NUM_CLASSES] {
    let mut scores = [0.0; NUM_CLASSES];
    for &(label, producer) in members {
        scores[label.index()] += weights.weight(producer, label);
    }
    scores
}

/// Weighted vote over member labels.
///
/// Panics if `members` is empty or carries a background label.
pub fn vote_label(members: &[(ClassId, Producer)], weights: &VotingWeights, tie_break: TieBreak) -> ClassId {
    assert!(!members.is_empty(), "vote needs at least one member");
    let scores = tally_votes(members, weights);
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied = ClassId::foreground().filter(|c| scores[c.index()] == best);
    match tie_break {
        TieBreak::PreferSemanticThenLowerClass => {
            let tied: Vec<ClassId> = tied.collect();
            tied.iter()
                .copied()
                .find(|c| members.iter().any(|&(l, p)| l == *c && p == Producer::Semantic))
                .unwrap_or(tied[0])
        }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins so that representatives are stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn compare_regions(a: (&BBox, &Mask, ClassId), b: (&BBox, &Mask, ClassId)) -> Ordering {
    a.0.order_key()
        .cmp(&b.0.order_key())
        .then_with(|| a.1.pixels().cmp(b.1.pixels()))
        .then_with(|| a.2.cmp(&b.2))
}

/// Links semantic and instance detections whose boxes overlap enough and
/// returns the connected components with at least two members.
pub fn build_overlap_groups(
    semantic: &DetectionSet,
    instance: &DetectionSet,
    weights: &VotingWeights,
    cfg: &FusionConfig,
) -> Result<OverlapGroups> {
    cfg.validate()?;
    semantic.check_same_dims(instance, "semantic detections", "instance detections")?;

    let sem = semantic.detections();
    let inst = instance.detections();
    let offset = sem.len();
    let mut sets = DisjointSet::new(sem.len() + inst.len());
    let mut linked = vec![false; sem.len() + inst.len()];
    for (i, s) in sem.iter().enumerate() {
        for (j, d) in inst.iter().enumerate() {
            if bbox_iou(s.bbox(), d.bbox()) >= cfg.iou_threshold {
                sets.union(i, offset + j);
                linked[i] = true;
                linked[offset + j] = true;
            }
        }
    }

    let member = |k: usize| {
        if k < offset {
            Member {
                detection: sem[k].clone(),
                producer: Producer::Semantic,
            }
        } else {
            Member {
                detection: inst[k - offset].clone(),
                producer: Producer::Instance,
            }
        }
    };

    // Index order is semantic-canonical then instance-canonical, so pushing
    // in index order keeps members in the documented order.
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); linked.len()];
    let mut unmatched = Vec::new();
    for (k, &is_linked) in linked.iter().enumerate() {
        if is_linked {
            let root = sets.find(k);
            by_root[root].push(k);
        } else {
            unmatched.push(member(k));
        }
    }

    let mut groups: Vec<FusionGroup> = by_root
        .into_iter()
        .filter(|ks| !ks.is_empty())
        .map(|ks| {
            let members: Vec<Member> = ks.into_iter().map(member).collect();
            let merged_mask = members
                .iter()
                .skip(1)
                .fold(members[0].detection.mask().clone(), |acc, m| acc.union(m.detection.mask()));
            let merged_bbox = merged_mask.bbox().expect("members have non-empty masks");
            let votes: Vec<(ClassId, Producer)> =
                members.iter().map(|m| (m.detection.label, m.producer)).collect();
            FusionGroup {
                scores: tally_votes(&votes, weights),
                winner: vote_label(&votes, weights, cfg.tie_break),
                members,
                merged_mask,
                merged_bbox,
            }
        })
        .collect();
    groups.sort_by(|a, b| {
        compare_regions(
            (&a.merged_bbox, &a.merged_mask, a.winner),
            (&b.merged_bbox, &b.merged_mask, b.winner),
        )
    });
    unmatched.sort_by(|a, b| {
        compare_regions(
            (a.detection.bbox(), a.detection.mask(), a.detection.label),
            (b.detection.bbox(), b.detection.mask(), b.detection.label),
        )
        .then_with(|| a.producer.cmp(&b.producer))
    });

    Ok(OverlapGroups { groups, unmatched })
}

/// Fuses the two producers' detections into a single labelled scene.
///
/// Output instance ids run from 1 in canonical order. An instance whose
/// pixels were all claimed by earlier instances is dropped.
pub fn fuse(
    semantic: &DetectionSet,
    instance: &DetectionSet,
    weights: &VotingWeights,
    cfg: &FusionConfig,
) -> Result<LabeledScene> {
    let OverlapGroups { groups, unmatched } = build_overlap_groups(semantic, instance, weights, cfg)?;

    let mut regions: Vec<(&BBox, &Mask, ClassId)> = groups
        .iter()
        .map(|g| (&g.merged_bbox, &g.merged_mask, g.winner))
        .chain(
            unmatched
                .iter()
                .filter(|m| cfg.keeps(m.producer))
                .map(|m| (m.detection.bbox(), m.detection.mask(), m.detection.label)),
        )
        .collect();
    regions.sort_by(|a, b| compare_regions(*a, *b));

    let (width, height) = semantic.dims();
    let n = width as usize * height as usize;
    let mut instances = vec![0u32; n];
    let mut classes = vec![ClassId::BACKGROUND; n];
    let mut next = 0u32;
    for (_, mask, label) in regions {
        let id = next + 1;
        let mut painted = false;
        for p in mask.iter() {
            let i = p.y as usize * width as usize + p.x as usize;
            if instances[i] == 0 {
                instances[i] = id;
                classes[i] = label;
                painted = true;
            }
        }
        if painted {
            next = id;
        }
    }
    LabeledScene::new(width, height, instances, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::extract_detections;
    use crate::geometry::Point;

    fn rect_detection(id: u32, x0: u32, y0: u32, x1: u32, y1: u32, label: u8, source: Source) -> Detection {
        let pixels = (y0..y1).flat_map(|y| (x0..x1).map(move |x| Point::new(x, y))).collect();
        Detection::new(id, Mask::from_points(pixels), ClassId::new(label).unwrap(), source).unwrap()
    }

    fn set(dets: Vec<Detection>) -> DetectionSet {
        DetectionSet::new(64, 64, dets).unwrap()
    }

    fn c(v: u8) -> ClassId {
        ClassId::new(v).unwrap()
    }

    #[test]
    fn default_weights() {
        let w = VotingWeights::default();
        assert_eq!(w.semantic(), &[2.0, 1.0, 1.0, 2.0, 2.0, 1.0]);
        assert_eq!(w.instance(), &[1.5; 6]);
    }

    #[test]
    fn weights_reject_non_positive() {
        assert!(VotingWeights::new([1.0; 6], [1.0, 1.0, 0.0, 1.0, 1.0, 1.0]).is_err());
        assert!(VotingWeights::new([f64::NAN; 6], [1.0; 6]).is_err());
        assert!(serde_json::from_str::<VotingWeights>(r#"{"semantic":[1,1,1,1,1,1],"instance":[1,1,1,1,1,-1]}"#).is_err());
        assert!(serde_json::from_str::<VotingWeights>(r#"{"semantic":[1,1,1,1,1],"instance":[1,1,1,1,1,1]}"#).is_err());
        let w: VotingWeights =
            serde_json::from_str(r#"{"semantic":[2,1,1,2,2,1],"instance":[1.5,1.5,1.5,1.5,1.5,1.5]}"#).unwrap();
        assert_eq!(w, VotingWeights::default());
    }

    #[test]
    fn config_threshold_bounds() {
        let mut cfg = FusionConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.iou_threshold = 0.0;
        assert!(cfg.validate().is_err());
        cfg.iou_threshold = 1.0;
        assert!(cfg.validate().is_ok());
        cfg.iou_threshold = 1.01;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn vote_examples() {
        let w = VotingWeights::default();
        let tb = TieBreak::default();
        assert_eq!(
            vote_label(&[(c(1), Producer::Semantic), (c(2), Producer::Instance)], &w, tb),
            ClassId::NEUTROPHIL
        );
        assert_eq!(
            tally_votes(&[(c(1), Producer::Semantic), (c(2), Producer::Instance)], &w),
            [2.0, 1.5, 0.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            vote_label(&[(c(4), Producer::Semantic), (c(4), Producer::Instance)], &w, tb),
            ClassId::PLASMA
        );
        assert_eq!(
            vote_label(&[(c(2), Producer::Semantic), (c(6), Producer::Instance)], &w, tb),
            ClassId::CONNECTIVE
        );
    }

    #[test]
    fn vote_tie_prefers_semantic_then_lower_class() {
        let w = VotingWeights::default();
        let tb = TieBreak::default();
        // class 2: 1.5 + 1.5 from instance; class 3: 1 + 1 + 1 from semantic
        let members = [
            (c(2), Producer::Instance),
            (c(3), Producer::Semantic),
            (c(2), Producer::Instance),
            (c(3), Producer::Semantic),
            (c(3), Producer::Semantic),
        ];
        assert_eq!(tally_votes(&members, &w)[1], 3.0);
        assert_eq!(tally_votes(&members, &w)[2], 3.0);
        assert_eq!(vote_label(&members, &w, tb), c(3));
        // tie with no semantic voter on either label → lower class
        let members = [(c(5), Producer::Instance), (c(2), Producer::Instance)];
        assert_eq!(vote_label(&members, &w, tb), c(2));
        // semantic holds the higher class
        let flat = VotingWeights::new([1.0; 6], [1.0; 6]).unwrap();
        let members = [(c(2), Producer::Instance), (c(5), Producer::Semantic)];
        assert_eq!(vote_label(&members, &flat, tb), c(5));
    }

    #[test]
    fn no_tie_for_any_default_pair() {
        let w = VotingWeights::default();
        for s in ClassId::foreground() {
            for i in ClassId::foreground() {
                let scores = tally_votes(&[(s, Producer::Semantic), (i, Producer::Instance)], &w);
                if s != i {
                    assert_ne!(scores[s.index()], scores[i.index()], "tie for {s} vs {i}");
                }
            }
        }
    }

    #[test]
    fn empty_inputs() {
        let out = build_overlap_groups(&set(vec![]), &set(vec![]), &VotingWeights::default(), &FusionConfig::default())
            .unwrap();
        assert!(out.groups.is_empty() && out.unmatched.is_empty());
    }

    #[test]
    fn identical_boxes_form_one_group() {
        let s = set(vec![rect_detection(1, 0, 0, 10, 10, 1, Source::Semantic)]);
        let i = set(vec![rect_detection(9, 0, 0, 10, 10, 2, Source::Instance)]);
        let out = build_overlap_groups(&s, &i, &VotingWeights::default(), &FusionConfig::default()).unwrap();
        assert_eq!(out.groups.len(), 1);
        assert_eq!(out.groups[0].members.len(), 2);
        assert_eq!(out.groups[0].winner, ClassId::NEUTROPHIL);
        assert!(out.unmatched.is_empty());
    }

    #[test]
    fn one_group_and_one_unmatched() {
        let s = set(vec![rect_detection(1, 0, 0, 10, 10, 3, Source::Semantic)]);
        let i = set(vec![
            rect_detection(1, 0, 0, 10, 10, 3, Source::Instance),
            rect_detection(2, 30, 30, 40, 40, 3, Source::Instance),
        ]);
        let out = build_overlap_groups(&s, &i, &VotingWeights::default(), &FusionConfig::default()).unwrap();
        assert_eq!(out.groups.len(), 1);
        assert_eq!(out.groups[0].members.len(), 2);
        assert_eq!(out.unmatched.len(), 1);
        assert_eq!(out.unmatched[0].producer, Producer::Instance);
        assert_eq!(out.unmatched[0].detection.id, 2);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = DetectionSet::empty(10, 10);
        let i = DetectionSet::empty(10, 11);
        assert!(matches!(
            fuse(&s, &i, &VotingWeights::default(), &FusionConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn one_sided_identity() {
        let s = set(vec![
            rect_detection(4, 0, 0, 3, 3, 2, Source::Semantic),
            rect_detection(8, 5, 5, 9, 7, 5, Source::Semantic),
        ]);
        let out = fuse(&s, &set(vec![]), &VotingWeights::default(), &FusionConfig::default()).unwrap();
        let back = extract_detections(&out, Source::Fused);
        let masks: Vec<_> = back.detections().iter().map(|d| (d.mask().clone(), d.label)).collect();
        let expected: Vec<_> = s.detections().iter().map(|d| (d.mask().clone(), d.label)).collect();
        assert_eq!(masks, expected);
        assert_eq!(out.max_instance_id(), 2);
    }

    #[test]
    fn merged_mask_is_union() {
        // checkerboard halves of a 4x4 box: disjoint pixels, identical boxes
        let even: Vec<Point> = (0..4)
            .flat_map(|y| (0..4).map(move |x| Point::new(x, y)))
            .filter(|p| (p.x + p.y) % 2 == 0)
            .collect();
        let odd: Vec<Point> = (0..4)
            .flat_map(|y| (0..4).map(move |x| Point::new(x, y)))
            .filter(|p| (p.x + p.y) % 2 == 1)
            .collect();
        let s = set(vec![Detection::new(1, Mask::from_points(even.clone()), c(2), Source::Semantic).unwrap()]);
        let i = set(vec![Detection::new(1, Mask::from_points(odd.clone()), c(2), Source::Instance).unwrap()]);
        assert_eq!(bbox_iou(s.detections()[0].bbox(), i.detections()[0].bbox()), 1.0);
        let out = fuse(&s, &i, &VotingWeights::default(), &FusionConfig::default()).unwrap();
        let expected: std::collections::BTreeSet<Point> = even.into_iter().chain(odd).collect();
        let got: std::collections::BTreeSet<Point> = (0..64)
            .flat_map(|y| (0..64).map(move |x| Point::new(x, y)))
            .filter(|p| out.instance_at(p.x, p.y) == 1)
            .collect();
        assert_eq!(got, expected);
        assert_eq!(out.max_instance_id(), 1);
    }

    #[test]
    fn dropping_unmatched() {
        let s = set(vec![rect_detection(1, 0, 0, 4, 4, 1, Source::Semantic)]);
        let i = set(vec![rect_detection(1, 20, 20, 24, 24, 2, Source::Instance)]);
        let cfg = FusionConfig {
            keep_unmatched_instance: false,
            ..FusionConfig::default()
        };
        let out = fuse(&s, &i, &VotingWeights::default(), &cfg).unwrap();
        assert_eq!(out.max_instance_id(), 1);
        assert_eq!(out.class_at(0, 0), ClassId::NEUTROPHIL);
        assert_eq!(out.instance_at(21, 21), 0);
    }

    #[test]
    fn transitive_groups_exceed_two_members() {
        // one wide semantic box overlapping two instance boxes
        let s = set(vec![rect_detection(1, 0, 0, 10, 10, 2, Source::Semantic)]);
        let i = set(vec![
            rect_detection(1, 0, 0, 10, 8, 6, Source::Instance),
            rect_detection(2, 0, 8, 10, 10, 6, Source::Instance),
        ]);
        let cfg = FusionConfig {
            iou_threshold: 0.2,
            ..FusionConfig::default()
        };
        let out = build_overlap_groups(&s, &i, &VotingWeights::default(), &cfg).unwrap();
        assert_eq!(out.groups.len(), 1);
        assert_eq!(out.groups[0].members.len(), 3);
        assert_eq!(out.groups[0].scores[5], 3.0);
        assert_eq!(out.groups[0].winner, ClassId::CONNECTIVE);
    }

    #[test]
    fn overlapping_unmatched_pixels_go_to_earlier_instance() {
        // boxes overlap a little (IoU < 0.5): both kept, shared pixels once
        let s = set(vec![rect_detection(1, 0, 0, 6, 6, 1, Source::Semantic)]);
        let i = set(vec![rect_detection(1, 4, 4, 10, 10, 3, Source::Instance)]);
        let out = fuse(&s, &i, &VotingWeights::default(), &FusionConfig::default()).unwrap();
        assert_eq!(out.instance_at(5, 5), 1);
        assert_eq!(out.class_at(5, 5), ClassId::NEUTROPHIL);
        assert_eq!(out.instance_at(6, 6), 2);
        assert_eq!(out.class_at(9, 9), ClassId::LYMPHOCYTE);
    }
}
