//! Discrete nucleus detections and their extraction from label rasters.

use std::collections::{BTreeMap, VecDeque};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask, Point};
use crate::scene::{check_dims, ClassId, LabeledScene, Source, NUM_CLASSES};

/// One nucleus: a non-empty pixel mask with its tight box and class.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub id: u32,
    mask: Mask,
    bbox: BBox,
    pub label: ClassId,
    pub source: Source,
}

impl Detection {
    pub fn new(id: u32, mask: Mask, label: ClassId, source: Source) -> Result<Self> {
        if label.is_background() {
            return Err(Error::Config(format!("detection {id} carries the background label")));
        }
        let bbox = mask
            .bbox()
            .ok_or_else(|| Error::Config(format!("detection {id} has an empty mask")))?;
        Ok(Detection {
            id,
            mask,
            bbox,
            label,
            source,
        })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn area(&self) -> usize {
        self.mask.len()
    }

    /// Top edge, left edge, leftmost pixel of the top row, id.
    ///
    /// Disjoint masks never share their first row-major pixel, so within a
    /// producer's set the order does not depend on the id values.
    pub fn order_key(&self) -> (u32, u32, u32, u32) {
        let first = self.mask.first().expect("non-empty mask");
        (self.bbox.y0, self.bbox.x0, first.x, self.id)
    }
}

/// One producer's detections for a scene, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    width: u32,
    height: u32,
    detections: Vec<Detection>,
}

impl DetectionSet {
    /// Validates bounds and pairwise disjointness, then sorts canonically.
    pub fn new(width: u32, height: u32, mut detections: Vec<Detection>) -> Result<Self> {
        let mut owner = vec![false; width as usize * height as usize];
        for d in &detections {
            if d.bbox.x1 > width || d.bbox.y1 > height {
                return Err(Error::Config(format!(
                    "detection {} extends outside the {width}x{height} scene",
                    d.id
                )));
            }
            for p in d.mask.iter() {
                let slot = &mut owner[p.y as usize * width as usize + p.x as usize];
                if *slot {
                    return Err(Error::Config(format!(
                        "detection {} overlaps another detection at ({}, {})",
                        d.id, p.x, p.y
                    )));
                }
                *slot = true;
            }
        }
        detections.sort_by_key(Detection::order_key);
        Ok(DetectionSet {
            width,
            height,
            detections,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        DetectionSet {
            width,
            height,
            detections: Vec::new(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Detections whose label is `class`, keeping canonical order.
    pub fn filter_class(&self, class: ClassId) -> DetectionSet {
        DetectionSet {
            width: self.width,
            height: self.height,
            detections: self
                .detections
                .iter()
                .filter(|d| d.label == class)
                .cloned()
                .collect(),
        }
    }

    /// Paints every detection with its own id and label.
    pub fn rasterize(&self) -> LabeledScene {
        let n = self.width as usize * self.height as usize;
        let mut instances = vec![0u32; n];
        let mut classes = vec![ClassId::BACKGROUND; n];
        for d in &self.detections {
            for p in d.mask.iter() {
                let i = p.y as usize * self.width as usize + p.x as usize;
                instances[i] = d.id;
                classes[i] = d.label;
            }
        }
        LabeledScene::new(self.width, self.height, instances, classes)
            .expect("detections carry foreground labels and non-zero ids")
    }

    pub(crate) fn check_same_dims(&self, other: &DetectionSet, left: &str, right: &str) -> Result<()> {
        check_dims(left, self.dims(), right, other.dims())
    }
}

/// Majority foreground class from a histogram indexed by class value,
/// ties toward the smaller class.
pub(crate) fn majority_class(hist: &[u64; NUM_CLASSES + 1]) -> Option<ClassId> {
    let mut best: Option<(usize, u64)> = None;
    for (c, &n) in hist.iter().enumerate().skip(1) {
        if n > 0 && best.is_none_or(|(_, m)| n > m) {
            best = Some((c, n));
        }
    }
    best.map(|(c, _)| ClassId::new(c as u8).expect("index within class range"))
}

/// One detection per distinct non-zero instance id, labelled by the
/// majority class over its pixels.
pub fn extract_detections(scene: &LabeledScene, source: Source) -> DetectionSet {
    let width = scene.width();
    let mut per_id: BTreeMap<u32, (Vec<Point>, [u64; NUM_CLASSES + 1])> = BTreeMap::new();
    for (i, (&id, &class)) in scene.instance_map().iter().zip(scene.class_map()).enumerate() {
        if id == 0 {
            continue;
        }
        let entry = per_id.entry(id).or_insert_with(|| (Vec::new(), [0; NUM_CLASSES + 1]));
        entry
            .0
            .push(Point::new((i % width as usize) as u32, (i / width as usize) as u32));
        entry.1[class.value() as usize] += 1;
    }
    let mut detections: Vec<Detection> = per_id
        .into_iter()
        .map(|(id, (pixels, hist))| {
            let label = majority_class(&hist).expect("scene invariant: instance pixels are foreground");
            Detection::new(id, Mask::from_sorted(pixels), label, source)
                .expect("non-empty foreground detection")
        })
        .collect();
    detections.sort_by_key(Detection::order_key);
    DetectionSet {
        width,
        height: scene.height(),
        detections,
    }
}

/// Splits a class-only raster into instances: each 4-connected region of a
/// single non-background class gets its own id, numbered from 1 in
/// row-major order of the region's first pixel.
pub fn relabel_components(width: u32, height: u32, classes: &[ClassId]) -> Result<LabeledScene> {
    let (w, h) = (width as usize, height as usize);
    if classes.len() != w * h {
        return Err(Error::RasterLength {
            len: classes.len(),
            width,
            height,
        });
    }
    let mut ids = vec![0u32; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..classes.len() {
        if classes[start].is_background() || ids[start] != 0 {
            continue;
        }
        next += 1;
        let class = classes[start];
        ids[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if ids[j] == 0 && classes[j] == class {
                    ids[j] = next;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    LabeledScene::new(width, height, ids, classes.to_vec())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn scene(width: u32, height: u32, ids: &[u32], classes: &[u8]) -> LabeledScene {
        LabeledScene::from_raw(width, height, ids.to_vec(), classes).unwrap()
    }

    #[test]
    fn empty_scene_has_no_detections() {
        let set = extract_detections(&LabeledScene::empty(8, 8), Source::Semantic);
        assert!(set.is_empty());
        assert_eq!(set.dims(), (8, 8));
    }

    #[test]
    fn single_instance_bbox_and_label() {
        let mut ids = vec![0u32; 64];
        let mut cls = vec![0u8; 64];
        for (x, y) in [(2, 3), (3, 3), (2, 4)] {
            ids[y * 8 + x] = 5;
            cls[y * 8 + x] = 2;
        }
        let set = extract_detections(&scene(8, 8, &ids, &cls), Source::Instance);
        assert_eq!(set.len(), 1);
        let d = &set.detections()[0];
        assert_eq!(d.id, 5);
        assert_eq!(*d.bbox(), BBox::new(2, 3, 4, 5).unwrap());
        assert_eq!(d.label, ClassId::EPITHELIAL);
        assert_eq!(d.area(), 3);
        assert_eq!(d.source, Source::Instance);
    }

    #[test]
    fn majority_label() {
        let ids = [7, 7, 7, 7, 7];
        let set = extract_detections(&scene(5, 1, &ids, &[4, 6, 4, 6, 4]), Source::Semantic);
        assert_eq!(set.detections()[0].label, ClassId::PLASMA);
        // 2 vs 2: smaller class wins
        let set = extract_detections(&scene(4, 1, &[1, 1, 1, 1], &[6, 3, 6, 3]), Source::Semantic);
        assert_eq!(set.detections()[0].label, ClassId::LYMPHOCYTE);
    }

    #[test]
    fn detection_set_rejects_overlap() {
        let a = Detection::new(1, Mask::from_points(vec![Point::new(0, 0)]), ClassId::PLASMA, Source::Semantic).unwrap();
        let b = Detection::new(2, Mask::from_points(vec![Point::new(0, 0)]), ClassId::PLASMA, Source::Semantic).unwrap();
        assert!(DetectionSet::new(2, 2, vec![a.clone(), b]).is_err());
        assert!(DetectionSet::new(2, 2, vec![a.clone()]).is_ok());
        let outside = Detection::new(3, Mask::from_points(vec![Point::new(2, 0)]), ClassId::PLASMA, Source::Semantic).unwrap();
        assert!(DetectionSet::new(2, 2, vec![outside]).is_err());
    }

    #[test]
    fn detection_rejects_background_and_empty() {
        assert!(Detection::new(1, Mask::default(), ClassId::PLASMA, Source::Semantic).is_err());
        let m = Mask::from_points(vec![Point::new(0, 0)]);
        assert!(Detection::new(1, m, ClassId::BACKGROUND, Source::Semantic).is_err());
    }

    /// Independent flood fill with 4-connectivity, ids in order of discovery.
    fn flood_fill_oracle(w: usize, h: usize, cls: &[u8]) -> Vec<u32> {
        let mut out = vec![0u32; w * h];
        let mut next = 0;
        for sy in 0..h {
            for sx in 0..w {
                if cls[sy * w + sx] == 0 || out[sy * w + sx] != 0 {
                    continue;
                }
                next += 1;
                let mut stack = vec![(sx, sy)];
                while let Some((x, y)) = stack.pop() {
                    if out[y * w + x] != 0 {
                        continue;
                    }
                    out[y * w + x] = next;
                    let c = cls[y * w + x];
                    let ns = [
                        (x.wrapping_sub(1), y),
                        (x + 1, y),
                        (x, y.wrapping_sub(1)),
                        (x, y + 1),
                    ];
                    for (nx, ny) in ns {
                        if nx < w && ny < h && cls[ny * w + nx] == c && out[ny * w + nx] == 0 {
                            stack.push((nx, ny));
                        }
                    }
                }
            }
        }
        out
    }

    fn classes(raw: &[u8]) -> Vec<ClassId> {
        raw.iter().map(|&c| ClassId::new(c).unwrap()).collect()
    }

    #[test]
    fn relabel_examples() {
        let empty = relabel_components(4, 4, &[ClassId::BACKGROUND; 16]).unwrap();
        assert_eq!(empty.max_instance_id(), 0);

        #[rustfmt::skip]
        let two_blobs = [
            2, 2, 0, 0, 0,
            2, 2, 0, 2, 2,
            0, 0, 0, 2, 2,
        ];
        let s = relabel_components(5, 3, &classes(&two_blobs)).unwrap();
        assert_eq!(s.instance_map(), flood_fill_oracle(5, 3, &two_blobs).as_slice());
        assert_eq!(s.instance_at(0, 0), 1);
        assert_eq!(s.instance_at(4, 2), 2);

        #[rustfmt::skip]
        let diagonal = [
            3, 3, 0,
            3, 3, 0,
            0, 0, 3,
        ];
        let s = relabel_components(3, 3, &classes(&diagonal)).unwrap();
        assert_eq!(s.instance_map(), flood_fill_oracle(3, 3, &diagonal).as_slice());
        assert_ne!(s.instance_at(1, 1), s.instance_at(2, 2));
    }

    #[test]
    fn relabel_splits_touching_different_classes() {
        let raw = [1, 1, 4, 4];
        let s = relabel_components(4, 1, &classes(&raw)).unwrap();
        assert_eq!(s.instance_map(), &[1, 1, 2, 2]);
    }

    fn arb_class_raster() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
        (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(prop_oneof![3 => Just(0u8), 1 => 1u8..=6], w * h))
        })
    }

    proptest! {
        #[test]
        fn relabel_matches_flood_fill((w, h, raw) in arb_class_raster()) {
            let s = relabel_components(w as u32, h as u32, &classes(&raw)).unwrap();
            let expected = flood_fill_oracle(w, h, &raw);
            prop_assert_eq!(s.instance_map(), expected.as_slice());
        }

        #[test]
        fn extract_rasterize_round_trip((w, h, raw) in arb_class_raster(), salt in 1u32..1000) {
            let s = relabel_components(w as u32, h as u32, &classes(&raw)).unwrap();
            // scramble ids so they are not contiguous
            let (_, _, ids, cls) = s.into_parts();
            let ids: Vec<u32> = ids.iter().map(|&i| if i == 0 { 0 } else { i * 7919 + salt }).collect();
            let s = LabeledScene::new(w as u32, h as u32, ids, cls).unwrap();
            let set = extract_detections(&s, Source::Semantic);
            prop_assert_eq!(set.rasterize(), s.clone());
            for d in set.detections() {
                prop_assert!(d.mask().iter().all(|p| d.bbox().contains(p)));
            }
        }

        #[test]
        fn canonical_order_ignores_id_values((w, h, raw) in arb_class_raster(), salt in 1u32..1000) {
            let s = relabel_components(w as u32, h as u32, &classes(&raw)).unwrap();
            let n = s.max_instance_id();
            let (_, _, ids, cls) = s.clone().into_parts();
            // reverse the id assignment
            let flipped: Vec<u32> = ids.iter().map(|&i| if i == 0 { 0 } else { n + 1 - i + salt }).collect();
            let s2 = LabeledScene::new(w as u32, h as u32, flipped, cls).unwrap();
            let a = extract_detections(&s, Source::Semantic);
            let b = extract_detections(&s2, Source::Semantic);
            let masks_a: Vec<_> = a.detections().iter().map(|d| d.mask().clone()).collect();
            let masks_b: Vec<_> = b.detections().iter().map(|d| d.mask().clone()).collect();
            prop_assert_eq!(masks_a, masks_b);
        }
    }
}
