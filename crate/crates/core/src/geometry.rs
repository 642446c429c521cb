//! Pixel sets, boxes and their overlap ratios.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

/// A pixel coordinate. Ordered row-major: by `y`, then `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub fn new(x: u32, y: u32) -> Self {
        Point { x, y }
    }
}

impl Ord for Point {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for Point {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Axis-aligned box over pixel cells, half-open: `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    /// Returns `None` unless `x0 < x1` and `y0 < y1`.
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Option<Self> {
        (x0 < x1 && y0 < y1).then_some(BBox { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w as u64 * h as u64
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    /// Canonical ordering key: top edge, left edge, then the far corner.
    pub fn order_key(&self) -> (u32, u32, u32, u32) {
        (self.y0, self.x0, self.y1, self.x1)
    }
}

/// Intersection over union of two boxes, by pixel area.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

/// A set of pixels kept sorted in row-major order without duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Mask {
    pixels: Vec<Point>,
}

impl Mask {
    pub fn from_points(mut pixels: Vec<Point>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Mask { pixels }
    }

    /// Caller guarantees `pixels` is strictly increasing in row-major order.
    pub(crate) fn from_sorted(pixels: Vec<Point>) -> Self {
        debug_assert!(pixels.windows(2).all(|w| w[0] < w[1]));
        Mask { pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[Point] {
        &self.pixels
    }

    pub fn iter(&self) -> impl Iterator<Item = Point> + '_ {
        self.pixels.iter().copied()
    }

    pub fn first(&self) -> Option<Point> {
        self.pixels.first().copied()
    }

    pub fn contains(&self, p: Point) -> bool {
        self.pixels.binary_search(&p).is_ok()
    }

    /// Tight bounding box, `None` for an empty mask.
    pub fn bbox(&self) -> Option<BBox> {
        let first = self.pixels.first()?;
        let last = self.pixels.last()?;
        let (mut x0, mut x1) = (u32::MAX, 0);
        for p in &self.pixels {
            x0 = x0.min(p.x);
            x1 = x1.max(p.x);
        }
        Some(BBox {
            x0,
            y0: first.y,
            x1: x1 + 1,
            y1: last.y + 1,
        })
    }

    pub fn intersection_len(&self, other: &Mask) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.pixels, &other.pixels);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn union(&self, other: &Mask) -> Mask {
        let (a, b) = (&self.pixels, &other.pixels);
        let mut out = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                Ordering::Less => {
                    out.push(a[i]);
                    i += 1;
                }
                Ordering::Greater => {
                    out.push(b[j]);
                    j += 1;
                }
                Ordering::Equal => {
                    out.push(a[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&a[i..]);
        out.extend_from_slice(&b[j..]);
        Mask { pixels: out }
    }
}

impl FromIterator<Point> for Mask {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        Mask::from_points(iter.into_iter().collect())
    }
}

/// Intersection over union of two pixel sets. Two empty sets give 0.
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 0.0;
    }
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn brute_bbox_iou(a: &BBox, b: &BBox) -> f64 {
        let (mut inter, mut union) = (0u64, 0u64);
        let w = a.x1.max(b.x1);
        let h = a.y1.max(b.y1);
        for y in 0..h {
            for x in 0..w {
                let p = Point::new(x, y);
                let (ia, ib) = (a.contains(p), b.contains(p));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    fn rect(x0: u32, y0: u32, x1: u32, y1: u32) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn bbox_iou_examples() {
        let a = rect(0, 0, 10, 10);
        assert_eq!(bbox_iou(&a, &a), 1.0);
        assert_eq!(bbox_iou(&a, &rect(10, 0, 20, 10)), 0.0);
        let b = rect(5, 0, 15, 10);
        let expected = brute_bbox_iou(&a, &b);
        assert_eq!(expected, 50.0 / 150.0);
        assert_eq!(bbox_iou(&a, &b), expected);
    }

    #[test]
    fn bbox_rejects_degenerate() {
        assert!(BBox::new(3, 0, 3, 2).is_none());
        assert!(BBox::new(0, 4, 1, 2).is_none());
    }

    #[test]
    fn mask_iou_examples() {
        let a: Mask = (0..10).map(|x| Point::new(x, 0)).collect();
        let b: Mask = (4..14).map(|x| Point::new(x, 0)).collect();
        assert_eq!(mask_iou(&a, &a), 1.0);
        assert_eq!(a.intersection_len(&b), 6);
        assert!((mask_iou(&a, &b) - 6.0 / 14.0).abs() < 1e-15);
        let c: Mask = (0..3).map(|y| Point::new(20, y)).collect();
        assert_eq!(mask_iou(&a, &c), 0.0);
    }

    #[test]
    fn mask_bbox_is_tight() {
        let m = Mask::from_points(vec![Point::new(2, 3), Point::new(3, 3), Point::new(2, 4)]);
        assert_eq!(m.bbox(), Some(rect(2, 3, 4, 5)));
        assert_eq!(Mask::default().bbox(), None);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0u32..12, 0u32..12, 1u32..8, 1u32..8).prop_map(|(x, y, w, h)| rect(x, y, x + w, y + h))
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        prop::collection::vec((0u32..8, 0u32..8), 1..30)
            .prop_map(|v| v.into_iter().map(|(x, y)| Point::new(x, y)).collect())
    }

    proptest! {
        #[test]
        fn bbox_iou_matches_pixel_count(a in arb_box(), b in arb_box()) {
            let iou = bbox_iou(&a, &b);
            prop_assert_eq!(iou, bbox_iou(&b, &a));
            prop_assert_eq!(iou, brute_bbox_iou(&a, &b));
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert_eq!(iou == 1.0, a == b);
        }

        #[test]
        fn mask_ops_match_hashset(a in arb_mask(), b in arb_mask()) {
            let sa: HashSet<Point> = a.iter().collect();
            let sb: HashSet<Point> = b.iter().collect();
            let inter = sa.intersection(&sb).count();
            let union = sa.union(&sb).count();
            prop_assert_eq!(a.intersection_len(&b), inter);
            let u = a.union(&b);
            prop_assert_eq!(u.len(), union);
            prop_assert!(u.iter().all(|p| sa.contains(&p) || sb.contains(&p)));
            let iou = mask_iou(&a, &b);
            prop_assert_eq!(iou, mask_iou(&b, &a));
            prop_assert_eq!(iou, inter as f64 / union as f64);
            prop_assert_eq!(iou == 1.0, a == b);
            let bb = a.bbox().unwrap();
            prop_assert!(a.iter().all(|p| bb.contains(p)));
        }
    }
}
