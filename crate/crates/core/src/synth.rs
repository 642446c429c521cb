//! Synthetic ground truth and producer emulation.
//!
//! [`generate_scene`] draws disjoint elliptical nuclei over a noisy
//! background. [`perturb`] degrades a scene the way an imperfect producer
//! would: masks shrink or grow, labels are resampled through a confusion
//! matrix, and cells go missing.

use image::{Rgb, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::detection::extract_detections;
use crate::error::{Error, Result};
use crate::scene::{ClassId, LabeledScene, Source, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub n_cells: usize,
    /// Semi-axis range in pixels.
    pub radius_range: (f64, f64),
    pub class_frequencies: [f64; NUM_CLASSES],
    pub seed: u64,
    /// Placement attempts allowed per cell before giving up.
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 256,
            height: 256,
            n_cells: 40,
            radius_range: (4.0, 8.0),
            class_frequencies: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
            seed: 0,
            max_attempts: 1000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("scene dimensions must be positive".into());
        }
        let (lo, hi) = self.radius_range;
        if !(lo.is_finite() && hi.is_finite() && lo >= 1.0 && lo <= hi) {
            return bad(format!("radius_range must satisfy 1 <= low <= high, got ({lo}, {hi})"));
        }
        if self.class_frequencies.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return bad("class frequencies must be finite and non-negative".into());
        }
        let sum: f64 = self.class_frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("class frequencies sum to {sum}, expected 1"));
        }
        Ok(())
    }
}

/// Geometry and class of one generated nucleus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCell {
    pub id: u32,
    pub class: ClassId,
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub angle: f64,
    pub area: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub image: RgbImage,
    pub scene: LabeledScene,
    pub cells: Vec<SynthCell>,
}

/// Pixels whose centres fall inside the rotated ellipse, or `None` if the
/// ellipse pokes outside the scene.
fn ellipse_pixels(center: (f64, f64), radii: (f64, f64), angle: f64, width: u32, height: u32) -> Option<Vec<(u32, u32)>> {
    let (cx, cy) = center;
    let r = radii.0.max(radii.1);
    if cx - r < 0.0 || cy - r < 0.0 || cx + r > width as f64 || cy + r > height as f64 {
        return None;
    }
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::new();
    for y in (cy - r).floor() as u32..((cy + r).ceil() as u32).min(height) {
        for x in (cx - r).floor() as u32..((cx + r).ceil() as u32).min(width) {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (dx * cos + dy * sin) / radii.0;
            let v = (-dx * sin + dy * cos) / radii.1;
            if u * u + v * v <= 1.0 {
                out.push((x, y));
            }
        }
    }
    (!out.is_empty()).then_some(out)
}

const CLASS_COLOURS: [[u8; 3]; NUM_CLASSES] = [
    [120, 40, 140],
    [90, 50, 150],
    [50, 20, 90],
    [110, 60, 130],
    [170, 60, 110],
    [130, 80, 160],
];

/// Places `n_cells` disjoint ellipses by rejection sampling. Cells never
/// touch: each keeps a one-pixel background gap (4-neighbourhood).
pub fn generate_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = WeightedIndex::new(cfg.class_frequencies).map_err(|e| Error::Config(e.to_string()))?;
    let mut ids = vec![0u32; (w * h) as usize];
    let mut class_map = vec![ClassId::BACKGROUND; (w * h) as usize];
    let mut cells = Vec::with_capacity(cfg.n_cells);
    let mut attempts = 0;

    let blocked = |ids: &[u32], x: u32, y: u32| {
        let at = |x: u32, y: u32| ids[(y * w + x) as usize] != 0;
        at(x, y)
            || (x > 0 && at(x - 1, y))
            || (x + 1 < w && at(x + 1, y))
            || (y > 0 && at(x, y - 1))
            || (y + 1 < h && at(x, y + 1))
    };

    while cells.len() < cfg.n_cells {
        let class = ClassId::from_index(classes.sample(&mut rng)).expect("six weights");
        let id = cells.len() as u32 + 1;
        let mut placed = false;
        for _ in 0..cfg.max_attempts {
            attempts += 1;
            let (lo, hi) = cfg.radius_range;
            let radii = if lo == hi {
                (lo, lo)
            } else {
                (rng.random_range(lo..=hi), rng.random_range(lo..=hi))
            };
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let center = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let Some(pixels) = ellipse_pixels(center, radii, angle, w, h) else {
                continue;
            };
            if pixels.iter().any(|&(x, y)| blocked(&ids, x, y)) {
                continue;
            }
            for &(x, y) in &pixels {
                ids[(y * w + x) as usize] = id;
                class_map[(y * w + x) as usize] = class;
            }
            cells.push(SynthCell {
                id,
                class,
                center,
                radii,
                angle,
                area: pixels.len(),
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Placement {
                placed: cells.len(),
                requested: cfg.n_cells,
                attempts,
            });
        }
    }

    // texture comes from its own stream so it never shifts the geometry
    let mut paint = ChaCha8Rng::seed_from_u64(cfg.seed);
    paint.set_stream(1);
    let image = RgbImage::from_fn(w, h, |x, y| {
        let jitter: i16 = paint.random_range(-12..=12);
        let base = match class_map[(y * w + x) as usize] {
            c if c.is_background() => [236, 206, 224],
            c => CLASS_COLOURS[c.index()],
        };
        Rgb(base.map(|v| (v as i16 + jitter).clamp(0, 255) as u8))
    });
    let scene = LabeledScene::new(w, h, ids, class_map).expect("painted pairs are consistent");
    Ok(SynthScene { image, scene, cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "magnitude", rename_all = "lowercase")]
pub enum MaskNoise {
    #[default]
    None,
    /// Peel this many 4-connected boundary layers (never below one layer).
    Erode(u32),
    /// Grow this many layers into pixels that were background.
    Dilate(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub mask_noise: MaskNoise,
    /// Row `i` is the distribution of the emitted label for true class `i + 1`.
    pub label_confusion: [[f64; NUM_CLASSES]; NUM_CLASSES],
    pub drop_rate: f64,
    pub seed: u64,
}

fn identity_confusion() -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { 1.0 } else { 0.0 }))
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            mask_noise: MaskNoise::None,
            label_confusion: identity_confusion(),
            drop_rate: 0.0,
            seed: 0,
        }
    }
}

impl PerturbConfig {
    /// Correct labels, masks eroded by one layer: a producer that knows the
    /// classes but under-segments.
    pub fn label_correct_mask_eroded(seed: u64) -> Self {
        PerturbConfig {
            mask_noise: MaskNoise::Erode(1),
            seed,
            ..PerturbConfig::default()
        }
    }

    /// Exact masks, but half of the neutrophils, plasma cells and
    /// eosinophils are reported as epithelial, lymphocyte and connective
    /// respectively.
    pub fn label_confused_mask_exact(seed: u64) -> Self {
        let mut confusion = identity_confusion();
        for (rare, common) in [(0, 1), (3, 2), (4, 5)] {
            confusion[rare][rare] = 0.5;
            confusion[rare][common] = 0.5;
        }
        PerturbConfig {
            label_confusion: confusion,
            seed,
            ..PerturbConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop_rate must lie in [0, 1], got {}", self.drop_rate)));
        }
        for (i, row) in self.label_confusion.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Config(format!("confusion row {} has an entry outside [0, 1]", i + 1)));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("confusion row {} sums to {sum}", i + 1)));
            }
        }
        Ok(())
    }
}

fn neighbours(i: usize, w: usize, h: usize) -> impl Iterator<Item = Option<usize>> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
}

/// Applies per-cell dropping, label resampling and mask noise, visiting
/// cells in canonical order. Instance ids are preserved.
pub fn perturb(scene: &LabeledScene, cfg: &PerturbConfig) -> Result<LabeledScene> {
    cfg.validate()?;
    let (w, h) = (scene.width() as usize, scene.height() as usize);
    let rows = cfg
        .label_confusion
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let original_fg: Vec<bool> = scene.instance_map().iter().map(|&id| id != 0).collect();
    let mut ids = vec![0u32; w * h];
    let mut classes = vec![ClassId::BACKGROUND; w * h];
    let mut claimed = original_fg.clone();

    for d in extract_detections(scene, Source::Semantic).detections() {
        // draw both every time so one cell's fate never shifts another's
        let dropped = rng.random::<f64>() < cfg.drop_rate;
        let label = ClassId::from_index(rows[d.label.index()].sample(&mut rng)).expect("six columns");
        if dropped {
            continue;
        }
        let mut pixels: Vec<usize> = d.mask().iter().map(|p| p.y as usize * w + p.x as usize).collect();
        match cfg.mask_noise {
            MaskNoise::None => {}
            MaskNoise::Erode(layers) => {
                for _ in 0..layers {
                    let inside: std::collections::HashSet<usize> = pixels.iter().copied().collect();
                    let kept: Vec<usize> = pixels
                        .iter()
                        .copied()
                        .filter(|&i| neighbours(i, w, h).all(|n| n.is_some_and(|n| inside.contains(&n))))
                        .collect();
                    if kept.is_empty() {
                        break;
                    }
                    pixels = kept;
                }
            }
            MaskNoise::Dilate(layers) => {
                let mut frontier = pixels.clone();
                for _ in 0..layers {
                    let mut grown = Vec::new();
                    for &i in &frontier {
                        for n in neighbours(i, w, h).flatten() {
                            if !claimed[n] {
                                claimed[n] = true;
                                grown.push(n);
                            }
                        }
                    }
                    pixels.extend_from_slice(&grown);
                    frontier = grown;
                }
            }
        }
        for i in pixels {
            ids[i] = d.id;
            classes[i] = if label == d.label && original_fg[i] {
                scene.class_map()[i]
            } else {
                label
            };
        }
    }
    LabeledScene::new(scene.width(), scene.height(), ids, classes)
}

/// The two emulated producers for a ground-truth scene: a label-correct,
/// mask-eroded "semantic" output and a label-confused, mask-exact
/// "instance" output.
pub fn constructed_producers(gt: &LabeledScene, seed: u64) -> Result<(LabeledScene, LabeledScene)> {
    let semantic = perturb(gt, &PerturbConfig::label_correct_mask_eroded(seed))?;
    let instance = perturb(gt, &PerturbConfig::label_confused_mask_exact(seed.wrapping_add(1)))?;
    Ok((semantic, instance))
}
