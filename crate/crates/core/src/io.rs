//! On-disk scene packages, JSON/CSV outputs and overlay rendering.
//!
//! A scene package is a directory:
//!
//! | file           | content                                          |
//! |----------------|--------------------------------------------------|
//! | `image.png`    | 8-bit RGB image (optional)                       |
//! | `instance.png` | 16-bit grayscale, pixel value = instance id      |
//! | `class.png`    | 8-bit grayscale, pixel value = class id (0..=6)  |
//! | `meta.json`    | `{format_version, width, height, source}`        |
//!
//! PNGs are written with fixed compression and filter settings, so the
//! same scene always produces the same bytes.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{DynamicImage, GrayImage, ImageBuffer, ImageReader, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::detection::DetectionSet;
use crate::error::{Error, Result};
use crate::metrics::ClassCounts;
use crate::scene::{check_dims, ClassId, LabeledScene, Source, NUM_CLASSES};

pub const FORMAT_VERSION: u32 = 1;
pub const IMAGE_FILE: &str = "image.png";
pub const INSTANCE_FILE: &str = "instance.png";
pub const CLASS_FILE: &str = "class.png";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneMeta {
    pub format_version: u32,
    pub width: u32,
    pub height: u32,
    /// Producer tag; `null` for ground truth.
    pub source: Option<Source>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePackage {
    pub image: Option<RgbImage>,
    pub scene: LabeledScene,
    pub source: Option<Source>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_owned(),
        source,
    }
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_owned(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        path: path.to_owned(),
        source,
    }
}

fn encoder<W: Write>(w: W) -> PngEncoder<W> {
    PngEncoder::new_with_quality(w, CompressionType::Default, FilterType::Adaptive)
}

fn write_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    img.write_with_encoder(encoder(&mut out)).map_err(image_err(path))?;
    out.flush().map_err(io_err(path))
}

fn decode(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(image_err(path))
}

/// Serialises `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

/// Writes a scene package into `dir`, creating it if needed. A stale
/// `image.png` is removed when no image is given.
pub fn write_scene(dir: &Path, scene: &LabeledScene, image: Option<&RgbImage>, source: Option<Source>) -> Result<()> {
    if let Some(img) = image {
        check_dims(IMAGE_FILE, img.dimensions(), INSTANCE_FILE, scene.dims())?;
    }
    if let Some(&id) = scene.instance_map().iter().find(|&&id| id > u16::MAX as u32) {
        return Err(Error::InstanceIdOverflow(id));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (w, h) = scene.dims();

    let ids: Vec<u16> = scene.instance_map().iter().map(|&id| id as u16).collect();
    let instance: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w, h, ids).expect("raster length");
    write_png(&dir.join(INSTANCE_FILE), &instance)?;

    let classes: Vec<u8> = scene.class_map().iter().map(|c| c.value()).collect();
    let class: GrayImage = ImageBuffer::from_raw(w, h, classes).expect("raster length");
    write_png(&dir.join(CLASS_FILE), &class)?;

    let image_path = dir.join(IMAGE_FILE);
    match image {
        Some(img) => write_png(&image_path, img)?,
        None if image_path.exists() => fs::remove_file(&image_path).map_err(io_err(&image_path))?,
        None => {}
    }

    write_json(
        &dir.join(META_FILE),
        &SceneMeta {
            format_version: FORMAT_VERSION,
            width: w,
            height: h,
            source,
        },
    )
}

/// Loads and validates a scene package.
pub fn read_scene(dir: &Path) -> Result<ScenePackage> {
    let meta_path = dir.join(META_FILE);
    let meta: SceneMeta = read_json(&meta_path)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(meta.format_version));
    }
    let dims = (meta.width, meta.height);

    let instance_path = dir.join(INSTANCE_FILE);
    let ids: Vec<u32> = match decode(&instance_path)? {
        DynamicImage::ImageLuma16(img) => {
            check_dims(META_FILE, dims, INSTANCE_FILE, img.dimensions())?;
            img.into_raw().into_iter().map(u32::from).collect()
        }
        DynamicImage::ImageLuma8(img) => {
            check_dims(META_FILE, dims, INSTANCE_FILE, img.dimensions())?;
            img.into_raw().into_iter().map(u32::from).collect()
        }
        other => {
            return Err(Error::Format {
                path: instance_path,
                message: format!("expected grayscale, found {:?}", other.color()),
            })
        }
    };

    let class_path = dir.join(CLASS_FILE);
    let classes = match decode(&class_path)? {
        DynamicImage::ImageLuma8(img) => {
            check_dims(INSTANCE_FILE, dims, CLASS_FILE, img.dimensions())?;
            img.into_raw()
        }
        other => {
            return Err(Error::Format {
                path: class_path,
                message: format!("expected 8-bit grayscale, found {:?}", other.color()),
            })
        }
    };
    let scene = LabeledScene::from_raw(meta.width, meta.height, ids, &classes)?;

    let image_path = dir.join(IMAGE_FILE);
    let image = if image_path.is_file() {
        let img = decode(&image_path)?.into_rgb8();
        check_dims(INSTANCE_FILE, dims, IMAGE_FILE, img.dimensions())?;
        Some(img)
    } else {
        None
    };

    Ok(ScenePackage {
        image,
        scene,
        source: meta.source,
    })
}

/// Scene packages under `dir`, sorted by name. `dir` itself counts as the
/// only package when it holds a `meta.json`.
pub fn list_packages(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_owned()));
    }
    if dir.join(META_FILE).is_file() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| ".".into());
        return Ok(vec![(name, dir.to_owned())]);
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.join(META_FILE).is_file() {
            let name = path.file_name().expect("entry has a name").to_string_lossy().into_owned();
            out.push((name, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Whether `dir` is a single package rather than a collection.
pub fn is_package(dir: &Path) -> bool {
    dir.join(META_FILE).is_file()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub id: u32,
    pub label: ClassId,
    /// `[x0, y0, x1, y1]`, half-open.
    pub bbox: [u32; 4],
    pub area: usize,
    /// Horizontal runs `[y, x_start, x_end)` in row-major order.
    pub runs: Vec<[u32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsFile {
    pub width: u32,
    pub height: u32,
    pub source: Source,
    pub detections: Vec<DetectionRecord>,
}

impl DetectionsFile {
    pub fn from_set(set: &DetectionSet, source: Source) -> Self {
        let detections = set
            .detections()
            .iter()
            .map(|d| {
                let mut runs: Vec<[u32; 3]> = Vec::new();
                for p in d.mask().iter() {
                    match runs.last_mut() {
                        Some(run) if run[0] == p.y && run[2] == p.x => run[2] += 1,
                        _ => runs.push([p.y, p.x, p.x + 1]),
                    }
                }
                let b = d.bbox();
                DetectionRecord {
                    id: d.id,
                    label: d.label,
                    bbox: [b.x0, b.y0, b.x1, b.y1],
                    area: d.area(),
                    runs,
                }
            })
            .collect();
        DetectionsFile {
            width: set.width(),
            height: set.height(),
            source,
            detections,
        }
    }
}

/// Writes `scene_id,c1,...,c6` rows.
pub fn write_counts_csv(path: &Path, rows: &[(String, ClassCounts)]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io {
        path: path.to_owned(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["scene_id", "c1", "c2", "c3", "c4", "c5", "c6"]).map_err(csv_err)?;
    for (name, counts) in rows {
        let mut record = vec![name.clone()];
        record.extend(counts.iter().map(u64::to_string));
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Overlay colours for classes 1..=6: neutrophil red, epithelial green,
/// lymphocyte blue, plasma orange, eosinophil magenta, connective cyan.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0xFF, 0x00, 0x00],
    [0x00, 0xC8, 0x00],
    [0x00, 0x00, 0xFF],
    [0xFF, 0xA5, 0x00],
    [0xFF, 0x00, 0xFF],
    [0x00, 0xFF, 0xFF],
];

/// Opacity of the class tint over instance interiors.
pub const OVERLAY_ALPHA: f64 = 0.4;

pub fn palette_colour(class: ClassId) -> Rgb<u8> {
    Rgb(PALETTE[class.index()])
}

/// Tints every instance with its class colour and draws its boundary in
/// the solid colour. A boundary pixel is an instance pixel with a
/// 4-neighbour that belongs to a different instance, to background, or
/// lies outside the image.
pub fn render_overlay(image: &RgbImage, scene: &LabeledScene) -> Result<RgbImage> {
    check_dims("image", image.dimensions(), "labels", scene.dims())?;
    let (w, h) = scene.dims();
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let id = scene.instance_at(x, y);
            if id == 0 {
                continue;
            }
            let colour = palette_colour(scene.class_at(x, y));
            let differs = |nx: Option<u32>, ny: Option<u32>| match (nx, ny) {
                (Some(nx), Some(ny)) if nx < w && ny < h => scene.instance_at(nx, ny) != id,
                _ => true,
            };
            let boundary = differs(x.checked_sub(1), Some(y))
                || differs(Some(x + 1), Some(y))
                || differs(Some(x), y.checked_sub(1))
                || differs(Some(x), Some(y + 1));
            let px = out.get_pixel_mut(x, y);
            if boundary {
                *px = colour;
            } else {
                for ch in 0..3 {
                    px[ch] = ((1.0 - OVERLAY_ALPHA) * px[ch] as f64 + OVERLAY_ALPHA * colour[ch] as f64).round() as u8;
                }
            }
        }
    }
    Ok(out)
}
