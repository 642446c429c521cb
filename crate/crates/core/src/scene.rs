//! Nucleus taxonomy and the paired instance/class raster that every other
//! module consumes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of foreground nucleus categories.
pub const NUM_CLASSES: usize = 6;

/// A nucleus category. `0` is background, `1..=6` are the six nucleus classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ClassId(u8);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    pub const NEUTROPHIL: ClassId = ClassId(1);
    pub const EPITHELIAL: ClassId = ClassId(2);
    pub const LYMPHOCYTE: ClassId = ClassId(3);
    pub const PLASMA: ClassId = ClassId(4);
    pub const EOSINOPHIL: ClassId = ClassId(5);
    pub const CONNECTIVE: ClassId = ClassId(6);

    pub fn new(value: u8) -> Result<Self> {
        if value as usize <= NUM_CLASSES {
            Ok(ClassId(value))
        } else {
            Err(Error::InvalidClass(value as u32))
        }
    }

    /// Foreground class from a zero-based index in `0..6`.
    pub fn from_index(index: usize) -> Option<Self> {
        (index < NUM_CLASSES).then(|| ClassId(index as u8 + 1))
    }

    /// All foreground classes in ascending order.
    pub fn foreground() -> impl Iterator<Item = ClassId> {
        (1..=NUM_CLASSES as u8).map(ClassId)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_background(self) -> bool {
        self.0 == 0
    }

    /// Zero-based index into per-class vectors. Panics on background.
    pub fn index(self) -> usize {
        assert!(!self.is_background(), "background has no class index");
        self.0 as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "background",
            1 => "neutrophil",
            2 => "epithelial",
            3 => "lymphocyte",
            4 => "plasma",
            5 => "eosinophil",
            _ => "connective",
        }
    }
}

impl TryFrom<u8> for ClassId {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        ClassId::new(value)
    }
}

impl From<ClassId> for u8 {
    fn from(c: ClassId) -> u8 {
        c.0
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.0, self.name())
    }
}

/// Which producer a detection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Semantic,
    Instance,
    Fused,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Semantic => "semantic",
            Source::Instance => "instance",
            Source::Fused => "fused",
        })
    }
}

/// Instance-id raster plus class raster for one image, both row-major.
///
/// A pixel has instance id 0 exactly when its class is background. The
/// fields are private so that every value in circulation satisfies this.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledScene {
    width: u32,
    height: u32,
    instance_map: Vec<u32>,
    class_map: Vec<ClassId>,
}

impl LabeledScene {
    pub fn new(
        width: u32,
        height: u32,
        instance_map: Vec<u32>,
        class_map: Vec<ClassId>,
    ) -> Result<Self> {
        let expected = width as usize * height as usize;
        if instance_map.len() != expected {
            return Err(Error::RasterLength {
                len: instance_map.len(),
                width,
                height,
            });
        }
        if class_map.len() != expected {
            return Err(Error::RasterLength {
                len: class_map.len(),
                width,
                height,
            });
        }
        for (i, (&id, &class)) in instance_map.iter().zip(&class_map).enumerate() {
            if (id == 0) != class.is_background() {
                return Err(Error::InvariantViolation {
                    x: (i % width as usize) as u32,
                    y: (i / width as usize) as u32,
                    instance: id,
                    class: class.value(),
                });
            }
        }
        Ok(LabeledScene {
            width,
            height,
            instance_map,
            class_map,
        })
    }

    /// Like [`LabeledScene::new`] but takes raw class bytes.
    pub fn from_raw(width: u32, height: u32, instance_map: Vec<u32>, class_map: &[u8]) -> Result<Self> {
        let classes = class_map
            .iter()
            .map(|&c| ClassId::new(c))
            .collect::<Result<Vec<_>>>()?;
        LabeledScene::new(width, height, instance_map, classes)
    }

    /// An all-background scene.
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        LabeledScene {
            width,
            height,
            instance_map: vec![0; n],
            class_map: vec![ClassId::BACKGROUND; n],
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

    pub fn instance_map(&self) -> &[u32] {
        &self.instance_map
    }

    pub fn class_map(&self) -> &[ClassId] {
        &self.class_map
    }

    pub fn instance_at(&self, x: u32, y: u32) -> u32 {
        self.instance_map[self.offset(x, y)]
    }

    pub fn class_at(&self, x: u32, y: u32) -> ClassId {
        self.class_map[self.offset(x, y)]
    }

    pub fn into_parts(self) -> (u32, u32, Vec<u32>, Vec<ClassId>) {
        (self.width, self.height, self.instance_map, self.class_map)
    }

    /// Largest instance id present, 0 for an empty scene.
    pub fn max_instance_id(&self) -> u32 {
        self.instance_map.iter().copied().max().unwrap_or(0)
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }
}

pub(crate) fn check_dims(
    left: &str,
    left_dims: (u32, u32),
    right: &str,
    right_dims: (u32, u32),
) -> Result<()> {
    if left_dims == right_dims {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            left: left.to_owned(),
            left_dims,
            right: right.to_owned(),
            right_dims,
        })
    }
}
