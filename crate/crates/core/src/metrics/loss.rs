//! Pixel-wise cross entropy over all pixels and categories.

use crate::error::{Error, Result};

/// Probabilities below this are raised to it before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-6;

/// Per-pixel class probabilities, `pixels x categories`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    categories: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(categories: usize, values: Vec<f64>) -> Result<Self> {
        if categories == 0 || !values.len().is_multiple_of(categories) {
            return Err(Error::Shape(format!(
                "{} probabilities do not split into rows of {categories}",
                values.len()
            )));
        }
        for (m, row) in values.chunks(categories).enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Shape(format!("pixel {m} has a probability outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::Shape(format!("pixel {m} probabilities sum to {sum}")));
            }
        }
        Ok(ProbabilityMap { categories, values })
    }

    /// Every pixel gets `1 / categories` for each category.
    pub fn uniform(pixels: usize, categories: usize) -> Self {
        ProbabilityMap {
            categories,
            values: vec![1.0 / categories as f64; pixels * categories],
        }
    }

    pub fn pixels(&self) -> usize {
        self.values.len() / self.categories
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn get(&self, pixel: usize, category: usize) -> f64 {
        self.values[pixel * self.categories + category]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// One-hot ground truth, stored as the hot category per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotLabelMap {
    categories: usize,
    labels: Vec<usize>,
}

impl OneHotLabelMap {
    pub fn new(categories: usize, labels: Vec<usize>) -> Result<Self> {
        if let Some((m, &k)) = labels.iter().enumerate().find(|(_, &k)| k >= categories) {
            return Err(Error::Shape(format!("pixel {m} has label {k} but only {categories} categories")));
        }
        Ok(OneHotLabelMap { categories, labels })
    }

    /// From a dense `pixels x categories` 0/1 matrix with exactly one 1 per row.
    pub fn from_dense(categories: usize, dense: &[u8]) -> Result<Self> {
        if categories == 0 || !dense.len().is_multiple_of(categories) {
            return Err(Error::Shape(format!("{} entries do not split into rows of {categories}", dense.len())));
        }
        let labels = dense
            .chunks(categories)
            .enumerate()
            .map(|(m, row)| {
                let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1).map(|(k, _)| k).collect();
                match (ones.as_slice(), row.iter().all(|&v| v <= 1)) {
                    ([k], true) => Ok(*k),
                    _ => Err(Error::Shape(format!("pixel {m} is not one-hot"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OneHotLabelMap { categories, labels })
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `y[m][k]`.
    pub fn get(&self, pixel: usize, category: usize) -> u8 {
        (self.labels[pixel] == category) as u8
    }
}

fn check_shapes(y: &OneHotLabelMap, p: &ProbabilityMap) -> Result<()> {
    if y.categories() != p.categories() || y.pixels() != p.pixels() {
        return Err(Error::Shape(format!(
            "labels are {}x{} but probabilities are {}x{}",
            y.pixels(),
            y.categories(),
            p.pixels(),
            p.categories()
        )));
    }
    if y.pixels() == 0 {
        return Err(Error::EmptyInput("cross entropy over zero pixels"));
    }
    Ok(())
}

/// `-(1 / (M K)) * sum_m sum_k y[m][k] * ln p[m][k]`.
///
/// Only the hot category contributes, so the double sum reduces to one
/// term per pixel.
pub fn cross_entropy(y: &OneHotLabelMap, p: &ProbabilityMap) -> Result<f64> {
    check_shapes(y, p)?;
    let total: f64 = y
        .labels()
        .iter()
        .enumerate()
        .map(|(m, &k)| p.get(m, k).max(LOG_FLOOR).ln())
        .sum();
    Ok(-total / (y.pixels() * y.categories()) as f64)
}

/// Partial derivatives of [`cross_entropy`] with respect to every `p[m][k]`,
/// laid out like the probability map. Non-hot entries are zero.
pub fn cross_entropy_gradient(y: &OneHotLabelMap, p: &ProbabilityMap) -> Result<Vec<f64>> {
    check_shapes(y, p)?;
    let scale = (y.pixels() * y.categories()) as f64;
    let mut grad = vec![0.0; p.values().len()];
    for (m, &k) in y.labels().iter().enumerate() {
        let v = p.get(m, k);
        if v > LOG_FLOOR {
            grad[m * p.categories() + k] = -1.0 / (scale * v);
        }
    }
    Ok(grad)
}
