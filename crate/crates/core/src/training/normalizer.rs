//! Per-dimension quantile normalization of actions to `[-1, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LOWER_QUANTILE: f64 = 0.01;
pub const UPPER_QUANTILE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Quantile with linear interpolation between order statistics at rank
/// `q · (n − 1)`. `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

impl Normalizer {
    /// Fits bounds over every row of every chunk.
    pub fn fit(chunks: &[Tensor]) -> Result<Self> {
        let width = chunks.first().map_or(0, Tensor::cols);
        let rows: usize = chunks.iter().map(Tensor::rows).sum();
        if width == 0 || rows < 2 {
            return Err(Error::Schema(format!("need at least 2 action samples to fit bounds, got {rows}")));
        }
        if let Some(c) = chunks.iter().find(|c| c.cols() != width) {
            return Err(Error::Schema(format!("action width {} differs from {width}", c.cols())));
        }
        let mut lo = Vec::with_capacity(width);
        let mut hi = Vec::with_capacity(width);
        for d in 0..width {
            let mut col: Vec<f64> = chunks.iter().flat_map(|c| c.data().iter().skip(d).step_by(width).copied()).collect();
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite action in dimension {d}")));
            }
            col.sort_by(f64::total_cmp);
            let (l, h) = (quantile(&col, LOWER_QUANTILE), quantile(&col, UPPER_QUANTILE));
            if l == h {
                log::warn!("action dimension {d} is constant ({l}); it normalizes to 0");
            }
            lo.push(l);
            hi.push(h);
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> usize {
        self.lo.len()
    }

    /// Dimensions whose bounds coincide.
    pub fn degenerate(&self) -> Vec<usize> {
        (0..self.width()).filter(|&d| self.lo[d] == self.hi[d]).collect()
    }

    pub fn normalize_value(&self, d: usize, x: f64) -> f64 {
        let (lo, hi) = (self.lo[d], self.hi[d]);
        if lo == hi {
            return 0.0;
        }
        (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize_value(&self, d: usize, y: f64) -> f64 {
        let (lo, hi) = (self.lo[d], self.hi[d]);
        lo + (y + 1.0) * 0.5 * (hi - lo)
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.cols() != self.width() {
            return Err(Error::Schema(format!("actions of width {} for a {}-wide normalizer", t.cols(), self.width())));
        }
        Ok(())
    }

    pub fn normalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let w = self.width();
        let data = t.data().iter().enumerate().map(|(k, &x)| self.normalize_value(k % w, x)).collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    pub fn denormalize(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let w = self.width();
        let data = t.data().iter().enumerate().map(|(k, &y)| self.denormalize_value(k % w, y)).collect();
        Tensor::new(t.shape().to_vec(), data)
    }
}
