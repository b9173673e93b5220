use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DepthMap, SparseDepthTarget};

/// Scanline pattern of the simulated LiDAR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarParams {
    pub scanlines: usize,
    /// Probability that an individual return is dropped.
    pub dropout: f64,
    /// Scanlines are spread over rows at or below `horizon * H`.
    pub horizon: f64,
    /// Returns farther than this are discarded.
    pub max_range: Option<f64>,
}

impl Default for LidarParams {
    /// About 3% density on a 192 x 640 image.
    fn default() -> Self {
        Self {
            scanlines: 16,
            dropout: 0.64,
            horizon: 0.35,
            max_range: None,
        }
    }
}

impl LidarParams {
    pub fn validate(&self) -> Result<()> {
        if self.scanlines == 0 {
            return Err(Error::Validation("lidar needs at least one scanline".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.horizon) {
            return Err(Error::Validation(format!(
                "lidar dropout must be in [0, 1] and horizon in [0, 1), got {} and {}",
                self.dropout, self.horizon
            )));
        }
        Ok(())
    }

    /// Image rows hit by the scanlines, evenly spaced below the horizon.
    pub fn rows(&self, height: usize) -> Vec<usize> {
        let start = ((self.horizon * height as f64).ceil() as usize).min(height - 1);
        let span = (height - start) as f64;
        let n = self.scanlines.min(height - start);
        let mut rows: Vec<usize> = (0..n)
            .map(|i| start + (((i as f64 + 0.5) * span / n as f64) as usize).min(height - start - 1))
            .collect();
        rows.dedup();
        rows
    }
}

/// Keeps dense depth only on the scanline rows, dropping each return with
/// probability `dropout`.
pub fn sparse_lidar_sample(dense: &DepthMap, params: &LidarParams, seed: u64) -> Result<SparseDepthTarget> {
    params.validate()?;
    let (h, w) = dense.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for row in params.rows(h) {
        for u in 0..w {
            let keep = params.dropout <= 0.0 || !rng.random_bool(params.dropout.min(1.0));
            let d = dense.data()[[row, u]];
            if keep && params.max_range.is_none_or(|r| d <= r) {
                values[[row, u]] = d;
                valid[[row, u]] = true;
            }
        }
    }
    SparseDepthTarget::new(values, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_dropout_leaves_nothing() {
        let d = DepthMap::constant(20, 30, 5.0).unwrap();
        let p = LidarParams { dropout: 1.0, ..Default::default() };
        assert_eq!(sparse_lidar_sample(&d, &p, 0).unwrap().num_valid(), 0);
    }

    #[test]
    fn single_scanline_density() {
        let d = DepthMap::constant(24, 40, 5.0).unwrap();
        let p = LidarParams { scanlines: 1, dropout: 0.0, ..Default::default() };
        let s = sparse_lidar_sample(&d, &p, 3).unwrap();
        assert_eq!(s.density(), 1.0 / 24.0);
    }

    #[test]
    fn upper_region_is_empty() {
        let d = DepthMap::constant(40, 40, 5.0).unwrap();
        let p = LidarParams { dropout: 0.0, ..Default::default() };
        let s = sparse_lidar_sample(&d, &p, 0).unwrap();
        assert!(s.valid().rows().into_iter().take(14).all(|r| r.iter().all(|v| !v)));
        assert!(s.num_valid() > 0);
    }
}
