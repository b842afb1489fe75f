//! Input and output scaling fitted on training data only.

use serde::{Deserialize, Serialize};

/// Per-dimension min/max map of the heat exchanges into [0, 1], with a 1%
/// margin on each side so prior tail samples do not clip.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InputScaler {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputScaler {
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = rows.len() / dim;
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for r in 0..n {
            for c in 0..dim {
                let v = rows[r * dim + c];
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        for c in 0..dim {
            let range = (hi[c] - lo[c]).max(1e-12);
            lo[c] -= 0.01 * range;
            hi[c] += 0.01 * range;
        }
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    #[inline]
    pub fn scale(&self, c: usize, v: f64) -> f64 {
        (v - self.lo[c]) / (self.hi[c] - self.lo[c])
    }

    #[inline]
    pub fn slope(&self, c: usize) -> f64 {
        1.0 / (self.hi[c] - self.lo[c])
    }
}

/// Per-dimension standardisation of the predicted (free) state entries.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OutputScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl OutputScaler {
    pub fn fit(rows: &[f64], dim: usize) -> Self {
        let n = (rows.len() / dim).max(1);
        let mut mean = vec![0.0; dim];
        for r in 0..n {
            for c in 0..dim {
                mean[c] += rows[r * dim + c];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for r in 0..n {
            for c in 0..dim {
                let d = rows[r * dim + c] - mean[c];
                var[c] += d * d;
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(1e-12)).collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn standardise(&self, c: usize, v: f64) -> f64 {
        (v - self.mean[c]) / self.std[c]
    }

    #[inline]
    pub fn unscale(&self, c: usize, y: f64) -> f64 {
        self.mean[c] + self.std[c] * y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_scaler_covers_data_with_margin() {
        let rows = vec![0.0, 10.0, 100.0, 20.0, 50.0, 15.0];
        let s = InputScaler::fit(&rows, 2);
        // data extremes are strictly inside (0, 1)
        assert!(s.scale(0, 0.0) > 0.0 && s.scale(0, 0.0) < 0.02);
        assert!(s.scale(0, 100.0) < 1.0);
        assert!(s.scale(1, 10.0) > 0.0 && s.scale(1, 20.0) < 1.0);
    }

    #[test]
    fn output_scaler_standardises() {
        let rows = vec![1.0, 3.0, 5.0, 3.0, 9.0, 3.0];
        let s = OutputScaler::fit(&rows, 2);
        approx::assert_relative_eq!(s.mean[0], 5.0);
        // constant column gets a floor, not a zero divide
        assert!(s.std[1] >= 1e-12);
        approx::assert_relative_eq!(s.unscale(0, s.standardise(0, 1.0)), 1.0, epsilon = 1e-12);
    }
}
