//! Per-channel normalization statistics.
//!
//! Stats are computed on the redundant channel layout over the training split
//! only. Because the simplified representation is a strict prefix of the
//! redundant one, taking the prefix of these stats normalizes simplified
//! tensors identically, so channels shared between the two stages round-trip
//! bit-exactly.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Identity stats (zero mean, unit scale).
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Fit per-channel mean and standard deviation over the frames of every
    /// tensor in `tensors`. Constant channels get a unit scale.
    pub fn fit(tensors: &[Array2<f64>]) -> Result<Self> {
        let channels = tensors
            .first()
            .ok_or_else(|| Error::Config("cannot fit normalization on an empty set".into()))?
            .ncols();
        let mut count = 0usize;
        let mut sum = Array1::<f64>::zeros(channels);
        let mut sum_sq = Array1::<f64>::zeros(channels);
        for t in tensors {
            if t.ncols() != channels {
                return Err(Error::Shape(format!(
                    "normalization input has {} channels, expected {channels}",
                    t.ncols()
                )));
            }
            count += t.nrows();
            sum += &t.sum_axis(Axis(0));
            sum_sq += &t.mapv(|v| v * v).sum_axis(Axis(0));
        }
        if count == 0 {
            return Err(Error::Config("cannot fit normalization on zero frames".into()));
        }
        let n = count as f64;
        let mean = &sum / n;
        let var = &sum_sq / n - mean.mapv(|m| m * m);
        let std = var.mapv(|v| {
            let s = v.max(0.0).sqrt();
            if s < STD_FLOOR {
                1.0
            } else {
                s
            }
        });
        Ok(Self { mean: mean.to_vec(), std: std.to_vec() })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Stats restricted to the first `channels` channels.
    pub fn prefix(&self, channels: usize) -> Result<Self> {
        if channels > self.channels() {
            return Err(Error::Shape(format!(
                "prefix of {channels} channels from {}-channel stats",
                self.channels()
            )));
        }
        Ok(Self {
            mean: self.mean[..channels].to_vec(),
            std: self.std[..channels].to_vec(),
        })
    }

    pub fn normalize(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for c in 0..row.len() {
                row[c] = (row[c] - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(x.ncols())?;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for c in 0..row.len() {
                row[c] = row[c] * self.std[c] + self.mean[c];
            }
        }
        Ok(out)
    }

    /// Scale a gradient taken w.r.t. raw values into the normalized space
    /// (the chain rule through `denormalize`).
    pub fn grad_to_normalized(&self, grad_raw: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(grad_raw.ncols())?;
        let mut out = grad_raw.to_owned();
        for mut row in out.rows_mut() {
            for c in 0..row.len() {
                row[c] *= self.std[c];
            }
        }
        Ok(out)
    }

    fn check(&self, ncols: usize) -> Result<()> {
        if ncols != self.channels() {
            return Err(Error::Shape(format!(
                "tensor has {ncols} channels, stats have {}",
                self.channels()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn fit_matches_hand_computed_stats() {
        let a = array![[1.0, 10.0], [3.0, 10.0]];
        let b = array![[5.0, 10.0], [7.0, 10.0]];
        let n = Normalization::fit(&[a, b]).unwrap();
        assert_abs_diff_eq!(n.mean[0], 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.std[0], 5.0f64.sqrt(), epsilon = 1e-12);
        // Constant channel keeps unit scale.
        assert_abs_diff_eq!(n.mean[1], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(n.std[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_round_trips_bit_exact_through_identity() {
        let x = array![[0.25, -1.5], [3.0, 0.125]];
        let n = Normalization::identity(2);
        let y = n.denormalize(&n.normalize(&x.view()).unwrap().view()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn normalize_then_denormalize_is_close() {
        let x = array![[1.0, 2.0], [3.0, 5.0], [-2.0, 0.5]];
        let n = Normalization::fit(std::slice::from_ref(&x)).unwrap();
        let y = n.denormalize(&n.normalize(&x.view()).unwrap().view()).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let z = n.normalize(&x.view()).unwrap();
        // Normalized stats are zero mean, unit variance per channel.
        for c in 0..2 {
            let col = z.column(c);
            let m = col.mean().unwrap();
            let v = col.mapv(|x| (x - m) * (x - m)).mean().unwrap();
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn prefix_takes_leading_channels() {
        let x = array![[1.0, 2.0, 3.0], [3.0, 4.0, 9.0]];
        let n = Normalization::fit(std::slice::from_ref(&x)).unwrap();
        let p = n.prefix(2).unwrap();
        assert_eq!(p.mean, &n.mean[..2]);
        assert!(n.prefix(4).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let n = Normalization::identity(3);
        let x = array![[1.0, 2.0]];
        assert!(n.normalize(&x.view()).is_err());
    }
}
