use nalgebra::DMatrix;

use crate::geometry::{Mat3, Vec3};

/// Vector-channeled feature: `C` channels of 3-vectors for each of `n` points,
/// laid out as a `C × 3n` matrix (point `p` owns columns `3p..3p+3`).
#[derive(Debug, Clone, PartialEq)]
pub struct VecFeature(pub DMatrix<f64>);

impl VecFeature {
    pub fn zeros(channels: usize, points: usize) -> Self {
        Self(DMatrix::zeros(channels, 3 * points))
    }

    /// Single-point feature from its channel vectors.
    pub fn from_channels(channels: &[Vec3]) -> Self {
        let mut m = DMatrix::zeros(channels.len(), 3);
        for (c, v) in channels.iter().enumerate() {
            for k in 0..3 {
                m[(c, k)] = v[k];
            }
        }
        Self(m)
    }

    pub fn channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn points(&self) -> usize {
        self.0.ncols() / 3
    }

    /// Channel `c` of point `p`.
    #[inline]
    pub fn get(&self, c: usize, p: usize) -> Vec3 {
        let m = &self.0;
        Vec3::new(m[(c, 3 * p)], m[(c, 3 * p + 1)], m[(c, 3 * p + 2)])
    }

    #[inline]
    pub fn set(&mut self, c: usize, p: usize, v: &Vec3) {
        for k in 0..3 {
            self.0[(c, 3 * p + k)] = v[k];
        }
    }

    /// `F·R` applied to every point block.
    pub fn rotate(&self, r: &Mat3) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels() {
            for p in 0..self.points() {
                out.set(c, p, &r.tr_mul(&self.get(c, p)));
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(&self.0 * s)
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}
