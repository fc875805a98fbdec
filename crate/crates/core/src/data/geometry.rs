use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::PairedSample;
use crate::error::{contract, Error, Result};

/// Planar projective transform acting on pixel coordinates `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 9]", try_from = "[f64; 9]")]
pub struct Homography(Matrix3<f64>);

impl From<Homography> for [f64; 9] {
    fn from(h: Homography) -> Self {
        h.to_row_major()
    }
}

impl TryFrom<[f64; 9]> for Homography {
    type Error = Error;

    fn try_from(v: [f64; 9]) -> Result<Self> {
        Homography::from_row_major(v)
    }
}

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn from_row_major(v: [f64; 9]) -> Result<Self> {
        let h = Homography(Matrix3::from_row_slice(&v));
        if h.determinant().abs() <= 1e-6 || !v.iter().all(|x| x.is_finite()) {
            return Err(contract("homography must be finite and invertible"));
        }
        Ok(h)
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// Exact transform taking four source points onto four destination points.
    pub fn from_correspondences(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let h = a
            .lu()
            .solve(&b)
            .ok_or_else(|| contract("degenerate point configuration"))?;
        Self::from_row_major([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .0
            .try_inverse()
            .ok_or_else(|| contract("homography is singular"))?;
        Ok(Homography(inv / inv[(2, 2)]))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.0 * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }

    pub fn compose(&self, other: &Homography) -> Homography {
        Homography(self.0 * other.0)
    }
}

/// For every student feature cell, the teacher cell containing its warped centre.
///
/// `image_size` and `grid` are `(height, width)`; cells whose warped centre
/// leaves the image are `None`.
pub fn correspondence_oracle(
    warp: &Homography,
    image_size: (usize, usize),
    grid: (usize, usize),
) -> Array2<Option<usize>> {
    let (ih, iw) = image_size;
    let (gh, gw) = grid;
    let cell_h = ih as f64 / gh as f64;
    let cell_w = iw as f64 / gw as f64;
    Array2::from_shape_fn(grid, |(r, c)| {
        let (x, y) = warp.apply((c as f64 + 0.5) * cell_w, (r as f64 + 0.5) * cell_h);
        if !(x >= 0.0 && y >= 0.0 && x < iw as f64 && y < ih as f64) {
            return None;
        }
        let col = ((x / cell_w).floor() as usize).min(gw - 1);
        let row = ((y / cell_h).floor() as usize).min(gh - 1);
        Some(row * gw + col)
    })
}

/// [`correspondence_oracle`] for a sample at a feature grid of `grid` cells.
pub fn sample_correspondence(sample: &PairedSample, grid: (usize, usize)) -> Result<Array2<Option<usize>>> {
    let warp = sample.gt_warp.as_ref().ok_or(Error::MissingWarp)?;
    let (_, h, w) = sample.image_w.dim();
    Ok(correspondence_oracle(warp, (h, w), grid))
}
