//! Overlapping patch extraction and the matching adjoint (fold) operation.
//!
//! Only fully-contained `d x d` windows are used. Anchors are enumerated in
//! row-major order and each patch is flattened row-major into a column of an
//! `d² x P` matrix. Pixels near the border are covered by fewer than `d²`
//! windows; [`PatchGeometry::counts`] reports the per-pixel coverage.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;

/// Shape information shared by every patch set drawn from one image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub height: usize,
    pub width: usize,
    pub d: usize,
}

impl PatchGeometry {
    pub fn new(height: usize, width: usize, d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::Param(format!("patch side must be at least 2, got {d}")));
        }
        if d > height || d > width {
            return Err(Error::Param(format!(
                "patch side {d} exceeds image dimension {height}x{width}"
            )));
        }
        Ok(PatchGeometry { height, width, d })
    }

    pub fn for_image(img: &Image, d: usize) -> Result<Self> {
        Self::new(img.height(), img.width(), d)
    }

    /// Patch dimension `d²`.
    pub fn dim(&self) -> usize {
        self.d * self.d
    }

    pub fn rows(&self) -> usize {
        self.height - self.d + 1
    }

    pub fn cols(&self) -> usize {
        self.width - self.d + 1
    }

    pub fn num_patches(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Top-left anchor of patch `p`.
    pub fn position(&self, p: usize) -> (usize, usize) {
        (p / self.cols(), p % self.cols())
    }

    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_patches()).map(|p| self.position(p))
    }

    /// Number of windows covering each pixel, row-major.
    pub fn counts(&self) -> Vec<u32> {
        let (rows, cols) = (self.rows(), self.cols());
        let span = |i: usize, n: usize| {
            let lo = i.saturating_sub(self.d - 1);
            let hi = i.min(n - 1);
            (hi + 1 - lo) as u32
        };
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            let nr = span(r, rows);
            for c in 0..self.width {
                out.push(nr * span(c, cols));
            }
        }
        out
    }

    /// Gathers every window of a row-major buffer into a `d² x P` matrix.
    pub fn extract(&self, pixels: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(pixels.len(), self.height * self.width);
        let n = self.dim();
        let mut out = DMatrix::zeros(n, self.num_patches());
        for (p, mut col) in out.column_iter_mut().enumerate() {
            let (r0, c0) = self.position(p);
            for a in 0..self.d {
                let row = &pixels[(r0 + a) * self.width + c0..(r0 + a) * self.width + c0 + self.d];
                for (b, v) in row.iter().enumerate() {
                    col[a * self.d + b] = *v;
                }
            }
        }
        out
    }

    /// Adjoint of [`extract`](Self::extract): sums each patch value back onto
    /// its pixel. Every pixel gathers its covering entries in a fixed order
    /// (patch row offset, then column offset), so the result does not depend
    /// on how the rows are scheduled.
    pub fn fold(&self, patches: &DMatrix<f64>) -> Vec<f64> {
        debug_assert_eq!(patches.nrows(), self.dim());
        debug_assert_eq!(patches.ncols(), self.num_patches());
        let (rows, cols, d) = (self.rows(), self.cols(), self.d);
        let mut out = vec![0.0; self.height * self.width];
        par::for_each_row(&mut out, self.width, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for a in 0..d {
                    if a > i || i - a >= rows {
                        continue;
                    }
                    for b in 0..d {
                        if b > j || j - b >= cols {
                            continue;
                        }
                        let p = (i - a) * cols + (j - b);
                        acc += patches[(a * d + b, p)];
                    }
                }
                *v = acc;
            }
        });
        out
    }
}

/// All fully-contained windows of an image together with their geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub geometry: PatchGeometry,
    /// One flattened patch per column.
    pub patches: DMatrix<f64>,
    pub counts: Vec<u32>,
}

impl PatchSet {
    pub fn d(&self) -> usize {
        self.geometry.d
    }

    pub fn len(&self) -> usize {
        self.patches.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.ncols() == 0
    }

    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.geometry.positions().collect()
    }

    pub fn patch(&self, p: usize) -> DVector<f64> {
        self.patches.column(p).into_owned()
    }

    /// Per-pixel sum of the patch values covering that pixel.
    pub fn accumulate(&self) -> Vec<f64> {
        self.geometry.fold(&self.patches)
    }
}

pub fn extract_patches(img: &Image, d: usize) -> Result<PatchSet> {
    let geometry = PatchGeometry::for_image(img, d)?;
    Ok(PatchSet {
        patches: geometry.extract(img.pixels()),
        counts: geometry.counts(),
        geometry,
    })
}

/// Removes the mean of a patch vector. Returns the centered vector and the mean.
pub fn mean_subtract(p: &DVector<f64>) -> (DVector<f64>, f64) {
    let mean = p.mean();
    (p.map(|v| v - mean), mean)
}

/// The mean-subtraction projection `G = I - (1/n) 1 1ᵀ` on `n = d²` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeanProjection {
    pub d: usize,
}

impl MeanProjection {
    pub fn new(d: usize) -> Self {
        MeanProjection { d }
    }

    pub fn dim(&self) -> usize {
        self.d * self.d
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        mean_subtract(v).0
    }

    /// Centers every column in place.
    pub fn apply_columns(&self, m: &mut DMatrix<f64>) {
        for mut col in m.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let off = 1.0 / n as f64;
        DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 - off } else { -off })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_by_three_with_d2() {
        let img = Image::from_fn(3, 3, |r, c| (r * 3 + c) as f64).unwrap();
        let ps = extract_patches(&img, 2).unwrap();
        assert_eq!(ps.len(), 4);
        assert_eq!(ps.positions(), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(ps.counts, vec![1, 2, 1, 2, 4, 2, 1, 2, 1]);
        assert_eq!(ps.patch(3).as_slice(), &[4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn single_patch_is_flattening() {
        let img = Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let ps = extract_patches(&img, 2).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.patch(0).as_slice(), img.pixels());
    }

    #[test]
    fn oversized_patch_rejected() {
        let img = Image::filled(4, 4, 0.0).unwrap();
        assert!(matches!(extract_patches(&img, 5), Err(Error::Param(_))));
        assert!(matches!(extract_patches(&img, 1), Err(Error::Param(_))));
    }

    #[test]
    fn interior_counts_and_total() {
        let g = PatchGeometry::new(9, 11, 3).unwrap();
        let counts = g.counts();
        for r in 2..7 {
            for c in 2..9 {
                assert_eq!(counts[r * 11 + c], 9);
            }
        }
        let total: u32 = counts.iter().sum();
        assert_eq!(total as usize, 9 * g.num_patches());
    }

    #[test]
    fn mean_subtract_examples() {
        let (c, m) = mean_subtract(&DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0]));
        assert_eq!(m, 1.0);
        assert!(c.iter().all(|v| *v == 0.0));
        let (c, m) = mean_subtract(&DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]));
        assert_eq!(m, 0.25);
        assert_eq!(c.as_slice(), &[0.75, -0.25, -0.25, -0.25]);
        let (cc, _) = mean_subtract(&c);
        assert_eq!(cc, c);
    }

    #[test]
    fn projection_dense_laws() {
        let g = MeanProjection::new(3).dense();
        assert!((&g - g.transpose()).amax() == 0.0);
        assert!((&g * &g - &g).amax() < 1e-15);
        assert!((&g * DVector::from_element(9, 1.0)).amax() < 1e-15);
    }

    #[test]
    fn fold_reproduces_count_weighting() {
        // dyadic pixel values keep repeated addition exact
        let img = Image::from_fn(7, 9, |r, c| ((r * 31 + c * 17) % 256) as f64 / 256.0).unwrap();
        for d in 2..=4 {
            let ps = extract_patches(&img, d).unwrap();
            let s = ps.accumulate();
            for (i, (&sv, &n)) in s.iter().zip(&ps.counts).enumerate() {
                assert_eq!(sv, img.pixels()[i] * n as f64);
            }
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_centered(v in prop::collection::vec(-10.0f64..10.0, 9)) {
            let g = MeanProjection::new(3);
            let p = DVector::from_vec(v);
            let gp = g.apply(&p);
            let ggp = g.apply(&gp);
            prop_assert!((&ggp - &gp).amax() < 1e-12);
            prop_assert!(gp.sum().abs() < 1e-10);
        }

        #[test]
        fn fold_is_adjoint_of_extract(
            h in 3usize..8, w in 3usize..8, seed in 0u64..1000
        ) {
            let g = PatchGeometry::new(h, w, 3).unwrap();
            let x: Vec<f64> = (0..h * w).map(|i| ((i as u64 * 7919 + seed) % 97) as f64 / 97.0).collect();
            let m = DMatrix::from_fn(9, g.num_patches(), |i, j| (((i * 13 + j * 5) as u64 + seed) % 11) as f64 - 5.0);
            let lhs: f64 = g.extract(&x).iter().zip(m.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = g.fold(&m).iter().zip(&x).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
