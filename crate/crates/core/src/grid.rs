//! Periodic-in-x1/x2, bounded-in-x3 strip discretisation.
//!
//! Horizontal directions are Fourier with `n1 x n2` collocation points on
//! `[0, 2pi)^2`; the vertical direction is a uniform grid `x3_j = j / n3`,
//! `j = 0..=n3`. Spectral data is stored as a half spectrum in `x1`
//! (`n1 / 2 + 1` columns) with layout `[plane][k1][k2]`, `k2` fastest.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Fraction of each horizontal wavenumber range kept by the dealiasing mask.
pub const DEALIAS_FRACTION: f64 = 2.0 / 3.0;

pub struct Grid {
    n1: usize,
    n2: usize,
    n3: usize,
    layer_height: f64,
    layer_top: usize,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("n1", &self.n1)
            .field("n2", &self.n2)
            .field("n3", &self.n3)
            .field("c", &self.layer_height)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.n1 == other.n1
            && self.n2 == other.n2
            && self.n3 == other.n3
            && self.layer_height.to_bits() == other.layer_height.to_bits()
    }
}

impl Grid {
    /// Builds a grid. `n1`, `n2` must be even and at least 8, `n3` at least 4,
    /// and the layer height `c` must put the layer boundary on a grid plane.
    pub fn new(n1: usize, n2: usize, n3: usize, c: f64) -> Result<Arc<Self>> {
        if n1 < 8 || !n1.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!("n1 = {n1} must be even and >= 8")));
        }
        if n2 < 8 || !n2.is_multiple_of(2) {
            return Err(Error::InvalidGrid(format!("n2 = {n2} must be even and >= 8")));
        }
        if n3 < 4 {
            return Err(Error::InvalidGrid(format!("n3 = {n3} must be >= 4")));
        }
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::InvalidGrid(format!("layer height c = {c} not in (0, 1)")));
        }
        let layer_top = layer_index(c, n3)
            .ok_or_else(|| Error::InvalidGrid(format!("c * n3 = {} is not an integer", c * n3 as f64)))?;
        if layer_top < 2 {
            return Err(Error::InvalidGrid(format!("layer spans {layer_top} intervals; need >= 2")));
        }
        let mut real_planner = RealFftPlanner::<f64>::new();
        let mut planner = FftPlanner::<f64>::new();
        Ok(Arc::new(Grid {
            n1,
            n2,
            n3,
            layer_height: c,
            layer_top,
            r2c: real_planner.plan_fft_forward(n1),
            c2r: real_planner.plan_fft_inverse(n1),
            col_fwd: planner.plan_fft_forward(n2),
            col_inv: planner.plan_fft_inverse(n2),
        }))
    }

    pub fn n1(&self) -> usize {
        self.n1
    }
    pub fn n2(&self) -> usize {
        self.n2
    }
    pub fn n3(&self) -> usize {
        self.n3
    }
    /// Height `c` of the forced boundary layer.
    pub fn layer_height(&self) -> f64 {
        self.layer_height
    }
    /// Index of the plane `x3 = c`.
    pub fn layer_top(&self) -> usize {
        self.layer_top
    }
    pub fn planes(&self) -> usize {
        self.n3 + 1
    }
    /// Number of stored `k1` columns (half spectrum).
    pub fn nh(&self) -> usize {
        self.n1 / 2 + 1
    }
    pub fn plane_len(&self) -> usize {
        self.n1 * self.n2
    }
    pub fn spec_plane_len(&self) -> usize {
        self.nh() * self.n2
    }
    pub fn phys_len(&self) -> usize {
        self.plane_len() * self.planes()
    }
    pub fn spec_len(&self) -> usize {
        self.spec_plane_len() * self.planes()
    }
    pub fn h(&self) -> f64 {
        1.0 / self.n3 as f64
    }
    pub fn dx1(&self) -> f64 {
        2.0 * PI / self.n1 as f64
    }
    pub fn dx2(&self) -> f64 {
        2.0 * PI / self.n2 as f64
    }
    pub fn x1(&self, i: usize) -> f64 {
        i as f64 * self.dx1()
    }
    pub fn x2(&self, i: usize) -> f64 {
        i as f64 * self.dx2()
    }
    pub fn x3(&self, j: usize) -> f64 {
        j as f64 / self.n3 as f64
    }

    /// Trapezoidal weight of plane `j`.
    pub fn weight(&self, j: usize) -> f64 {
        if j == 0 || j == self.n3 {
            0.5 * self.h()
        } else {
            self.h()
        }
    }

    /// Signed wavenumbers of spectral slot `(i1, i2)`.
    #[inline]
    pub fn wavenumber(&self, i1: usize, i2: usize) -> (f64, f64) {
        let k2 = if i2 <= self.n2 / 2 { i2 as i64 } else { i2 as i64 - self.n2 as i64 };
        (i1 as f64, k2 as f64)
    }

    /// True when the slot carries a Nyquist wavenumber in either direction.
    #[inline]
    pub fn is_nyquist(&self, i1: usize, i2: usize) -> bool {
        i1 == self.n1 / 2 || i2 == self.n2 / 2
    }

    /// True when the slot survives the 2/3 truncation.
    #[inline]
    pub fn is_resolved(&self, i1: usize, i2: usize) -> bool {
        let (k1, k2) = self.wavenumber(i1, i2);
        let c1 = (self.n1 as f64 * DEALIAS_FRACTION / 2.0).floor();
        let c2 = (self.n2 as f64 * DEALIAS_FRACTION / 2.0).floor();
        k1.abs() <= c1 && k2.abs() <= c2 && !self.is_nyquist(i1, i2)
    }

    /// Multiplicity of a half-spectrum slot in Parseval sums.
    #[inline]
    pub fn multiplicity(&self, i1: usize) -> f64 {
        if i1 == 0 || i1 == self.n1 / 2 {
            1.0
        } else {
            2.0
        }
    }

    /// Spectral slot for a signed wavevector, together with a flag telling
    /// whether the stored coefficient is the conjugate of the requested one.
    pub fn slot(&self, k1: i64, k2: i64) -> Option<(usize, usize, bool)> {
        let (k1, k2, conj) = if k1 < 0 || (k1 == 0 && k2 < 0) { (-k1, -k2, true) } else { (k1, k2, false) };
        if k1 as usize >= self.nh() || k2.unsigned_abs() as usize > self.n2 / 2 {
            return None;
        }
        let i2 = if k2 >= 0 { k2 as usize } else { (self.n2 as i64 + k2) as usize };
        Some((k1 as usize, i2, conj))
    }

    /// Forward transform of one physical plane (`n2` rows of `n1`) into the
    /// half spectrum, normalised so that a constant maps to itself. Only the
    /// first `cols` `k1` columns are computed; the rest are set to zero.
    pub(crate) fn forward_plane(&self, phys: &[f64], spec: &mut [Complex64], scratch: &mut PlaneScratch, cols: usize) {
        let (n1, n2) = (self.n1, self.n2);
        let norm = 1.0 / (n1 * n2) as f64;
        for i2 in 0..n2 {
            scratch.row.copy_from_slice(&phys[i2 * n1..(i2 + 1) * n1]);
            self.r2c
                .process_with_scratch(&mut scratch.row, &mut scratch.row_out, &mut scratch.r2c)
                .expect("r2c length mismatch");
            for i1 in 0..cols {
                spec[i1 * n2 + i2] = scratch.row_out[i1] * norm;
            }
        }
        self.col_fwd.process_with_scratch(&mut spec[..cols * n2], &mut scratch.fft);
        spec[cols * n2..].fill(Complex64::default());
    }

    /// Inverse of [`Grid::forward_plane`], reading only the first `cols`
    /// columns (the others are treated as zero). `spec` is consumed as
    /// scratch.
    pub(crate) fn inverse_plane(&self, spec: &mut [Complex64], phys: &mut [f64], scratch: &mut PlaneScratch, cols: usize) {
        let (n1, n2, nh) = (self.n1, self.n2, self.nh());
        self.col_inv.process_with_scratch(&mut spec[..cols * n2], &mut scratch.fft);
        for i2 in 0..n2 {
            // c2r uses its input as scratch
            scratch.row_out[cols..].fill(Complex64::default());
            for i1 in 0..cols {
                scratch.row_out[i1] = spec[i1 * n2 + i2];
            }
            scratch.row_out[0].im = 0.0;
            scratch.row_out[nh - 1].im = 0.0;
            self.c2r
                .process_with_scratch(&mut scratch.row_out, &mut scratch.row, &mut scratch.c2r)
                .expect("c2r length mismatch");
            phys[i2 * n1..(i2 + 1) * n1].copy_from_slice(&scratch.row);
        }
    }

    /// Forward transform of all planes.
    pub fn forward(&self, phys: &[f64], spec: &mut [Complex64], scratch: &mut PlaneScratch) {
        self.forward_cols(phys, spec, scratch, self.nh());
    }

    /// Inverse transform of all planes; leaves `spec` untouched.
    pub fn inverse(&self, spec: &[Complex64], phys: &mut [f64], scratch: &mut PlaneScratch) {
        self.inverse_cols(spec, phys, scratch, self.nh());
    }

    /// Number of `k1` columns that contain modes kept by dealiasing.
    pub fn resolved_cols(&self) -> usize {
        (self.n1 as f64 * DEALIAS_FRACTION / 2.0).floor() as usize + 1
    }

    /// Forward transform computing only the first `cols` columns.
    pub fn forward_cols(&self, phys: &[f64], spec: &mut [Complex64], scratch: &mut PlaneScratch, cols: usize) {
        let (pl, sl) = (self.plane_len(), self.spec_plane_len());
        for j in 0..self.planes() {
            self.forward_plane(&phys[j * pl..(j + 1) * pl], &mut spec[j * sl..(j + 1) * sl], scratch, cols);
        }
    }

    /// Inverse transform assuming columns beyond `cols` vanish.
    pub fn inverse_cols(&self, spec: &[Complex64], phys: &mut [f64], scratch: &mut PlaneScratch, cols: usize) {
        let (pl, sl) = (self.plane_len(), self.spec_plane_len());
        for j in 0..self.planes() {
            scratch.plane.copy_from_slice(&spec[j * sl..(j + 1) * sl]);
            let mut plane = std::mem::take(&mut scratch.plane);
            self.inverse_plane(&mut plane, &mut phys[j * pl..(j + 1) * pl], scratch, cols);
            scratch.plane = plane;
        }
    }

    pub fn scratch(&self) -> PlaneScratch {
        PlaneScratch {
            row: vec![0.0; self.n1],
            row_out: vec![Complex64::default(); self.nh()],
            r2c: vec![Complex64::default(); self.r2c.get_scratch_len()],
            c2r: vec![Complex64::default(); self.c2r.get_scratch_len()],
            fft: vec![
                Complex64::default();
                self.col_fwd.get_inplace_scratch_len().max(self.col_inv.get_inplace_scratch_len())
            ],
            plane: vec![Complex64::default(); self.spec_plane_len()],
        }
    }

    pub(crate) fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.n1, self.n2, self.n3, other.n1, other.n2, other.n3
            )))
        }
    }
}

/// Per-caller FFT work buffers.
pub struct PlaneScratch {
    row: Vec<f64>,
    row_out: Vec<Complex64>,
    r2c: Vec<Complex64>,
    c2r: Vec<Complex64>,
    fft: Vec<Complex64>,
    plane: Vec<Complex64>,
}

fn layer_index(c: f64, n3: usize) -> Option<usize> {
    let x = c * n3 as f64;
    let r = x.round();
    ((x - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dimensions() {
        assert!(Grid::new(7, 8, 16, 0.25).is_err());
        assert!(Grid::new(8, 10, 16, 0.25).is_ok());
        assert!(Grid::new(8, 8, 2, 0.25).is_err());
        assert!(Grid::new(8, 8, 16, 1.0).is_err());
    }

    #[test]
    fn layer_must_sit_on_a_plane() {
        let err = Grid::new(8, 8, 21, 0.5).unwrap_err();
        assert!(err.to_string().contains("not an integer"));
        assert_eq!(Grid::new(8, 8, 16, 0.25).unwrap().layer_top(), 4);
    }

    #[test]
    fn slot_lookup_roundtrips_wavenumbers() {
        let g = Grid::new(16, 12, 8, 0.25).unwrap();
        for k1 in -7i64..=7 {
            for k2 in -5i64..=5 {
                let (i1, i2, conj) = g.slot(k1, k2).unwrap();
                let (q1, q2) = g.wavenumber(i1, i2);
                let sign = if conj { -1.0 } else { 1.0 };
                assert_eq!((q1 * sign, q2 * sign), (k1 as f64, k2 as f64));
            }
        }
    }
}
