//! Scalar and vector fields on the strip, transforms, derivatives and norms.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Dirichlet data carried by a scalar field on the bottom and top walls.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dirichlet {
    pub bottom: f64,
    pub top: f64,
}

impl Dirichlet {
    pub const ZERO: Dirichlet = Dirichlet { bottom: 0.0, top: 0.0 };

    pub fn new(bottom: f64, top: f64) -> Self {
        Dirichlet { bottom, top }
    }

    /// The linear profile `bottom * (1 - x3) + top * x3`, exact at both walls.
    #[inline]
    pub fn linear(&self, x3: f64) -> f64 {
        self.bottom * (1.0 - x3) + self.top * x3
    }
}

/// Physical-space scalar field, values stored plane by plane (`x3` slowest,
/// `x1` fastest).
#[derive(Clone, Debug)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
    boundary: Dirichlet,
}

/// Half-spectrum representation of a real scalar field.
#[derive(Clone, Debug)]
pub struct SpectralField {
    grid: Arc<Grid>,
    coeffs: Vec<Complex64>,
    boundary: Dirichlet,
}

/// Three-component velocity-like field.
#[derive(Clone, Debug)]
pub struct VectorField {
    pub components: [ScalarField; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X1,
    X2,
}

impl ScalarField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        ScalarField { grid: grid.clone(), values: vec![0.0; grid.phys_len()], boundary: Dirichlet::ZERO }
    }

    pub fn constant(grid: &Arc<Grid>, value: f64) -> Self {
        ScalarField {
            grid: grid.clone(),
            values: vec![value; grid.phys_len()],
            boundary: Dirichlet::new(value, value),
        }
    }

    /// Samples `f(x1, x2, x3)` at the collocation points. The boundary tag is
    /// read off the wall planes when they are uniform, otherwise left at zero.
    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.phys_len());
        for j in 0..grid.planes() {
            let x3 = grid.x3(j);
            for i2 in 0..grid.n2() {
                let x2 = grid.x2(i2);
                for i1 in 0..grid.n1() {
                    values.push(f(grid.x1(i1), x2, x3));
                }
            }
        }
        let mut field = ScalarField { grid: grid.clone(), values, boundary: Dirichlet::ZERO };
        field.boundary = field.detect_boundary();
        field
    }

    /// The conduction profile `T_b + x3 (T_u - T_b)`.
    pub fn conduction(grid: &Arc<Grid>, boundary: Dirichlet) -> Self {
        let mut field = Self::from_profile(grid, |x3| boundary.linear(x3));
        field.boundary = boundary;
        field
    }

    /// Field depending on `x3` only.
    pub fn from_profile(grid: &Arc<Grid>, profile: impl Fn(f64) -> f64) -> Self {
        let pl = grid.plane_len();
        let mut values = vec![0.0; grid.phys_len()];
        for j in 0..grid.planes() {
            let v = profile(grid.x3(j));
            values[j * pl..(j + 1) * pl].fill(v);
        }
        let mut field = ScalarField { grid: grid.clone(), values, boundary: Dirichlet::ZERO };
        field.boundary = field.detect_boundary();
        field
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>, boundary: Dirichlet) -> Result<Self> {
        if values.len() != grid.phys_len() {
            return Err(Error::SizeMismatch { expected: grid.phys_len(), got: values.len() });
        }
        Ok(ScalarField { grid: grid.clone(), values, boundary })
    }

    fn detect_boundary(&self) -> Dirichlet {
        let pl = self.grid.plane_len();
        let bottom = &self.values[..pl];
        let top = &self.values[self.values.len() - pl..];
        let uniform = |p: &[f64]| p.iter().all(|&v| v == p[0]);
        if uniform(bottom) && uniform(top) {
            Dirichlet::new(bottom[0], top[0])
        } else {
            Dirichlet::ZERO
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
    pub fn boundary(&self) -> Dirichlet {
        self.boundary
    }
    pub fn set_boundary(&mut self, boundary: Dirichlet) {
        self.boundary = boundary;
    }

    #[inline]
    pub fn at(&self, i1: usize, i2: usize, j: usize) -> f64 {
        self.values[j * self.grid.plane_len() + i2 * self.grid.n1() + i1]
    }

    pub fn plane(&self, j: usize) -> &[f64] {
        let pl = self.grid.plane_len();
        &self.values[j * pl..(j + 1) * pl]
    }

    pub fn to_spectral(&self) -> SpectralField {
        let mut coeffs = vec![Complex64::default(); self.grid.spec_len()];
        let mut scratch = self.grid.scratch();
        self.grid.forward(&self.values, &mut coeffs, &mut scratch);
        SpectralField { grid: self.grid.clone(), coeffs, boundary: self.boundary }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Linear combination `a * self + b * other`; the boundary tag combines
    /// the same way.
    pub fn axpby(&self, a: f64, other: &ScalarField, b: f64) -> ScalarField {
        debug_assert!(self.grid == other.grid);
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        ScalarField {
            grid: self.grid.clone(),
            values,
            boundary: Dirichlet::new(
                a * self.boundary.bottom + b * other.boundary.bottom,
                a * self.boundary.top + b * other.boundary.top,
            ),
        }
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        self.axpby(1.0, other, -1.0)
    }

    pub fn add(&self, other: &ScalarField) -> ScalarField {
        self.axpby(1.0, other, 1.0)
    }

    pub fn scale(&self, a: f64) -> ScalarField {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= a);
        out.boundary = Dirichlet::new(a * self.boundary.bottom, a * self.boundary.top);
        out
    }

    /// Horizontal mean of every plane.
    pub fn horizontal_means(&self) -> Vec<f64> {
        let pl = self.grid.plane_len() as f64;
        (0..self.grid.planes()).map(|j| pairwise_sum(self.plane(j)) / pl).collect()
    }

    /// `L^2(D)` inner product by physical quadrature: exact in the horizontal
    /// directions, trapezoidal in `x3`.
    pub fn inner(&self, other: &ScalarField) -> f64 {
        let g = &self.grid;
        let cell = g.dx1() * g.dx2();
        let terms: Vec<f64> = (0..g.planes())
            .map(|j| {
                let prod: Vec<f64> = self.plane(j).iter().zip(other.plane(j)).map(|(a, b)| a * b).collect();
                g.weight(j) * pairwise_sum(&prod)
            })
            .collect();
        cell * pairwise_sum(&terms)
    }
}

impl SpectralField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        SpectralField { grid: grid.clone(), coeffs: vec![Complex64::default(); grid.spec_len()], boundary: Dirichlet::ZERO }
    }

    pub fn from_coeffs(grid: &Arc<Grid>, coeffs: Vec<Complex64>, boundary: Dirichlet) -> Result<Self> {
        if coeffs.len() != grid.spec_len() {
            return Err(Error::SizeMismatch { expected: grid.spec_len(), got: coeffs.len() });
        }
        Ok(SpectralField { grid: grid.clone(), coeffs, boundary })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }
    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }
    pub fn into_coeffs(self) -> Vec<Complex64> {
        self.coeffs
    }
    pub fn boundary(&self) -> Dirichlet {
        self.boundary
    }
    pub fn set_boundary(&mut self, boundary: Dirichlet) {
        self.boundary = boundary;
    }

    #[inline]
    pub fn index(&self, j: usize, i1: usize, i2: usize) -> usize {
        j * self.grid.spec_plane_len() + i1 * self.grid.n2() + i2
    }

    #[inline]
    pub fn get(&self, j: usize, i1: usize, i2: usize) -> Complex64 {
        self.coeffs[self.index(j, i1, i2)]
    }

    /// Coefficient of the signed wavevector `(k1, k2)` on plane `j`.
    pub fn mode(&self, j: usize, k1: i64, k2: i64) -> Complex64 {
        match self.grid.slot(k1, k2) {
            Some((i1, i2, conj)) => {
                let c = self.get(j, i1, i2);
                if conj {
                    c.conj()
                } else {
                    c
                }
            }
            None => Complex64::default(),
        }
    }

    pub fn to_physical(&self) -> ScalarField {
        let mut values = vec![0.0; self.grid.phys_len()];
        let mut scratch = self.grid.scratch();
        self.grid.inverse(&self.coeffs, &mut values, &mut scratch);
        ScalarField { grid: self.grid.clone(), values, boundary: self.boundary }
    }

    /// Spectral derivative along a horizontal axis; Nyquist slots map to zero.
    pub fn horizontal_derivative(&self, axis: Axis) -> SpectralField {
        let g = &self.grid;
        let mut out = self.clone();
        out.boundary = Dirichlet::ZERO;
        for j in 0..g.planes() {
            for i1 in 0..g.nh() {
                for i2 in 0..g.n2() {
                    let idx = out.index(j, i1, i2);
                    let (k1, k2) = g.wavenumber(i1, i2);
                    let k = if g.is_nyquist(i1, i2) {
                        0.0
                    } else {
                        match axis {
                            Axis::X1 => k1,
                            Axis::X2 => k2,
                        }
                    };
                    out.coeffs[idx] *= Complex64::new(0.0, k);
                }
            }
        }
        out
    }

    pub fn vertical_derivative(&self) -> SpectralField {
        let g = &self.grid;
        let mut out = SpectralField::zeros(g);
        vertical_derivative_columns(&self.coeffs, &mut out.coeffs, g.planes(), g.spec_plane_len(), g.h());
        out
    }

    /// `L^2` inner product from Parseval's identity.
    pub fn inner(&self, other: &SpectralField) -> f64 {
        let g = &self.grid;
        let vol = 4.0 * PI * PI;
        let terms: Vec<f64> = (0..g.planes())
            .map(|j| {
                let mut acc = Vec::with_capacity(g.spec_plane_len());
                for i1 in 0..g.nh() {
                    let m = g.multiplicity(i1);
                    for i2 in 0..g.n2() {
                        let a = self.get(j, i1, i2);
                        let b = other.get(j, i1, i2);
                        acc.push(m * (a.re * b.re + a.im * b.im));
                    }
                }
                g.weight(j) * pairwise_sum(&acc)
            })
            .collect();
        vol * pairwise_sum(&terms)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }

    /// Largest deviation from conjugate symmetry on the self-conjugate
    /// columns `k1 = 0` and `k1 = n1 / 2`.
    pub fn conjugate_symmetry_defect(&self) -> f64 {
        let g = &self.grid;
        let mut worst: f64 = 0.0;
        for j in 0..g.planes() {
            for i1 in [0, g.nh() - 1] {
                for i2 in 0..g.n2() {
                    let mirror = (g.n2() - i2) % g.n2();
                    let d = self.get(j, i1, i2) - self.get(j, i1, mirror).conj();
                    worst = worst.max(d.norm());
                }
            }
        }
        worst
    }
}

impl VectorField {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        VectorField { components: [ScalarField::zeros(grid), ScalarField::zeros(grid), ScalarField::zeros(grid)] }
    }

    pub fn new(u1: ScalarField, u2: ScalarField, u3: ScalarField) -> Self {
        VectorField { components: [u1, u2, u3] }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.components[0].grid()
    }

    pub fn inner(&self, other: &VectorField) -> f64 {
        let parts: Vec<f64> = (0..3).map(|i| self.components[i].inner(&other.components[i])).collect();
        pairwise_sum(&parts)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).max(0.0).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.components.iter().map(ScalarField::max_abs).fold(0.0, f64::max)
    }

    pub fn sub(&self, other: &VectorField) -> VectorField {
        VectorField {
            components: [
                self.components[0].sub(&other.components[0]),
                self.components[1].sub(&other.components[1]),
                self.components[2].sub(&other.components[2]),
            ],
        }
    }

    /// `H^1` norm summed over components.
    pub fn h1_norm(&self) -> f64 {
        self.components.iter().map(|c| sobolev_norm(c, 1).powi(2)).sum::<f64>().sqrt()
    }
}

/// Spectral derivative of a physical field along a horizontal axis.
///
/// Each plane is shifted by its first value before transforming, which leaves
/// the derivative unchanged but makes constant planes transform to exact zeros.
pub fn horizontal_derivative(f: &ScalarField, axis: Axis) -> ScalarField {
    let pl = f.grid.plane_len();
    let mut shifted = f.clone();
    for plane in shifted.values.chunks_exact_mut(pl) {
        let v0 = plane[0];
        plane.iter_mut().for_each(|v| *v -= v0);
    }
    shifted.to_spectral().horizontal_derivative(axis).to_physical()
}

/// Second-order vertical derivative: centred in the interior, one-sided
/// second order at the walls.
pub fn vertical_derivative(f: &ScalarField) -> Result<ScalarField> {
    let g = f.grid();
    if g.n3() < 2 {
        return Err(Error::InvalidGrid("vertical derivative needs n3 >= 2".into()));
    }
    let mut values = vec![0.0; g.phys_len()];
    vertical_derivative_columns(&f.values, &mut values, g.planes(), g.plane_len(), g.h());
    Ok(ScalarField { grid: g.clone(), values, boundary: Dirichlet::ZERO })
}

/// Applies the vertical first-derivative stencil to every column of a
/// plane-major array.
pub fn vertical_derivative_columns<T>(src: &[T], dst: &mut [T], planes: usize, stride: usize, h: f64)
where
    T: Copy + Add<Output = T> + Sub<Output = T> + Mul<f64, Output = T>,
{
    let n = planes - 1;
    let c = 0.5 / h;
    let plane = |j: usize| &src[j * stride..(j + 1) * stride];
    let (p0, p1, p2) = (plane(0), plane(1), plane(2));
    for (p, d) in dst[..stride].iter_mut().enumerate() {
        // written in differences so constants give exact zeros
        *d = ((p1[p] - p0[p]) * 4.0 - (p2[p] - p0[p])) * c;
    }
    for j in 1..n {
        let (lo, hi) = (plane(j - 1), plane(j + 1));
        for ((d, &a), &b) in dst[j * stride..(j + 1) * stride].iter_mut().zip(hi).zip(lo) {
            *d = (a - b) * c;
        }
    }
    let (q0, q1, q2) = (plane(n), plane(n - 1), plane(n - 2));
    for (p, d) in dst[n * stride..(n + 1) * stride].iter_mut().enumerate() {
        *d = ((q2[p] - q0[p]) - (q1[p] - q0[p]) * 4.0) * c;
    }
}

/// Discrete Sobolev norm: order 0 is the `L^2` norm, order 1 adds the `L^2`
/// norms of all first derivatives. Orders above 1 are rejected by clamping
/// to the `H^1` norm; use [`h3_diagnostic`] for higher smoothness.
pub fn sobolev_norm(f: &ScalarField, order: u8) -> f64 {
    sobolev_norm_spectral(&f.to_spectral(), order)
}

pub fn sobolev_norm_spectral(f: &SpectralField, order: u8) -> f64 {
    let g = f.grid();
    let l2 = f.inner(f);
    if order == 0 {
        return l2.max(0.0).sqrt();
    }
    let vol = 4.0 * PI * PI;
    let mut horizontal = Vec::with_capacity(g.planes());
    for j in 0..g.planes() {
        let mut acc = Vec::with_capacity(g.spec_plane_len());
        for i1 in 0..g.nh() {
            let m = g.multiplicity(i1);
            for i2 in 0..g.n2() {
                if g.is_nyquist(i1, i2) {
                    continue;
                }
                let (k1, k2) = g.wavenumber(i1, i2);
                acc.push(m * (k1 * k1 + k2 * k2) * f.get(j, i1, i2).norm_sqr());
            }
        }
        horizontal.push(g.weight(j) * pairwise_sum(&acc));
    }
    let dz = f.vertical_derivative();
    let total = l2 + vol * pairwise_sum(&horizontal) + dz.inner(&dz);
    total.max(0.0).sqrt()
}

/// Diagnostic `H^3`-type norm built from horizontal wavenumber weights and
/// repeated vertical differencing. Low order accurate near the walls; only
/// meant for monitoring boundedness.
pub fn h3_diagnostic(f: &SpectralField) -> f64 {
    let g = f.grid();
    let vol = 4.0 * PI * PI;
    let mut derivs = vec![f.clone()];
    for q in 0..3 {
        let next = derivs[q].vertical_derivative();
        derivs.push(next);
    }
    let mut total = 0.0;
    for (q, d) in derivs.iter().enumerate() {
        for j in 0..g.planes() {
            let w = g.weight(j);
            for i1 in 0..g.nh() {
                let m = g.multiplicity(i1);
                for i2 in 0..g.n2() {
                    let (k1, k2) = g.wavenumber(i1, i2);
                    let kk = if g.is_nyquist(i1, i2) { 0.0 } else { k1 * k1 + k2 * k2 };
                    let weight: f64 = (0..=(3 - q)).map(|p| kk.powi(p as i32)).sum();
                    total += vol * w * m * weight * d.get(j, i1, i2).norm_sqr();
                }
            }
        }
    }
    total.sqrt()
}

/// Smooth random field with zero wall values and unit `H^1` norm:
/// `sum a cos(k . x + phi) sin(n pi x3)` over `|k1|, |k2| <= kmax`,
/// `1 <= n <= nmax`, amplitudes decaying like `1 / (1 + |k|^2 + n^2)`.
/// The same `seed` always gives the same field.
pub fn random_smooth(grid: &Arc<Grid>, seed: u64, kmax: i64, nmax: usize) -> ScalarField {
    use rand_chacha::rand_core::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut unit = move || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let mut terms = Vec::new();
    for k1 in 0..=kmax {
        for k2 in -kmax..=kmax {
            if k1 == 0 && k2 < 0 {
                continue;
            }
            for n in 1..=nmax {
                let decay = 1.0 / (1.0 + (k1 * k1 + k2 * k2) as f64 + (n * n) as f64);
                terms.push((k1 as f64, k2 as f64, n as f64, decay * (2.0 * unit() - 1.0), 2.0 * PI * unit()));
            }
        }
    }
    let f = ScalarField::from_fn(grid, |x1, x2, x3| {
        terms.iter().map(|&(k1, k2, n, a, phi)| a * (k1 * x1 + k2 * x2 + phi).cos() * (PI * n * x3).sin()).sum()
    });
    let mut f = f.scale(1.0 / sobolev_norm(&f, 1));
    let pl = grid.plane_len();
    let n3 = grid.n3();
    f.values[..pl].fill(0.0);
    f.values[n3 * pl..].fill(0.0);
    f.boundary = Dirichlet::ZERO;
    f
}

/// Pairwise summation with a fixed tree shape so results do not depend on
/// how callers partition work.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
