//! Stationary Stokes solution operator `M` and its adjoint `M*`.
//!
//! Per horizontal wavenumber the velocity is recovered from the vertical
//! component `w`, which solves the clamped biharmonic problem
//! `(D^2 - |k|^2)^2 w = Ra |k|^2 T` with `w = Dw = 0` at the walls. The
//! discrete operator is the elimination of a staggered (MAC) velocity and
//! pressure discretization, so it coincides with the primitive-variable
//! solve in [`oracle`] up to round-off. The horizontal velocity carries no
//! vertical vorticity: `u_h = i k Dw / |k|^2`.

use std::sync::Arc;

use num_complex::Complex64;

use crate::banded::PentaLdl;
use crate::error::Result;
use crate::field::{ScalarField, SpectralField, VectorField};
use crate::grid::Grid;

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Factored per-mode operator.
#[derive(Clone, Debug)]
pub struct ModeSolver {
    k1: f64,
    k2: f64,
    kappa2: f64,
    h: f64,
    factor: PentaLdl,
}

impl ModeSolver {
    pub fn new(k1: f64, k2: f64, n3: usize) -> Self {
        let h = 1.0 / n3 as f64;
        let kappa2 = k1 * k1 + k2 * k2;
        let (a0, a1, a2) = biharmonic_bands(n3, kappa2);
        let factor = PentaLdl::factor(&a0, &a1, &a2).expect("clamped biharmonic is positive definite");
        ModeSolver { k1, k2, kappa2, h, factor }
    }

    pub fn kappa(&self) -> f64 {
        self.kappa2.sqrt()
    }

    pub fn wavevector(&self) -> (f64, f64) {
        (self.k1, self.k2)
    }

    /// Solves `A w = rhs` over the interior nodes, in place.
    pub fn solve(&self, rhs: &mut [Complex64]) {
        self.factor.solve(rhs);
    }

    /// `A w` over the interior nodes.
    pub fn apply(&self, w: &[Complex64]) -> Vec<Complex64> {
        let n = w.len() + 1;
        let (a0, a1, a2) = biharmonic_bands(n, self.kappa2);
        let m = w.len();
        (0..m)
            .map(|i| {
                let mut v = w[i] * a0[i];
                if i >= 1 {
                    v += w[i - 1] * a1[i - 1];
                }
                if i + 1 < m {
                    v += w[i + 1] * a1[i];
                }
                if i >= 2 {
                    v += w[i - 2] * a2[i - 2];
                }
                if i + 2 < m {
                    v += w[i + 2] * a2[i];
                }
                v
            })
            .collect()
    }

    /// Relative residual `|A w - rhs| / |rhs|` of a computed solution.
    pub fn residual(&self, w: &[Complex64], rhs: &[Complex64]) -> f64 {
        let aw = self.apply(w);
        let num: f64 = aw.iter().zip(rhs).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let den: f64 = rhs.iter().map(|b| b.norm_sqr()).sum::<f64>().sqrt();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    fn horizontal_from_w(&self, w_full: &[Complex64], j: usize) -> (Complex64, Complex64) {
        let dw = (w_full[j + 1] - w_full[j - 1]) / (2.0 * self.h);
        let s = dw * I / self.kappa2;
        (s * self.k1, s * self.k2)
    }
}

/// Bands of `L^2 + (2 / h^4)(e_1 e_1^T + e_m e_m^T)` with
/// `L = tridiag(1, -2 - h^2 |k|^2, 1) / h^2` on the `n - 1` interior nodes.
fn biharmonic_bands(n: usize, kappa2: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = n - 1;
    let h = 1.0 / n as f64;
    let h2 = h * h;
    let off = 1.0 / h2;
    let diag = -2.0 / h2 - kappa2;
    let mut a0 = vec![diag * diag + 2.0 * off * off; m];
    a0[0] = diag * diag + off * off + 2.0 * off * off;
    a0[m - 1] = diag * diag + off * off + 2.0 * off * off;
    if m == 1 {
        a0[0] = diag * diag + 4.0 * off * off;
    }
    let a1 = vec![2.0 * off * diag; m.saturating_sub(1)];
    let a2 = vec![off * off; m.saturating_sub(2)];
    (a0, a1, a2)
}

/// Velocity in spectral form, one coefficient array per component.
#[derive(Clone, Debug)]
pub struct SpectralVelocity {
    pub components: [SpectralField; 3],
}

impl SpectralVelocity {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        SpectralVelocity { components: [SpectralField::zeros(grid), SpectralField::zeros(grid), SpectralField::zeros(grid)] }
    }

    pub fn to_physical(&self) -> VectorField {
        VectorField::new(
            self.components[0].to_physical(),
            self.components[1].to_physical(),
            self.components[2].to_physical(),
        )
    }
}

/// Solution operator for all horizontal modes of one grid.
#[derive(Debug)]
pub struct StokesSolver {
    grid: Arc<Grid>,
    ra: f64,
    modes: Vec<Option<ModeSolver>>,
}

impl StokesSolver {
    pub fn new(grid: &Arc<Grid>, ra: f64) -> Self {
        let mut modes = Vec::with_capacity(grid.spec_plane_len());
        for i1 in 0..grid.nh() {
            for i2 in 0..grid.n2() {
                let (k1, k2) = grid.wavenumber(i1, i2);
                if (i1 == 0 && i2 == 0) || grid.is_nyquist(i1, i2) {
                    modes.push(None);
                } else {
                    modes.push(Some(ModeSolver::new(k1, k2, grid.n3())));
                }
            }
        }
        StokesSolver { grid: grid.clone(), ra, modes }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn ra(&self) -> f64 {
        self.ra
    }

    /// Solver for slot `(i1, i2)`; `None` for the mean and Nyquist slots,
    /// whose velocity is identically zero.
    pub fn mode(&self, i1: usize, i2: usize) -> Option<&ModeSolver> {
        self.modes[i1 * self.grid.n2() + i2].as_ref()
    }

    /// `M` on raw spectral coefficients. `out` receives `(u1, u2, u3)`.
    pub fn apply_m_coeffs(&self, t: &[Complex64], out: [&mut [Complex64]; 3], col: &mut Vec<Complex64>) {
        self.apply_m_coeffs_masked(t, out, col, None);
    }

    /// As [`StokesSolver::apply_m_coeffs`], skipping slots where `active` is
    /// false (their output is zero; the caller guarantees the input vanishes
    /// there).
    pub fn apply_m_coeffs_masked(
        &self,
        t: &[Complex64],
        out: [&mut [Complex64]; 3],
        col: &mut Vec<Complex64>,
        active: Option<&[bool]>,
    ) {
        let g = &self.grid;
        let (sl, n) = (g.spec_plane_len(), g.n3());
        let [o1, o2, o3] = out;
        for o in [&mut *o1, &mut *o2, &mut *o3] {
            o.fill(Complex64::default());
        }
        for s in 0..sl {
            let Some(ms) = &self.modes[s] else { continue };
            if active.is_some_and(|a| !a[s]) {
                continue;
            }
            col.clear();
            col.push(Complex64::default());
            col.extend((1..n).map(|j| t[j * sl + s] * (self.ra * ms.kappa2)));
            col.push(Complex64::default());
            ms.solve(&mut col[1..n]);
            for j in 1..n {
                let (a, b) = ms.horizontal_from_w(col, j);
                o1[j * sl + s] = a;
                o2[j * sl + s] = b;
                o3[j * sl + s] = col[j];
            }
        }
    }

    /// `M*` on raw spectral coefficients of a vector forcing.
    pub fn apply_m_star_coeffs(&self, f: [&[Complex64]; 3], out: &mut [Complex64], col: &mut Vec<Complex64>) {
        let g = &self.grid;
        let (sl, n) = (g.spec_plane_len(), g.n3());
        let inv2h = 0.5 / g.h();
        for s in 0..sl {
            out[s] = Complex64::default();
            out[n * sl + s] = Complex64::default();
            let Some(ms) = &self.modes[s] else {
                for j in 1..n {
                    out[j * sl + s] = Complex64::default();
                }
                continue;
            };
            // horizontal forcing is taken as zero on the walls
            let fh = |c: &[Complex64], j: usize| if j == 0 || j == n { Complex64::default() } else { c[j * sl + s] };
            col.clear();
            col.extend((1..n).map(|j| {
                let d1 = (fh(f[0], j + 1) - fh(f[0], j - 1)) * inv2h;
                let d2 = (fh(f[1], j + 1) - fh(f[1], j - 1)) * inv2h;
                (I * (d1 * ms.k1 + d2 * ms.k2) + f[2][j * sl + s] * ms.kappa2) * self.ra
            }));
            ms.solve(col);
            for j in 1..n {
                out[j * sl + s] = col[j - 1];
            }
        }
    }

    pub fn apply_m_spectral(&self, t: &SpectralField) -> SpectralVelocity {
        let mut v = SpectralVelocity::zeros(&self.grid);
        let [a, b, c] = &mut v.components;
        let mut col = Vec::with_capacity(self.grid.planes());
        self.apply_m_coeffs(t.coeffs(), [a.coeffs_mut(), b.coeffs_mut(), c.coeffs_mut()], &mut col);
        v
    }

    pub fn apply_m_star_spectral(&self, f: &SpectralVelocity) -> SpectralField {
        let mut out = SpectralField::zeros(&self.grid);
        let mut col = Vec::with_capacity(self.grid.planes());
        let [a, b, c] = &f.components;
        self.apply_m_star_coeffs([a.coeffs(), b.coeffs(), c.coeffs()], out.coeffs_mut(), &mut col);
        out
    }

    /// Velocity `u = M(T)`.
    pub fn apply_m(&self, t: &ScalarField) -> Result<VectorField> {
        self.grid.ensure_same(t.grid())?;
        Ok(self.apply_m_spectral(&t.to_spectral()).to_physical())
    }

    /// Vertical component of the Stokes solution with right side `Ra f`.
    pub fn apply_m_star(&self, f: &VectorField) -> Result<ScalarField> {
        self.grid.ensure_same(f.grid())?;
        let spec = SpectralVelocity {
            components: [
                f.components[0].to_spectral(),
                f.components[1].to_spectral(),
                f.components[2].to_spectral(),
            ],
        };
        Ok(self.apply_m_star_spectral(&spec).to_physical())
    }
}

/// Discrete divergence: spectral in the horizontal, second-order differences
/// in `x3` (one-sided on the wall planes).
pub fn divergence(u: &VectorField) -> ScalarField {
    let g = u.grid().clone();
    let d1 = u.components[0].to_spectral().horizontal_derivative(crate::field::Axis::X1);
    let d2 = u.components[1].to_spectral().horizontal_derivative(crate::field::Axis::X2);
    let d3 = u.components[2].to_spectral().vertical_derivative();
    let coeffs = d1
        .coeffs()
        .iter()
        .zip(d2.coeffs())
        .zip(d3.coeffs())
        .map(|((a, b), c)| a + b + c)
        .collect();
    SpectralField::from_coeffs(&g, coeffs, Default::default()).expect("sizes agree").to_physical()
}

/// Largest divergence over the interior planes, mode by mode.
pub fn max_interior_divergence(u: &SpectralVelocity) -> f64 {
    let g = u.components[0].grid();
    let (sl, n) = (g.spec_plane_len(), g.n3());
    let inv2h = 0.5 / g.h();
    let mut worst: f64 = 0.0;
    for i1 in 0..g.nh() {
        for i2 in 0..g.n2() {
            let s = i1 * g.n2() + i2;
            let (k1, k2) = if g.is_nyquist(i1, i2) { (0.0, 0.0) } else { g.wavenumber(i1, i2) };
            for j in 1..n {
                let c = |f: usize, j: usize| u.components[f].coeffs()[j * sl + s];
                let div = I * (c(0, j) * k1 + c(1, j) * k2) + (c(2, j + 1) - c(2, j - 1)) * inv2h;
                worst = worst.max(div.norm());
            }
        }
    }
    worst
}

/// Dense primitive-variable solve of the staggered Stokes system for one
/// mode, used to validate the banded operator.
pub mod oracle {
    use nalgebra::{DMatrix, DVector};
    use num_complex::Complex64;

    use super::I;

    /// Nodal velocity `(u1, u2, u3)` on planes `0..=n3` for buoyancy
    /// `Ra * t` given at the nodes. Unknowns: horizontal velocity and
    /// pressure at cell midpoints, vertical velocity at interior nodes.
    pub fn primitive_solve(
        n3: usize,
        k1: f64,
        k2: f64,
        ra: f64,
        t: &[Complex64],
    ) -> (Vec<Complex64>, Vec<Complex64>, Vec<Complex64>) {
        let n = n3;
        let h = 1.0 / n as f64;
        let kk = k1 * k1 + k2 * k2;
        let size = 4 * n - 1;
        let (iu1, iu2, ip) = (0, n, 2 * n);
        let iw = |j: usize| 3 * n + j - 1;
        let mut a = DMatrix::<Complex64>::zeros(size, size);
        let mut b = DVector::<Complex64>::zeros(size);
        let c = |x: f64| Complex64::new(x, 0.0);
        let h2 = h * h;
        for (base, k) in [(iu1, k1), (iu2, k2)] {
            for m in 0..n {
                let row = base + m;
                let mut diag = 2.0 / h2 + kk;
                if m == 0 {
                    diag += 1.0 / h2;
                } else {
                    a[(row, base + m - 1)] -= c(1.0 / h2);
                }
                if m == n - 1 {
                    diag += 1.0 / h2;
                } else {
                    a[(row, base + m + 1)] -= c(1.0 / h2);
                }
                a[(row, base + m)] += c(diag);
                a[(row, ip + m)] += I * k;
            }
        }
        for m in 0..n {
            let row = ip + m;
            a[(row, iu1 + m)] += I * k1;
            a[(row, iu2 + m)] += I * k2;
            if m + 1 < n {
                a[(row, iw(m + 1))] += c(1.0 / h);
            }
            if m >= 1 {
                a[(row, iw(m))] -= c(1.0 / h);
            }
        }
        for j in 1..n {
            let row = iw(j);
            a[(row, iw(j))] += c(2.0 / h2 + kk);
            if j > 1 {
                a[(row, iw(j - 1))] -= c(1.0 / h2);
            }
            if j + 1 < n {
                a[(row, iw(j + 1))] -= c(1.0 / h2);
            }
            a[(row, ip + j)] += c(1.0 / h);
            a[(row, ip + j - 1)] -= c(1.0 / h);
            b[row] = t[j] * ra;
        }
        let x = a.lu().solve(&b).expect("primitive Stokes system is nonsingular for k != 0");
        let mut u1 = vec![Complex64::default(); n + 1];
        let mut u2 = vec![Complex64::default(); n + 1];
        let mut u3 = vec![Complex64::default(); n + 1];
        for j in 1..n {
            u1[j] = (x[iu1 + j - 1] + x[iu1 + j]) * 0.5;
            u2[j] = (x[iu2 + j - 1] + x[iu2 + j]) * 0.5;
            u3[j] = x[iw(j)];
        }
        (u1, u2, u3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{sobolev_norm, Dirichlet};
    use rand_chacha::rand_core::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn uniform(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }

    fn random_field(g: &Arc<Grid>, rng: &mut ChaCha8Rng) -> ScalarField {
        let values = (0..g.phys_len()).map(|_| uniform(rng)).collect();
        ScalarField::from_values(g, values, Dirichlet::ZERO).unwrap()
    }

    fn random_vector(g: &Arc<Grid>, rng: &mut ChaCha8Rng) -> VectorField {
        VectorField::new(random_field(g, rng), random_field(g, rng), random_field(g, rng))
    }

    #[test]
    fn bands_have_clamped_wall_rows() {
        let (a0, a1, a2) = biharmonic_bands(8, 0.0);
        let h4 = (1.0f64 / 8.0).powi(4);
        assert!((a0[0] * h4 - 7.0).abs() < 1e-12);
        assert!((a1[0] * h4 + 4.0).abs() < 1e-12);
        assert!((a2[0] * h4 - 1.0).abs() < 1e-12);
        assert!((a0[3] * h4 - 6.0).abs() < 1e-12);
    }

    #[test]
    fn single_mode_matches_dense_primitive_solve() {
        let n3 = 16;
        let ms = ModeSolver::new(1.0, 0.0, n3);
        let t: Vec<Complex64> = (0..=n3).map(|j| Complex64::new((PI * j as f64 / n3 as f64).sin(), 0.0)).collect();
        let ra = 1e4;
        let (u1, u2, u3) = oracle::primitive_solve(n3, 1.0, 0.0, ra, &t);
        let mut w: Vec<Complex64> = (1..n3).map(|j| t[j] * ra * ms.kappa2).collect();
        let rhs = w.clone();
        ms.solve(&mut w);
        assert!(ms.residual(&w, &rhs) < 1e-12);
        let mut full = vec![Complex64::default()];
        full.extend(&w);
        full.push(Complex64::default());
        let scale = u3.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for j in 1..n3 {
            let (a, b) = ms.horizontal_from_w(&full, j);
            assert!((full[j] - u3[j]).norm() < 1e-10 * scale);
            assert!((a - u1[j]).norm() < 1e-10 * scale);
            assert!((b - u2[j]).norm() < 1e-10 * scale);
        }
    }

    #[test]
    fn profiles_and_zero_produce_no_flow() {
        let g = Grid::new(16, 16, 16, 0.25).unwrap();
        let st = StokesSolver::new(&g, 1e4);
        let chi = ScalarField::from_profile(&g, |z| (3.0 * z).cos() + z * z);
        assert!(st.apply_m(&chi).unwrap().max_abs() < 1e-10 * chi.max_abs());
        assert_eq!(st.apply_m(&ScalarField::zeros(&g)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn velocity_vanishes_on_walls_and_is_divergence_free() {
        let g = Grid::new(16, 8, 16, 0.25).unwrap();
        let st = StokesSolver::new(&g, 1e4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_field(&g, &mut rng);
        let u = st.apply_m_spectral(&t.to_spectral());
        let scale = u.components.iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(max_interior_divergence(&u) <= 1e-10 * scale.max(1.0));
        let phys = u.to_physical();
        for c in &phys.components {
            for j in [0, g.n3()] {
                assert!(c.plane(j).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn adjoint_identity_holds() {
        let g = Grid::new(16, 12, 16, 0.25).unwrap();
        let st = StokesSolver::new(&g, 1e4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let t = random_field(&g, &mut rng);
            let f = random_vector(&g, &mut rng);
            let lhs = st.apply_m(&t).unwrap().inner(&f);
            let rhs = t.inner(&st.apply_m_star(&f).unwrap());
            let scale = sobolev_norm(&t, 0) * f.norm();
            assert!((lhs - rhs).abs() <= 1e-10 * scale, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn adjoint_of_uniform_forcing_is_zero() {
        let g = Grid::new(8, 8, 16, 0.25).unwrap();
        let st = StokesSolver::new(&g, 1e4);
        let f = VectorField::new(
            ScalarField::from_profile(&g, |z| z.sin()),
            ScalarField::constant(&g, 2.0),
            ScalarField::from_profile(&g, |z| z * z),
        );
        assert!(st.apply_m_star(&f).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn divergence_of_simple_fields() {
        let g = Grid::new(16, 8, 16, 0.25).unwrap();
        let u = VectorField::new(ScalarField::from_fn(&g, |x, _, _| x.sin()), ScalarField::zeros(&g), ScalarField::zeros(&g));
        let d = divergence(&u);
        let exact = ScalarField::from_fn(&g, |x, _, _| x.cos());
        assert!(d.sub(&exact).max_abs() < 1e-14);
        assert_eq!(divergence(&VectorField::zeros(&g)).max_abs(), 0.0);
    }
}
