//! Time integration of the temperature equation over one unit interval.
//!
//! The stepper evolves `S = T - Tbar` in spectral form, where `Tbar` is the
//! conduction profile, so the wall values of `T` are exact by construction.
//! Diffusion is Crank-Nicolson with per-mode tridiagonal solves; advection
//! and buoyancy coupling are Adams-Bashforth 2, started with one explicit
//! Euler substep at the beginning of every unit interval. Forcing is sampled
//! at substep midpoints.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;

use crate::banded::TriFactor;
use crate::error::{Error, Result};
use crate::field::{pairwise_sum, sobolev_norm_spectral, vertical_derivative_columns, Dirichlet, ScalarField, SpectralField, VectorField};
use crate::grid::{Grid, PlaneScratch};
use crate::stokes::{SpectralVelocity, StokesSolver};

/// Largest number of times a base step is redone with halved substeps after
/// a CFL violation.
pub const MAX_HALVINGS: u32 = 4;

/// Fraction of the CFL limit aimed at when the substep count of a base step
/// is chosen from the velocity at its start.
pub const CFL_TARGET: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepperConfig {
    pub dt: f64,
    pub ra: f64,
    pub boundary: Dirichlet,
    pub cfl_limit: f64,
    /// When false a CFL violation aborts instead of retrying with `dt / 2`.
    pub adaptive: bool,
}

impl Default for StepperConfig {
    fn default() -> Self {
        StepperConfig { dt: 1.0 / 256.0, ra: 1e4, boundary: Dirichlet::new(1.0, 0.0), cfl_limit: 0.5, adaptive: true }
    }
}

impl StepperConfig {
    /// Number of substeps per unit interval; errors unless `dt` divides 1.
    pub fn steps_per_unit(&self) -> Result<usize> {
        steps_for(self.dt)
    }
}

fn steps_for(dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt <= 1.0) {
        return Err(Error::InvalidArgument(format!("dt = {dt} must lie in (0, 1]")));
    }
    let n = (1.0 / dt).round();
    if (n * dt - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("dt = {dt} does not divide the unit interval")));
    }
    Ok(n as usize)
}

/// Space-time forcing on one unit interval, local time in `[0, 1)`.
pub trait Forcing: Sync {
    /// Adds `scale * eta(t)` to spectral coefficients.
    fn add_spectral(&self, t: f64, scale: f64, out: &mut [Complex64]);

    fn is_zero(&self) -> bool {
        false
    }
}

pub struct NoForcing;

impl Forcing for NoForcing {
    fn add_spectral(&self, _t: f64, _scale: f64, _out: &mut [Complex64]) {}
    fn is_zero(&self) -> bool {
        true
    }
}

/// Time-independent forcing given by a field.
pub struct SteadyForcing(pub SpectralField);

impl Forcing for SteadyForcing {
    fn add_spectral(&self, _t: f64, scale: f64, out: &mut [Complex64]) {
        for (o, c) in out.iter_mut().zip(self.0.coeffs()) {
            *o += c * scale;
        }
    }
}

/// How a unit interval divides its base steps.
#[derive(Clone, Copy)]
enum Schedule<'a> {
    Fixed,
    Adaptive,
    /// Substeps per base step, taken from a recorded run.
    Replay(&'a [usize]),
}

/// Spectral `S` at the substep nodes `0 = t_0 < t_1 < ... < t_N = 1` of one
/// unit interval, with the step sizes used between them. Velocities are
/// recomputed from `S` on access.
#[derive(Clone, Debug)]
pub struct FrozenTrajectory {
    grid: Arc<Grid>,
    boundary: Dirichlet,
    times: Vec<f64>,
    dts: Vec<f64>,
    states: Vec<Vec<Complex64>>,
}

impl FrozenTrajectory {
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn boundary(&self) -> Dirichlet {
        self.boundary
    }
    /// Number of stored nodes (substeps + 1).
    pub fn len(&self) -> usize {
        self.states.len()
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
    pub fn time(&self, n: usize) -> f64 {
        self.times[n]
    }
    /// Length of substep `n` (from node `n` to node `n + 1`).
    pub fn step_size(&self, n: usize) -> f64 {
        self.dts[n]
    }
    /// Spectral coefficients of `S = T - Tbar` at node `n`.
    pub fn perturbation(&self, n: usize) -> &[Complex64] {
        &self.states[n]
    }
    pub fn temperature(&self, n: usize) -> ScalarField {
        let s = SpectralField::from_coeffs(&self.grid, self.states[n].clone(), Dirichlet::ZERO).expect("sizes agree");
        s.to_physical().add(&ScalarField::conduction(&self.grid, self.boundary))
    }
    /// `M(T)` at node `n`.
    pub fn velocity(&self, n: usize, stokes: &StokesSolver) -> VectorField {
        let s = SpectralField::from_coeffs(&self.grid, self.states[n].clone(), Dirichlet::ZERO).expect("sizes agree");
        stokes.apply_m_spectral(&s).to_physical()
    }
}

/// Per-substep record used by energy diagnostics.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct EnergySample {
    pub t: f64,
    pub s_l2: f64,
    pub grad_s_l2: f64,
    pub t_h1: f64,
    pub h3_diagnostic: f64,
}

/// Result of a unit-interval integration in spectral form.
#[derive(Clone, Debug)]
pub struct UnitResult {
    pub s_end: Vec<Complex64>,
    /// Number of substeps taken.
    pub steps: usize,
    /// Smallest substep used.
    pub min_dt: f64,
    pub max_cfl: f64,
    /// Smallest constant `C` for which the discrete energy inequality
    /// `(|S'|^2 - |S|^2) / dt + |grad S_mid|^2 <= C (|S_mid|^2 + |eta_mid|^2)`
    /// held on every substep.
    pub energy_constant: f64,
    pub trajectory: Option<FrozenTrajectory>,
}

/// Extrapolation weights `(1 + w/2, w/2)` of variable-step Adams-Bashforth 2
/// with `w = dt / dt_prev`.
pub(crate) fn ab2_weights(dt: f64, dt_prev: f64) -> (f64, f64) {
    let w = dt / dt_prev;
    (1.0 + 0.5 * w, 0.5 * w)
}

struct UnitState {
    s: Vec<Complex64>,
    prev: Vec<Complex64>,
    prev_dt: Option<f64>,
    n_cur: Vec<Complex64>,
    rhs: Vec<Complex64>,
    eta: Vec<Complex64>,
    states: Vec<Vec<Complex64>>,
    times: Vec<f64>,
    dts: Vec<f64>,
    max_cfl: f64,
    energy_constant: f64,
    steps: usize,
    min_dt: f64,
}

/// Hook invoked at the base nodes `t_b = b dt`, `b = 0..=N`, with
/// `(b, t_b, S, u)` in spectral form, `u = M(P S)`.
pub type Observer<'a> = dyn FnMut(usize, f64, &[Complex64], &SpectralVelocity) + 'a;

pub struct ThermalStepper {
    grid: Arc<Grid>,
    cfg: StepperConfig,
    stokes: Arc<StokesSolver>,
    resolved: Vec<bool>,
    kx: Vec<f64>,
    ky: Vec<f64>,
    mult: Vec<f64>,
    cols: usize,
    factors: Mutex<HashMap<usize, Arc<Vec<TriFactor>>>>,
    tbar: Vec<f64>,
}

/// Scratch buffers for one integration.
pub struct Workspace {
    pub(crate) scratch: PlaneScratch,
    pub(crate) col: Vec<Complex64>,
    pub(crate) spec: [Vec<Complex64>; 6],
    pub(crate) phys: [Vec<f64>; 8],
    pub(crate) vel: SpectralVelocity,
}

impl ThermalStepper {
    pub fn new(grid: &Arc<Grid>, cfg: StepperConfig) -> Result<Self> {
        cfg.steps_per_unit()?;
        if !(cfg.cfl_limit > 0.0) {
            return Err(Error::InvalidArgument("cfl_limit must be positive".into()));
        }
        let stokes = Arc::new(StokesSolver::new(grid, cfg.ra));
        let mut resolved = Vec::with_capacity(grid.spec_plane_len());
        let mut kx = Vec::with_capacity(grid.spec_plane_len());
        let mut ky = Vec::with_capacity(grid.spec_plane_len());
        for i1 in 0..grid.nh() {
            for i2 in 0..grid.n2() {
                resolved.push(grid.is_resolved(i1, i2));
                let (k1, k2) = if grid.is_nyquist(i1, i2) { (0.0, 0.0) } else { grid.wavenumber(i1, i2) };
                kx.push(k1);
                ky.push(k2);
            }
        }
        let tbar = (0..grid.planes()).map(|j| cfg.boundary.linear(grid.x3(j))).collect();
        Ok(ThermalStepper {
            grid: grid.clone(),
            cfg,
            stokes,
            resolved,
            mult: (0..grid.spec_plane_len()).map(|s| grid.multiplicity(s / grid.n2())).collect(),
            kx,
            ky,
            cols: grid.resolved_cols(),
            factors: Mutex::new(HashMap::new()),
            tbar,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn config(&self) -> &StepperConfig {
        &self.cfg
    }
    pub fn stokes(&self) -> &Arc<StokesSolver> {
        &self.stokes
    }
    /// Conduction profile at the planes.
    pub fn conduction_profile(&self) -> &[f64] {
        &self.tbar
    }

    pub fn workspace(&self) -> Workspace {
        let g = &self.grid;
        Workspace {
            scratch: g.scratch(),
            col: Vec::with_capacity(g.planes()),
            spec: std::array::from_fn(|_| vec![Complex64::default(); g.spec_len()]),
            phys: std::array::from_fn(|_| vec![0.0; g.phys_len()]),
            vel: SpectralVelocity::zeros(g),
        }
    }

    /// Zeroes the coefficients removed by the dealiasing rule.
    pub fn mask(&self, c: &mut [Complex64]) {
        let sl = self.grid.spec_plane_len();
        for plane in c.chunks_exact_mut(sl) {
            for (v, &keep) in plane.iter_mut().zip(&self.resolved) {
                if !keep {
                    *v = Complex64::default();
                }
            }
        }
    }

    pub(crate) fn resolved(&self) -> &[bool] {
        &self.resolved
    }

    pub fn is_resolved_slot(&self, s: usize) -> bool {
        self.resolved[s]
    }

    /// Crank-Nicolson factors for `steps` substeps per unit interval.
    pub(crate) fn cn_factors(&self, steps: usize) -> Arc<Vec<TriFactor>> {
        let mut cache = self.factors.lock().expect("factor cache poisoned");
        if cache.len() > 64 {
            cache.clear();
        }
        cache.entry(steps).or_insert_with(|| Arc::new(self.build_factors(1.0 / steps as f64))).clone()
    }

    fn build_factors(&self, dt: f64) -> Vec<TriFactor> {
        let g = &self.grid;
        let h2 = g.h() * g.h();
        let m = g.n3() - 1;
        let mut out = Vec::with_capacity(g.spec_plane_len());
        for i1 in 0..g.nh() {
            for i2 in 0..g.n2() {
                let (k1, k2) = g.wavenumber(i1, i2);
                let kk = k1 * k1 + k2 * k2;
                let diag = vec![1.0 + 0.5 * dt * (2.0 / h2 + kk); m];
                out.push(TriFactor::new(&diag, -0.5 * dt / h2));
            }
        }
        out
    }

    /// `(I + dt/2 L) s` on interior planes, Dirichlet zero walls; walls of
    /// `out` are set to zero.
    pub(crate) fn explicit_diffusion(&self, s: &[Complex64], dt: f64, out: &mut [Complex64]) {
        let g = &self.grid;
        let (sl, n) = (g.spec_plane_len(), g.n3());
        let inv_h2 = 1.0 / (g.h() * g.h());
        for i1 in 0..g.nh() {
            for i2 in 0..g.n2() {
                let slot = i1 * g.n2() + i2;
                let (k1, k2) = g.wavenumber(i1, i2);
                let kk = k1 * k1 + k2 * k2;
                out[slot] = Complex64::default();
                out[n * sl + slot] = Complex64::default();
                for j in 1..n {
                    let c = s[j * sl + slot];
                    let lap = (s[(j + 1) * sl + slot] + s[(j - 1) * sl + slot] - c * 2.0) * inv_h2 - c * kk;
                    out[j * sl + slot] = c + lap * (0.5 * dt);
                }
            }
        }
    }

    /// Solves `(I - dt/2 L) x = rhs` on interior planes in place; walls of
    /// `rhs` are overwritten with zero.
    pub(crate) fn implicit_solve(&self, rhs: &mut [Complex64], factors: &[TriFactor], col: &mut Vec<Complex64>) {
        let g = &self.grid;
        let (sl, n) = (g.spec_plane_len(), g.n3());
        for slot in 0..sl {
            col.clear();
            col.extend((1..n).map(|j| rhs[j * sl + slot]));
            factors[slot].solve(col);
            rhs[slot] = Complex64::default();
            rhs[n * sl + slot] = Complex64::default();
            for j in 1..n {
                rhs[j * sl + slot] = col[j - 1];
            }
        }
    }

    /// `P advect(u, f)` in skew form `(u . grad f + div(u f)) / 2`, where `u`
    /// is given physically and `f` both physically (`f_phys`, including any
    /// background profile) and spectrally (`f_spec`, used for horizontal
    /// derivatives). Result is written to `out`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn advect_kernel(
        &self,
        u: [&[f64]; 3],
        f_phys: &[f64],
        f_spec: &[Complex64],
        out: &mut [Complex64],
        tmp_spec: &mut [Complex64],
        tmp_phys: [&mut [f64]; 3],
        scratch: &mut PlaneScratch,
    ) {
        let g = &self.grid;
        let (pl, sl, planes) = (g.plane_len(), g.spec_plane_len(), g.planes());
        let [p1, p2, p3] = tmp_phys;
        // u . grad f
        self.derivative_into(f_spec, 0, tmp_spec);
        self.inverse_resolved(tmp_spec, p1, scratch);
        self.derivative_into(f_spec, 1, tmp_spec);
        self.inverse_resolved(tmp_spec, p2, scratch);
        vertical_derivative_columns(f_phys, p3, planes, pl, g.h());
        for i in 0..p1.len() {
            p1[i] = u[0][i] * p1[i] + u[1][i] * p2[i] + u[2][i] * p3[i];
        }
        self.forward_resolved(p1, out, scratch);
        // div(u f)
        for (axis, ui) in [(0usize, u[0]), (1, u[1])] {
            for i in 0..p1.len() {
                p1[i] = ui[i] * f_phys[i];
            }
            self.forward_resolved(p1, tmp_spec, scratch);
            self.add_derivative(tmp_spec, axis, out);
        }
        for i in 0..p1.len() {
            p1[i] = u[2][i] * f_phys[i];
        }
        vertical_derivative_columns(p1, p2, planes, pl, g.h());
        self.forward_resolved(p2, tmp_spec, scratch);
        for (o, t) in out.iter_mut().zip(tmp_spec.iter()) {
            *o = (*o + t) * 0.5;
        }
        debug_assert_eq!(out.len(), sl * planes);
        self.mask(out);
    }

    pub(crate) fn derivative_into(&self, f: &[Complex64], axis: usize, out: &mut [Complex64]) {
        let k = if axis == 0 { &self.kx } else { &self.ky };
        let sl = self.grid.spec_plane_len();
        for (o, fi) in out.chunks_exact_mut(sl).zip(f.chunks_exact(sl)) {
            for ((o, &f), &k) in o.iter_mut().zip(fi).zip(k) {
                *o = Complex64::new(-f.im * k, f.re * k);
            }
        }
    }

    pub(crate) fn add_derivative(&self, f: &[Complex64], axis: usize, out: &mut [Complex64]) {
        let k = if axis == 0 { &self.kx } else { &self.ky };
        let sl = self.grid.spec_plane_len();
        for (o, fi) in out.chunks_exact_mut(sl).zip(f.chunks_exact(sl)) {
            for ((o, &f), &k) in o.iter_mut().zip(fi).zip(k) {
                *o += Complex64::new(-f.im * k, f.re * k);
            }
        }
    }

    /// Inverse transform of a dealiased spectrum.
    pub(crate) fn inverse_resolved(&self, spec: &[Complex64], phys: &mut [f64], scratch: &mut PlaneScratch) {
        self.grid.inverse_cols(spec, phys, scratch, self.cols);
    }

    /// Forward transform keeping only columns that survive dealiasing; the
    /// caller is expected to mask the result.
    pub(crate) fn forward_resolved(&self, phys: &[f64], spec: &mut [Complex64], scratch: &mut PlaneScratch) {
        self.grid.forward_cols(phys, spec, scratch, self.cols);
    }

    /// Velocity `M(P s)` into `ws.vel` and its physical components into
    /// `ws.phys[5..8]`; `ws.spec[5]` receives `P s`. Returns the largest
    /// component CFL number for step `dt`.
    pub(crate) fn velocity_from(&self, s: &[Complex64], dt: f64, ws: &mut Workspace) -> f64 {
        let g = &self.grid;
        ws.spec[5].copy_from_slice(s);
        self.mask(&mut ws.spec[5]);
        let [a, b, c] = &mut ws.vel.components;
        self.stokes.apply_m_coeffs_masked(
            &ws.spec[5],
            [a.coeffs_mut(), b.coeffs_mut(), c.coeffs_mut()],
            &mut ws.col,
            Some(&self.resolved),
        );
        let [_, _, _, _, _, u1, u2, u3] = &mut ws.phys;
        self.inverse_resolved(a.coeffs(), u1, &mut ws.scratch);
        self.inverse_resolved(b.coeffs(), u2, &mut ws.scratch);
        self.inverse_resolved(c.coeffs(), u3, &mut ws.scratch);
        let m = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        (m(u1) * dt / g.dx1()).max(m(u2) * dt / g.dx2()).max(m(u3) * dt / g.h())
    }

    /// Nonlinear term `N(S) = P advect(M(P S), Tbar + P S)` into `out`.
    /// Expects `velocity_from(s)` to have been called on `ws`.
    pub(crate) fn nonlinear_after_velocity(&self, out: &mut [Complex64], ws: &mut Workspace) {
        let g = &self.grid;
        let pl = g.plane_len();
        let [f, p1, p2, p3, _, u1, u2, u3] = &mut ws.phys;
        self.inverse_resolved(&ws.spec[5], f, &mut ws.scratch);
        for j in 0..g.planes() {
            let tb = self.tbar[j];
            f[j * pl..(j + 1) * pl].iter_mut().for_each(|v| *v += tb);
        }
        let [_, _, _, _, tmp, ps] = &mut ws.spec;
        self.advect_kernel([u1, u2, u3], f, ps, out, tmp, [p1, p2, p3], &mut ws.scratch);
    }

    /// Integrates one unit interval from `s0 = T0 - Tbar` in spectral form.
    ///
    /// The interval is split into the configured base steps. With
    /// `adaptive` set, each base step is divided into the smallest number of
    /// equal substeps that keeps the CFL number at its start below
    /// `CFL_TARGET` times the limit, and a base step that still violates the
    /// limit is redone with twice as many substeps, up to [`MAX_HALVINGS`]
    /// times. Without `adaptive` a violation aborts.
    pub fn integrate_unit_spectral(
        &self,
        s0: &[Complex64],
        forcing: &dyn Forcing,
        record: bool,
        observer: Option<&mut Observer<'_>>,
        ws: &mut Workspace,
    ) -> Result<UnitResult> {
        let base = self.cfg.steps_per_unit()?;
        let schedule = if self.cfg.adaptive { Schedule::Adaptive } else { Schedule::Fixed };
        self.run_unit(s0, forcing, record, base, schedule, observer, ws)
    }

    /// Integrates one unit interval with exactly `steps` equal substeps; a
    /// CFL violation aborts.
    pub fn integrate_unit_fixed(
        &self,
        s0: &[Complex64],
        steps: usize,
        forcing: &dyn Forcing,
        record: bool,
        observer: Option<&mut Observer<'_>>,
        ws: &mut Workspace,
    ) -> Result<UnitResult> {
        if steps == 0 {
            return Err(Error::InvalidArgument("a unit interval needs at least one substep".into()));
        }
        self.run_unit(s0, forcing, record, steps, Schedule::Fixed, observer, ws)
    }

    /// Integrates one unit interval on the substep schedule of `traj`, so
    /// that nearby inputs are mapped by the same discrete scheme. A CFL
    /// violation aborts.
    pub fn integrate_unit_replay(
        &self,
        s0: &[Complex64],
        traj: &FrozenTrajectory,
        forcing: &dyn Forcing,
        ws: &mut Workspace,
    ) -> Result<UnitResult> {
        let base = self.cfg.steps_per_unit()?;
        let mut subs = vec![0usize; base];
        for n in 0..traj.steps() {
            let b = ((traj.time(n) * base as f64) + 1e-9).floor() as usize;
            subs[b.min(base - 1)] += 1;
        }
        if subs.contains(&0) {
            return Err(Error::InvalidArgument("trajectory does not cover every base step".into()));
        }
        self.run_unit(s0, forcing, false, base, Schedule::Replay(&subs), None, ws)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_unit(
        &self,
        s0: &[Complex64],
        forcing: &dyn Forcing,
        record: bool,
        base: usize,
        schedule: Schedule<'_>,
        mut observer: Option<&mut Observer<'_>>,
        ws: &mut Workspace,
    ) -> Result<UnitResult> {
        let g = &self.grid;
        let len = g.spec_len();
        let sl = g.spec_plane_len();
        let dt_base = 1.0 / base as f64;
        let limit = self.cfg.cfl_limit;
        let mut st = UnitState {
            s: s0.to_vec(),
            prev: vec![Complex64::default(); len],
            prev_dt: None,
            n_cur: vec![Complex64::default(); len],
            rhs: vec![Complex64::default(); len],
            eta: vec![Complex64::default(); len],
            states: Vec::new(),
            times: Vec::new(),
            dts: Vec::new(),
            max_cfl: 0.0,
            energy_constant: 0.0,
            steps: 0,
            min_dt: dt_base,
        };
        st.s[..sl].fill(Complex64::default());
        st.s[g.n3() * sl..].fill(Complex64::default());
        let mut snap_s = vec![Complex64::default(); len];
        let mut snap_prev = vec![Complex64::default(); len];
        for b in 0..base {
            let t0 = b as f64 * dt_base;
            let cfl_base = self.velocity_from(&st.s, dt_base, ws);
            if !cfl_base.is_finite() {
                return Err(Error::NonFinite(t0));
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(b, t0, &st.s, &ws.vel);
            }
            let adaptive = matches!(schedule, Schedule::Adaptive);
            let mut sub = match schedule {
                Schedule::Adaptive => (cfl_base / (CFL_TARGET * limit)).ceil().max(1.0) as usize,
                Schedule::Fixed => 1,
                Schedule::Replay(subs) => subs[b],
            };
            snap_s.copy_from_slice(&st.s);
            snap_prev.copy_from_slice(&st.prev);
            let snap_prev_dt = st.prev_dt;
            let snap_len = st.states.len();
            let (snap_cfl, snap_energy, snap_steps, snap_min_dt) = (st.max_cfl, st.energy_constant, st.steps, st.min_dt);
            let mut retries = 0;
            let mut fresh = Some(cfl_base);
            loop {
                match self.advance_base_step(&mut st, t0, dt_base, sub, fresh.take(), forcing, record, ws) {
                    Ok(()) => break,
                    Err(Error::Cfl { .. }) if adaptive && retries < MAX_HALVINGS => {
                        retries += 1;
                        sub *= 2;
                        log::debug!("CFL violation at t = {t0}; redoing base step with {sub} substeps");
                        st.s.copy_from_slice(&snap_s);
                        st.prev.copy_from_slice(&snap_prev);
                        st.prev_dt = snap_prev_dt;
                        st.states.truncate(snap_len);
                        st.times.truncate(snap_len);
                        st.dts.truncate(snap_len);
                        st.max_cfl = snap_cfl;
                        st.energy_constant = snap_energy;
                        st.steps = snap_steps;
                        st.min_dt = snap_min_dt;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if st.s.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::NonFinite(1.0));
        }
        // in adaptive mode the next unit subdivides as needed
        let cfl = self.velocity_from(&st.s, st.prev_dt.unwrap_or(dt_base), ws);
        if matches!(schedule, Schedule::Fixed) && cfl >= limit {
            return Err(Error::Cfl { time: 1.0, cfl, limit });
        }
        if let Some(obs) = observer {
            obs(base, 1.0, &st.s, &ws.vel);
        }
        let trajectory = record.then(|| {
            st.states.push(st.s.clone());
            st.times.push(1.0);
            FrozenTrajectory {
                grid: g.clone(),
                boundary: self.cfg.boundary,
                times: std::mem::take(&mut st.times),
                dts: std::mem::take(&mut st.dts),
                states: std::mem::take(&mut st.states),
            }
        });
        Ok(UnitResult {
            s_end: st.s,
            steps: st.steps,
            min_dt: st.min_dt,
            max_cfl: st.max_cfl.max(cfl),
            energy_constant: st.energy_constant,
            trajectory,
        })
    }

    /// `sub` equal substeps across the base step starting at `t0`.
    /// `fresh_cfl` is the base-step CFL number when `ws` already holds the
    /// velocity of `st.s`.
    #[allow(clippy::too_many_arguments)]
    fn advance_base_step(
        &self,
        st: &mut UnitState,
        t0: f64,
        dt_base: f64,
        sub: usize,
        mut fresh_cfl: Option<f64>,
        forcing: &dyn Forcing,
        record: bool,
        ws: &mut Workspace,
    ) -> Result<()> {
        let dt = dt_base / sub as f64;
        let factors = self.cn_factors((1.0 / dt).round() as usize);
        for i in 0..sub {
            let t = t0 + i as f64 * dt;
            let cfl = match fresh_cfl.take() {
                Some(c) => c / sub as f64,
                None => self.velocity_from(&st.s, dt, ws),
            };
            if !cfl.is_finite() {
                return Err(Error::NonFinite(t));
            }
            if cfl >= self.cfg.cfl_limit {
                return Err(Error::Cfl { time: t, cfl, limit: self.cfg.cfl_limit });
            }
            st.max_cfl = st.max_cfl.max(cfl);
            if record {
                st.states.push(st.s.clone());
                st.times.push(t);
                st.dts.push(dt);
            }
            self.nonlinear_after_velocity(&mut st.n_cur, ws);
            self.explicit_diffusion(&st.s, dt, &mut st.rhs);
            match st.prev_dt {
                None => st.rhs.iter_mut().zip(&st.n_cur).for_each(|(r, a)| *r -= a * dt),
                Some(dtp) => {
                    let (c0, c1) = ab2_weights(dt, dtp);
                    st.rhs.iter_mut().zip(st.n_cur.iter().zip(&st.prev)).for_each(|(r, (a, b))| *r -= (a * c0 - b * c1) * dt)
                }
            }
            st.eta.fill(Complex64::default());
            if !forcing.is_zero() {
                forcing.add_spectral(t + 0.5 * dt, 1.0, &mut st.eta);
                st.rhs.iter_mut().zip(&st.eta).for_each(|(r, e)| *r += e * dt);
            }
            self.implicit_solve(&mut st.rhs, &factors, &mut ws.col);
            st.energy_constant = st.energy_constant.max(self.energy_ratio(&st.s, &st.rhs, &st.eta, dt));
            flush_tiny(&mut st.rhs);
            std::mem::swap(&mut st.s, &mut st.rhs);
            std::mem::swap(&mut st.prev, &mut st.n_cur);
            st.prev_dt = Some(dt);
            st.steps += 1;
            st.min_dt = st.min_dt.min(dt);
        }
        Ok(())
    }

    fn energy_ratio(&self, s0: &[Complex64], s1: &[Complex64], eta: &[Complex64], dt: f64) -> f64 {
        let g = &self.grid;
        let (sl, n) = (g.spec_plane_len(), g.n3());
        let inv2h = 0.5 / g.h();
        let mid = |j: usize| {
            let r = j * sl..(j + 1) * sl;
            s0[r.clone()].iter().zip(&s1[r]).map(|(a, b)| (a + b) * 0.5)
        };
        let (mut e0, mut e1, mut m2, mut grad2, mut eta2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..=n {
            let w = g.weight(j);
            let r = j * sl..(j + 1) * sl;
            let (mut a0, mut a1, mut am, mut ae) = (0.0, 0.0, 0.0, 0.0);
            for (s, m) in mid(j).enumerate() {
                let mult = self.mult[s];
                let kk = self.kx[s] * self.kx[s] + self.ky[s] * self.ky[s];
                a0 += mult * s0[r.start + s].norm_sqr();
                a1 += mult * s1[r.start + s].norm_sqr();
                am += mult * (1.0 + kk) * m.norm_sqr();
                ae += mult * eta[r.start + s].norm_sqr();
            }
            let mut ad = 0.0;
            if j == 0 {
                for (s, ((a, b), c)) in mid(0).zip(mid(1)).zip(mid(2)).enumerate() {
                    ad += self.mult[s] * ((b * 4.0 - a * 3.0 - c) * inv2h).norm_sqr();
                }
            } else if j == n {
                for (s, ((a, b), c)) in mid(n).zip(mid(n - 1)).zip(mid(n - 2)).enumerate() {
                    ad += self.mult[s] * ((a * 3.0 - b * 4.0 + c) * inv2h).norm_sqr();
                }
            } else {
                for (s, (a, b)) in mid(j + 1).zip(mid(j - 1)).enumerate() {
                    ad += self.mult[s] * ((a - b) * inv2h).norm_sqr();
                }
            }
            e0 += w * a0;
            e1 += w * a1;
            m2 += w * am;
            grad2 += w * ad;
            eta2 += w * ae;
        }
        // m2 above carries (1 + |k|^2)|S_mid|^2; split it into L2 and gradient parts
        let l2mid: f64 = (0..=n)
            .map(|j| g.weight(j) * mid(j).enumerate().map(|(s, m)| self.mult[s] * m.norm_sqr()).sum::<f64>())
            .sum();
        grad2 += m2 - l2mid;
        let vol = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
        let lhs = vol * ((e1 - e0) / dt + grad2);
        let rhs = vol * (l2mid + eta2);
        if lhs <= 0.0 {
            0.0
        } else if rhs > 0.0 {
            lhs / rhs
        } else {
            f64::INFINITY
        }
    }

    /// Integrates one unit interval from a physical field.
    pub fn integrate_unit_interval(
        &self,
        t0: &ScalarField,
        forcing: &dyn Forcing,
        record: bool,
    ) -> Result<(ScalarField, UnitResult)> {
        let s0 = self.perturbation_of(t0)?;
        let mut ws = self.workspace();
        let res = self.integrate_unit_spectral(&s0, forcing, record, None, &mut ws)?;
        Ok((self.temperature_from(&res.s_end), res))
    }

    /// Spectral `T - Tbar`; errors if the field's boundary data differs from
    /// the configured wall temperatures.
    pub fn perturbation_of(&self, t: &ScalarField) -> Result<Vec<Complex64>> {
        self.grid.ensure_same(t.grid())?;
        let b = t.boundary();
        if b != self.cfg.boundary {
            return Err(Error::InvalidArgument(format!(
                "field carries boundary data ({}, {}) but the stepper expects ({}, {})",
                b.bottom, b.top, self.cfg.boundary.bottom, self.cfg.boundary.top
            )));
        }
        let s = t.sub(&ScalarField::conduction(&self.grid, self.cfg.boundary));
        Ok(s.to_spectral().into_coeffs())
    }

    pub fn temperature_from(&self, s: &[Complex64]) -> ScalarField {
        let mut phys = vec![0.0; self.grid.phys_len()];
        self.grid.inverse(s, &mut phys, &mut self.grid.scratch());
        let pl = self.grid.plane_len();
        let n = self.grid.n3();
        for j in 0..self.grid.planes() {
            let plane = &mut phys[j * pl..(j + 1) * pl];
            if j == 0 || j == n {
                plane.fill(self.tbar[j]);
            } else {
                plane.iter_mut().for_each(|v| *v += self.tbar[j]);
            }
        }
        ScalarField::from_values(&self.grid, phys, self.cfg.boundary).expect("sizes agree")
    }

    /// One substep of length `dt` from `t` with forcing `eta` held fixed;
    /// the explicit term uses forward Euler since no history is available.
    pub fn step(&self, t: &ScalarField, eta: Option<&ScalarField>) -> Result<ScalarField> {
        let s = self.perturbation_of(t)?;
        let dt = self.cfg.dt;
        let mut ws = self.workspace();
        let cfl = self.velocity_from(&s, dt, &mut ws);
        if cfl >= self.cfg.cfl_limit {
            return Err(Error::Cfl { time: 0.0, cfl, limit: self.cfg.cfl_limit });
        }
        let mut nl = vec![Complex64::default(); self.grid.spec_len()];
        self.nonlinear_after_velocity(&mut nl, &mut ws);
        let mut rhs = vec![Complex64::default(); self.grid.spec_len()];
        self.explicit_diffusion(&s, dt, &mut rhs);
        rhs.iter_mut().zip(&nl).for_each(|(r, a)| *r -= a * dt);
        if let Some(e) = eta {
            self.grid.ensure_same(e.grid())?;
            let es = e.to_spectral();
            rhs.iter_mut().zip(es.coeffs()).for_each(|(r, a)| *r += a * dt);
        }
        self.implicit_solve(&mut rhs, &self.cn_factors(self.cfg.steps_per_unit()?), &mut ws.col);
        Ok(self.temperature_from(&rhs))
    }

    /// `advect(u, T)` for physical inputs, with 2/3 dealiasing; the vertical
    /// gradient of `T` uses its wall values.
    pub fn advect(&self, u: &VectorField, t: &ScalarField) -> Result<ScalarField> {
        self.grid.ensure_same(t.grid())?;
        self.grid.ensure_same(u.grid())?;
        let mut ws = self.workspace();
        let mut f_spec = t.to_spectral().into_coeffs();
        self.mask(&mut f_spec);
        let mut out = vec![Complex64::default(); self.grid.spec_len()];
        let [p1, p2, p3, ..] = &mut ws.phys;
        let [tmp, ..] = &mut ws.spec;
        self.advect_kernel(
            [u.components[0].values(), u.components[1].values(), u.components[2].values()],
            t.values(),
            &f_spec,
            &mut out,
            tmp,
            [p1, p2, p3],
            &mut ws.scratch,
        );
        Ok(SpectralField::from_coeffs(&self.grid, out, Dirichlet::ZERO)?.to_physical())
    }

    /// Energy diagnostics at every node of a trajectory.
    pub fn energy_monitor(&self, traj: &FrozenTrajectory) -> Vec<EnergySample> {
        (0..traj.len())
            .map(|n| energy_sample(&self.grid, traj.time(n), traj.perturbation(n), self.cfg.boundary))
            .collect()
    }
}

/// Magnitude below which spectral coefficients are set to zero after each
/// substep. Decaying modes otherwise drift into subnormal range, where
/// floating-point arithmetic is orders of magnitude slower.
pub const FLUSH_THRESHOLD: f64 = 1e-150;

pub(crate) fn flush_tiny(c: &mut [Complex64]) {
    for v in c.iter_mut() {
        if v.re.abs() < FLUSH_THRESHOLD {
            v.re = 0.0;
        }
        if v.im.abs() < FLUSH_THRESHOLD {
            v.im = 0.0;
        }
    }
}

/// Energy diagnostics for one state `S`.
pub fn energy_sample(grid: &Arc<Grid>, t: f64, s: &[Complex64], boundary: Dirichlet) -> EnergySample {
    let sf = SpectralField::from_coeffs(grid, s.to_vec(), Dirichlet::ZERO).expect("sizes agree");
    let s_l2 = sf.norm();
    let h1 = sobolev_norm_spectral(&sf, 1);
    let grad = (h1 * h1 - s_l2 * s_l2).max(0.0).sqrt();
    let full = sf.to_physical().add(&ScalarField::conduction(grid, boundary));
    let full_spec = full.to_spectral();
    EnergySample {
        t,
        s_l2,
        grad_s_l2: grad,
        t_h1: sobolev_norm_spectral(&full_spec, 1),
        h3_diagnostic: crate::field::h3_diagnostic(&full_spec),
    }
}

/// Squared `L^2` norm of spectral coefficients (trapezoid in `x3`).
pub fn spectral_l2_sq(grid: &Grid, c: &[Complex64]) -> f64 {
    let sl = grid.spec_plane_len();
    let vol = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    let terms: Vec<f64> = (0..grid.planes())
        .map(|j| {
            let plane = &c[j * sl..(j + 1) * sl];
            let vals: Vec<f64> =
                plane.iter().enumerate().map(|(s, v)| grid.multiplicity(s / grid.n2()) * v.norm_sqr()).collect();
            grid.weight(j) * pairwise_sum(&vals)
        })
        .collect();
    vol * pairwise_sum(&terms)
}

/// `L^2` inner product of two real fields given by spectral coefficients.
pub fn spectral_inner(grid: &Grid, a: &[Complex64], b: &[Complex64]) -> f64 {
    let sl = grid.spec_plane_len();
    let vol = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    let terms: Vec<f64> = (0..grid.planes())
        .map(|j| {
            let vals: Vec<f64> = (0..sl)
                .map(|s| {
                    let (x, y) = (a[j * sl + s], b[j * sl + s]);
                    grid.multiplicity(s / grid.n2()) * (x.re * y.re + x.im * y.im)
                })
                .collect();
            grid.weight(j) * pairwise_sum(&vals)
        })
        .collect();
    vol * pairwise_sum(&terms)
}

/// `H^1` norm of a field given by spectral coefficients.
pub fn spectral_h1(grid: &Arc<Grid>, c: &[Complex64]) -> f64 {
    let f = SpectralField::from_coeffs(grid, c.to_vec(), Dirichlet::ZERO).expect("sizes agree");
    sobolev_norm_spectral(&f, 1)
}
