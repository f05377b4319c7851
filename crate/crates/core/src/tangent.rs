//! Linearisation of the unit-interval map along a frozen trajectory and its
//! adjoint.
//!
//! The tangent solver differentiates the discrete stepper exactly: the same
//! Crank-Nicolson / variable-step Adams-Bashforth recursion, with the
//! explicit term replaced by `A_n theta = N'(S^n) theta`. The dual solver is
//! the transpose of that recursion in the discrete `L^2` inner product, run
//! backward from `psi(1) = psi_1`; it carries a node value `psi^n` and a
//! substep value `lambda^n` (the dual seen by the forcing of substep `n`).
//! With these,
//!
//! `<theta(1), psi_1> = sum_n dt_n <zeta(t_n + dt_n / 2), lambda^n>`
//!
//! holds up to round-off.

use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{vertical_derivative_columns, Dirichlet, ScalarField, SpectralField};
use crate::grid::{Grid, PlaneScratch};
use crate::noise::{horizontal_modes, BasisForcing, HorizontalMode, NoiseBasis};
use crate::stokes::SpectralVelocity;
use crate::thermal::{ab2_weights, spectral_inner, spectral_l2_sq, Forcing, FrozenTrajectory, ThermalStepper, Workspace};

/// Coefficients of `A_n` that depend only on the trajectory state.
struct NodeCoefficients {
    /// `U = M(P S)`, physical.
    u: [Vec<f64>; 3],
    /// `F = Tbar + P S`, physical.
    f: Vec<f64>,
    /// `(d1 P S, d2 P S, D1 F)`, physical.
    grad: [Vec<f64>; 3],
}

struct LinearScratch {
    plane: PlaneScratch,
    col: Vec<Complex64>,
    spec: [Vec<Complex64>; 4],
    phys: [Vec<f64>; 8],
    vel: SpectralVelocity,
}

/// Tangent and dual solves along one frozen unit interval.
pub struct LinearizedSolver<'a> {
    stepper: &'a ThermalStepper,
    traj: &'a FrozenTrajectory,
}

/// Tangent solution `theta` (zero wall values), spectral.
#[derive(Clone, Debug)]
pub struct TangentSolution {
    pub end: Vec<Complex64>,
    /// `theta` at every node when recorded.
    pub path: Option<Vec<Vec<Complex64>>>,
}

/// Dual solution, spectral.
#[derive(Clone, Debug)]
pub struct DualSolution {
    /// `psi^n` at the nodes, `n = 0..=N`.
    pub nodes: Vec<Vec<Complex64>>,
    /// `lambda^n` for the substeps, `n = 0..N`.
    pub substeps: Vec<Vec<Complex64>>,
}

impl DualSolution {
    pub fn start(&self) -> &[Complex64] {
        &self.nodes[0]
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct DualityReport {
    /// `<theta(1), psi_1>`.
    pub pairing: f64,
    /// `sum_n dt_n <zeta^{n+1/2}, lambda^n>`.
    pub forcing_integral: f64,
    /// `|pairing - forcing_integral| / (|theta(1)| |psi_1|)`.
    pub residual: f64,
}

/// Singular values of the control-to-state map against a target family.
#[derive(Clone, Debug, serde::Serialize)]
pub struct GramReport {
    pub controls: usize,
    pub targets: usize,
    /// Non-increasing.
    pub singular_values: Vec<f64>,
}

impl GramReport {
    pub fn smallest(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }
}

impl<'a> LinearizedSolver<'a> {
    pub fn new(stepper: &'a ThermalStepper, traj: &'a FrozenTrajectory) -> Result<Self> {
        stepper.grid().ensure_same(traj.grid())?;
        if traj.boundary() != stepper.config().boundary {
            return Err(Error::InvalidArgument("trajectory boundary data differs from the stepper's".into()));
        }
        if traj.len() < 2 {
            return Err(Error::InvalidArgument("trajectory has no substeps".into()));
        }
        Ok(LinearizedSolver { stepper, traj })
    }

    fn grid(&self) -> &Arc<Grid> {
        self.stepper.grid()
    }

    fn scratch(&self) -> LinearScratch {
        let g = self.grid();
        LinearScratch {
            plane: g.scratch(),
            col: Vec::with_capacity(g.planes()),
            spec: std::array::from_fn(|_| vec![Complex64::default(); g.spec_len()]),
            phys: std::array::from_fn(|_| vec![0.0; g.phys_len()]),
            vel: SpectralVelocity::zeros(g),
        }
    }

    fn node_coefficients(&self, n: usize, ws: &mut Workspace) -> NodeCoefficients {
        let st = self.stepper;
        let g = self.grid();
        let (pl, planes) = (g.plane_len(), g.planes());
        st.velocity_from(self.traj.perturbation(n), 1.0, ws);
        let u = [ws.phys[5].clone(), ws.phys[6].clone(), ws.phys[7].clone()];
        let mut f = vec![0.0; g.phys_len()];
        st.inverse_resolved(&ws.spec[5], &mut f, &mut ws.scratch);
        for (j, tb) in st.conduction_profile().iter().enumerate() {
            f[j * pl..(j + 1) * pl].iter_mut().for_each(|v| *v += tb);
        }
        let mut grad: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; g.phys_len()]);
        for axis in 0..2 {
            let [d, _, _, _, _, ps] = &mut ws.spec;
            st.derivative_into(ps, axis, d);
            st.inverse_resolved(d, &mut grad[axis], &mut ws.scratch);
        }
        vertical_derivative_columns(&f, &mut grad[2], planes, pl, g.h());
        NodeCoefficients { u, f, grad }
    }

    /// `A theta = P [adv(M(P theta), F) + adv(U, P theta)]` with the skew
    /// advection form used by the stepper.
    fn apply_a(&self, nc: &NodeCoefficients, theta: &[Complex64], out: &mut [Complex64], sc: &mut LinearScratch) {
        let st = self.stepper;
        let g = self.grid();
        let (pl, planes, h) = (g.plane_len(), g.planes(), g.h());
        let [pt, tmp, acc, _] = &mut sc.spec;
        pt.copy_from_slice(theta);
        st.mask(pt);
        let [v1, v2, v3] = &mut sc.vel.components;
        st.stokes().apply_m_coeffs_masked(pt, [v1.coeffs_mut(), v2.coeffs_mut(), v3.coeffs_mut()], &mut sc.col, Some(st.resolved()));
        let [w1, w2, w3, tp, x1, x2, p, q] = &mut sc.phys;
        st.inverse_resolved(v1.coeffs(), w1, &mut sc.plane);
        st.inverse_resolved(v2.coeffs(), w2, &mut sc.plane);
        st.inverse_resolved(v3.coeffs(), w3, &mut sc.plane);
        st.inverse_resolved(pt, tp, &mut sc.plane);
        st.derivative_into(pt, 0, tmp);
        st.inverse_resolved(tmp, x1, &mut sc.plane);
        st.derivative_into(pt, 1, tmp);
        st.inverse_resolved(tmp, x2, &mut sc.plane);
        vertical_derivative_columns(tp, q, planes, pl, h);
        let [u1, u2, u3] = &nc.u;
        let [g1, g2, g3] = &nc.grad;
        for i in 0..p.len() {
            p[i] = w1[i] * g1[i] + w2[i] * g2[i] + w3[i] * g3[i] + u1[i] * x1[i] + u2[i] * x2[i] + u3[i] * q[i];
        }
        st.forward_resolved(p, acc, &mut sc.plane);
        for (axis, w, u) in [(0usize, &*w1, u1), (1, &*w2, u2)] {
            for i in 0..p.len() {
                p[i] = w[i] * nc.f[i] + u[i] * tp[i];
            }
            st.forward_resolved(p, tmp, &mut sc.plane);
            st.add_derivative(tmp, axis, acc);
        }
        for i in 0..p.len() {
            p[i] = w3[i] * nc.f[i] + u3[i] * tp[i];
        }
        vertical_derivative_columns(p, q, planes, pl, h);
        st.forward_resolved(q, tmp, &mut sc.plane);
        for ((o, a), t) in out.iter_mut().zip(acc.iter()).zip(tmp.iter()) {
            *o = (a + t) * 0.5;
        }
        st.mask(out);
    }

    /// Transpose of [`LinearizedSolver::apply_a`] in the discrete `L^2`
    /// inner product; wall values of the result are zeroed.
    fn apply_a_transpose(&self, nc: &NodeCoefficients, psi: &[Complex64], out: &mut [Complex64], sc: &mut LinearScratch) {
        let st = self.stepper;
        let g = self.grid();
        let planes = g.planes();
        let [pp, tmp, acc, m3] = &mut sc.spec;
        pp.copy_from_slice(psi);
        st.mask(pp);
        let [pbar, qb1, qb2, qb3, tb, r1, r2, r3] = &mut sc.phys;
        // adjoints of the products p, q1, q2, q3
        st.inverse_resolved(pp, pbar, &mut sc.plane);
        pbar.iter_mut().for_each(|v| *v *= 0.5);
        for (axis, qb) in [(0usize, &mut *qb1), (1, &mut *qb2)] {
            st.derivative_into(pp, axis, tmp);
            st.inverse_resolved(tmp, qb, &mut sc.plane);
            qb.iter_mut().for_each(|v| *v *= -0.5);
        }
        vertical_derivative_transpose(g, pbar, qb3);
        let [u1, u2, u3] = &nc.u;
        let [g1, g2, g3] = &nc.grad;
        // theta_phys adjoint
        for i in 0..pbar.len() {
            r1[i] = u3[i] * pbar[i];
        }
        vertical_derivative_transpose(g, r1, tb);
        for i in 0..pbar.len() {
            tb[i] += u1[i] * qb1[i] + u2[i] * qb2[i] + u3[i] * qb3[i];
        }
        st.forward_resolved(tb, acc, &mut sc.plane);
        // adjoint through the horizontal derivatives of P theta
        for (axis, u) in [(0usize, u1), (1, u2)] {
            for i in 0..pbar.len() {
                r1[i] = u[i] * pbar[i];
            }
            st.forward_resolved(r1, tmp, &mut sc.plane);
            st.mask(tmp);
            st.derivative_into(tmp, axis, m3);
            acc.iter_mut().zip(m3.iter()).for_each(|(a, t)| *a -= t);
        }
        // adjoint through the velocity M(P theta)
        for i in 0..pbar.len() {
            let f = nc.f[i];
            r1[i] = g1[i] * pbar[i] + f * qb1[i];
            r2[i] = g2[i] * pbar[i] + f * qb2[i];
            r3[i] = g3[i] * pbar[i] + f * qb3[i];
        }
        let [v1, v2, v3] = &mut sc.vel.components;
        for (r, v) in [(&*r1, &mut *v1), (&*r2, &mut *v2), (&*r3, &mut *v3)] {
            st.forward_resolved(r, v.coeffs_mut(), &mut sc.plane);
            st.mask(v.coeffs_mut());
        }
        st.stokes().apply_m_star_coeffs([v1.coeffs(), v2.coeffs(), v3.coeffs()], m3, &mut sc.col);
        for ((o, a), m) in out.iter_mut().zip(acc.iter()).zip(m3.iter()) {
            *o = a + m;
        }
        st.mask(out);
        let sl = g.spec_plane_len();
        out[..sl].fill(Complex64::default());
        out[(planes - 1) * sl..].fill(Complex64::default());
    }

    /// Exposes `A_n theta` for node `n` (used by tests).
    pub fn linear_operator(&self, n: usize, theta: &[Complex64]) -> Vec<Complex64> {
        let mut ws = self.stepper.workspace();
        let nc = self.node_coefficients(n, &mut ws);
        let mut out = vec![Complex64::default(); self.grid().spec_len()];
        self.apply_a(&nc, theta, &mut out, &mut self.scratch());
        out
    }

    /// Exposes the transpose of `A_n` (used by tests).
    pub fn linear_operator_transpose(&self, n: usize, psi: &[Complex64]) -> Vec<Complex64> {
        let mut ws = self.stepper.workspace();
        let nc = self.node_coefficients(n, &mut ws);
        let mut out = vec![Complex64::default(); self.grid().spec_len()];
        self.apply_a_transpose(&nc, psi, &mut out, &mut self.scratch());
        out
    }

    fn ab2_coefficients(&self, n: usize) -> (f64, f64) {
        if n == 0 {
            (1.0, 0.0)
        } else {
            ab2_weights(self.traj.step_size(n), self.traj.step_size(n - 1))
        }
    }

    /// Tangent `theta` driven by `zeta` from `theta(0) = 0`.
    pub fn solve_tangent(&self, zeta: &dyn Forcing, record: bool) -> Result<TangentSolution> {
        let mut out = self.tangent_batch(&[zeta], record)?;
        Ok(out.pop().expect("one control"))
    }

    /// Tangent endpoints for several controls, sharing the per-node work.
    /// Controls are processed in parallel; results are in input order.
    pub fn solve_tangent_many(&self, zetas: &[&dyn Forcing]) -> Result<Vec<Vec<Complex64>>> {
        Ok(self.tangent_batch(zetas, false)?.into_iter().map(|s| s.end).collect())
    }

    fn tangent_batch(&self, zetas: &[&dyn Forcing], record: bool) -> Result<Vec<TangentSolution>> {
        struct Lane {
            theta: Vec<Complex64>,
            a_prev: Vec<Complex64>,
            a_cur: Vec<Complex64>,
            rhs: Vec<Complex64>,
            path: Option<Vec<Vec<Complex64>>>,
        }
        let g = self.grid();
        let len = g.spec_len();
        let st = self.stepper;
        let mut ws = st.workspace();
        let mut lanes: Vec<Lane> = zetas
            .iter()
            .map(|_| Lane {
                theta: vec![Complex64::default(); len],
                a_prev: vec![Complex64::default(); len],
                a_cur: vec![Complex64::default(); len],
                rhs: vec![Complex64::default(); len],
                path: record.then(Vec::new),
            })
            .collect();
        for n in 0..self.traj.steps() {
            let dt = self.traj.step_size(n);
            let t_mid = self.traj.time(n) + 0.5 * dt;
            let (c0, c1) = self.ab2_coefficients(n);
            let factors = st.cn_factors((1.0 / dt).round() as usize);
            let nc = self.node_coefficients(n, &mut ws);
            lanes.par_iter_mut().zip(zetas.par_iter()).for_each_init(
                || self.scratch(),
                |sc, (lane, zeta)| {
                    if let Some(p) = lane.path.as_mut() {
                        p.push(lane.theta.clone());
                    }
                    self.apply_a(&nc, &lane.theta, &mut lane.a_cur, sc);
                    st.explicit_diffusion(&lane.theta, dt, &mut lane.rhs);
                    for ((r, a), b) in lane.rhs.iter_mut().zip(&lane.a_cur).zip(&lane.a_prev) {
                        *r -= (a * c0 - b * c1) * dt;
                    }
                    if !zeta.is_zero() {
                        let z = &mut sc.spec[3];
                        z.fill(Complex64::default());
                        zeta.add_spectral(t_mid, 1.0, z);
                        lane.rhs.iter_mut().zip(z.iter()).for_each(|(r, e)| *r += e * dt);
                    }
                    st.implicit_solve(&mut lane.rhs, &factors, &mut sc.col);
                    std::mem::swap(&mut lane.theta, &mut lane.rhs);
                    std::mem::swap(&mut lane.a_prev, &mut lane.a_cur);
                },
            );
        }
        Ok(lanes
            .into_iter()
            .map(|mut l| {
                if let Some(p) = l.path.as_mut() {
                    p.push(l.theta.clone());
                }
                TangentSolution { end: l.theta, path: l.path }
            })
            .collect())
    }

    /// Dual solution from `psi(1) = psi_1` (wall values are ignored).
    pub fn solve_dual(&self, psi1: &[Complex64]) -> Result<DualSolution> {
        let steps = self.traj.steps();
        let mut nodes = vec![Vec::new(); steps + 1];
        let mut substeps = vec![Vec::new(); steps];
        self.dual_sweep(psi1, |n, mu| nodes[n] = mu.to_vec(), |n, lambda| substeps[n] = lambda.to_vec())?;
        Ok(DualSolution { nodes, substeps })
    }

    /// Runs the dual recursion backward without storing it: `node(n, psi^n)`
    /// for `n = N..=0` and `substep(n, lambda^n)` for `n = N-1..=0`.
    pub fn dual_sweep(
        &self,
        psi1: &[Complex64],
        node: impl FnMut(usize, &[Complex64]) + Send,
        substep: impl FnMut(usize, &[Complex64]) + Send,
    ) -> Result<()> {
        let calls = Mutex::new((node, substep));
        self.dual_batch(
            std::slice::from_ref(&psi1),
            |_| (),
            |_, n, mu| (calls.lock().expect("single lane").0)(n, mu),
            |_, n, lambda| (calls.lock().expect("single lane").1)(n, lambda),
        )?;
        Ok(())
    }

    /// Several dual sweeps sharing the per-node work. Each lane owns a state
    /// built by `init(lane)` and sees the same callbacks as
    /// [`Self::dual_sweep`]; lanes run in parallel and the states come back
    /// in input order.
    pub fn dual_batch<T: Send>(
        &self,
        psi1s: &[&[Complex64]],
        init: impl Fn(usize) -> T,
        node: impl Fn(&mut T, usize, &[Complex64]) + Sync,
        substep: impl Fn(&mut T, usize, &[Complex64]) + Sync,
    ) -> Result<Vec<T>> {
        struct Lane<T> {
            mu: Vec<Complex64>,
            lambda: Vec<Complex64>,
            lambda_next: Option<Vec<Complex64>>,
            y: Vec<Complex64>,
            at: Vec<Complex64>,
            state: T,
        }
        let g = self.grid();
        let len = g.spec_len();
        for psi1 in psi1s {
            if psi1.len() != len {
                return Err(Error::SizeMismatch { expected: len, got: psi1.len() });
            }
        }
        let st = self.stepper;
        let sl = g.spec_plane_len();
        let steps = self.traj.steps();
        let mut ws = st.workspace();
        let mut lanes: Vec<Lane<T>> = psi1s
            .iter()
            .enumerate()
            .map(|(i, psi1)| {
                let mut mu = psi1.to_vec();
                mu[..sl].fill(Complex64::default());
                mu[g.n3() * sl..].fill(Complex64::default());
                let mut state = init(i);
                node(&mut state, steps, &mu);
                Lane {
                    mu,
                    lambda: vec![Complex64::default(); len],
                    lambda_next: None,
                    y: vec![Complex64::default(); len],
                    at: vec![Complex64::default(); len],
                    state,
                }
            })
            .collect();
        for n in (0..steps).rev() {
            let dt = self.traj.step_size(n);
            let factors = st.cn_factors((1.0 / dt).round() as usize);
            let (c0, _) = self.ab2_coefficients(n);
            let next = (n + 1 < steps).then(|| (self.traj.step_size(n + 1), self.ab2_coefficients(n + 1).1));
            let nc = self.node_coefficients(n, &mut ws);
            lanes.par_iter_mut().for_each_init(
                || self.scratch(),
                |sc, lane| {
                    lane.lambda.copy_from_slice(&lane.mu);
                    st.implicit_solve(&mut lane.lambda, &factors, &mut sc.col);
                    for (yi, l) in lane.y.iter_mut().zip(&lane.lambda) {
                        *yi = l * (dt * c0);
                    }
                    if let (Some(ln), Some((dt_next, c1))) = (&lane.lambda_next, next) {
                        for (yi, l) in lane.y.iter_mut().zip(ln) {
                            *yi -= l * (dt_next * c1);
                        }
                    }
                    self.apply_a_transpose(&nc, &lane.y, &mut lane.at, sc);
                    st.explicit_diffusion(&lane.lambda, dt, &mut lane.mu);
                    for (m, a) in lane.mu.iter_mut().zip(&lane.at) {
                        *m -= a;
                    }
                    node(&mut lane.state, n, &lane.mu);
                    substep(&mut lane.state, n, &lane.lambda);
                    match &mut lane.lambda_next {
                        Some(ln) => ln.copy_from_slice(&lane.lambda),
                        None => lane.lambda_next = Some(lane.lambda.clone()),
                    }
                },
            );
        }
        Ok(lanes.into_iter().map(|l| l.state).collect())
    }

    /// Compares `<theta(1), psi_1>` with the forcing integral of the dual.
    pub fn duality_check(&self, zeta: &dyn Forcing, psi1: &[Complex64]) -> Result<DualityReport> {
        let theta = self.solve_tangent(zeta, false)?.end;
        self.duality_with_tangent(zeta, &theta, psi1)
    }

    /// [`Self::duality_check`] with `theta(1)` for `zeta` already computed
    /// (for example by [`Self::solve_tangent_many`]).
    pub fn duality_with_tangent(&self, zeta: &dyn Forcing, theta: &[Complex64], psi1: &[Complex64]) -> Result<DualityReport> {
        Ok(self.duality_many(&[zeta], &[theta], &[psi1])?.pop().expect("one pair"))
    }

    /// Duality reports for several `(zeta, theta(1), psi_1)` triples, with
    /// the dual sweeps batched.
    pub fn duality_many(&self, zetas: &[&dyn Forcing], thetas: &[&[Complex64]], psis: &[&[Complex64]]) -> Result<Vec<DualityReport>> {
        struct Acc {
            lane: usize,
            terms: Vec<f64>,
            psi_end: Vec<Complex64>,
            z: Vec<Complex64>,
        }
        if zetas.len() != psis.len() || thetas.len() != psis.len() {
            return Err(Error::InvalidArgument("duality needs one control and one tangent per dual".into()));
        }
        let g = self.grid();
        let steps = self.traj.steps();
        let accs = self.dual_batch(
            psis,
            |lane| Acc { lane, terms: vec![0.0; steps], psi_end: Vec::new(), z: vec![Complex64::default(); g.spec_len()] },
            |acc, n, mu| {
                if n == steps {
                    acc.psi_end = mu.to_vec();
                }
            },
            |acc, n, lambda| {
                let dt = self.traj.step_size(n);
                acc.z.fill(Complex64::default());
                zetas[acc.lane].add_spectral(self.traj.time(n) + 0.5 * dt, 1.0, &mut acc.z);
                acc.terms[n] = dt * spectral_inner(g, &acc.z, lambda);
            },
        )?;
        Ok(accs
            .into_iter()
            .map(|acc| {
                let theta = thetas[acc.lane];
                let pairing = spectral_inner(g, theta, &acc.psi_end);
                let forcing_integral = crate::field::pairwise_sum(&acc.terms);
                let scale = (spectral_l2_sq(g, theta) * spectral_l2_sq(g, &acc.psi_end)).sqrt();
                let diff = (pairing - forcing_integral).abs();
                let residual = if scale > 0.0 { diff / scale } else { diff };
                DualityReport { pairing, forcing_integral, residual }
            })
            .collect())
    }

    /// Singular values of the `d x m` matrix `<theta(1; phi_j), e_i>` for the
    /// first `m` basis controls and the first `d` targets of
    /// [`target_family`].
    pub fn density_diagnostic(&self, basis: &NoiseBasis, m: usize, d: usize, max_vertical: usize) -> Result<GramReport> {
        if m < d {
            return Err(Error::InvalidArgument(format!("density diagnostic needs m >= d (m = {m}, d = {d})")));
        }
        if m > basis.len() {
            return Err(Error::InvalidArgument(format!("m = {m} exceeds the basis size {}", basis.len())));
        }
        let controls: Vec<BasisForcing> = (0..m)
            .map(|j| {
                let mut c = vec![0.0; basis.len()];
                c[j] = 1.0;
                BasisForcing::new(basis, &c)
            })
            .collect();
        let refs: Vec<&dyn Forcing> = controls.iter().map(|c| c as &dyn Forcing).collect();
        let ends = self.solve_tangent_many(&refs)?;
        let targets = target_family(self.grid(), d, max_vertical)?;
        let mat = DMatrix::from_fn(d, m, |i, j| targets[i].project(self.grid(), &ends[j]));
        Ok(GramReport { controls: m, targets: d, singular_values: singular_values(&mat) })
    }

    /// The matrix of [`LinearizedSolver::density_diagnostic`] built from `d`
    /// dual solves instead of `m` tangent solves: entry `(i, j)` is
    /// `sum_n dt_n <phi_j(t_n + dt_n / 2), lambda_i^n>` for the dual with
    /// `psi_1 = e_i`.
    pub fn density_diagnostic_adjoint(&self, basis: &NoiseBasis, m: usize, d: usize, max_vertical: usize) -> Result<GramReport> {
        if m < d {
            return Err(Error::InvalidArgument(format!("density diagnostic needs m >= d (m = {m}, d = {d})")));
        }
        if m > basis.len() {
            return Err(Error::InvalidArgument(format!("m = {m} exceeds the basis size {}", basis.len())));
        }
        let g = self.grid();
        let controls: Vec<BasisForcing> = (0..m)
            .map(|j| {
                let mut c = vec![0.0; basis.len()];
                c[j] = 1.0;
                BasisForcing::new(basis, &c)
            })
            .collect();
        let targets = target_family(g, d, max_vertical)?;
        let rhs: Vec<Vec<Complex64>> = targets
            .iter()
            .map(|t| {
                let mut e = vec![Complex64::default(); g.spec_len()];
                t.fill(g, &mut e);
                e
            })
            .collect();
        let refs: Vec<&[Complex64]> = rhs.iter().map(|e| e.as_slice()).collect();
        let steps = self.traj.steps();
        let rows = self.dual_batch(
            &refs,
            |_| vec![vec![0.0; steps]; m],
            |_, _, _| {},
            |terms, n, lambda| {
                let dt = self.traj.step_size(n);
                let tm = self.traj.time(n) + 0.5 * dt;
                for (j, c) in controls.iter().enumerate() {
                    terms[j][n] = dt * c.pair_spectral(tm, lambda);
                }
            },
        )?;
        let mat = DMatrix::from_fn(d, m, |i, j| crate::field::pairwise_sum(&rows[i][j]));
        Ok(GramReport { controls: m, targets: d, singular_values: singular_values(&mat) })
    }
}

/// Singular values of a dense matrix in non-increasing order.
pub fn singular_values(mat: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = mat.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Transpose of the vertical first-derivative stencil in the trapezoidal
/// inner product.
fn vertical_derivative_transpose(g: &Grid, src: &[f64], dst: &mut [f64]) {
    let (pl, n, h) = (g.plane_len(), g.n3(), g.h());
    let c = 0.5 / h;
    dst.fill(0.0);
    let w = |j: usize| g.weight(j);
    // row j of D1 contributes w_j D1[j][i] src_j to dst_i
    let mut add = |i: usize, j: usize, coef: f64| {
        let f = w(j) * coef / w(i);
        let (a, b) = (i * pl, j * pl);
        for p in 0..pl {
            dst[a + p] += f * src[b + p];
        }
    };
    add(0, 0, -3.0 * c);
    add(1, 0, 4.0 * c);
    add(2, 0, -c);
    for j in 1..n {
        add(j + 1, j, c);
        add(j - 1, j, -c);
    }
    add(n, n, 3.0 * c);
    add(n - 1, n, -4.0 * c);
    add(n - 2, n, c);
}

/// One target `sigma(x1, x2) sin(n pi x3)`, normalised in `L^2`.
#[derive(Clone, Copy, Debug)]
pub struct Target {
    pub mode: HorizontalMode,
    pub vertical: usize,
}

impl Target {
    fn norm(&self, g: &Grid) -> f64 {
        let s: f64 = (0..g.planes()).map(|j| g.weight(j) * (std::f64::consts::PI * self.vertical as f64 * g.x3(j)).sin().powi(2)).sum();
        (self.mode.norm_sq() * s).sqrt()
    }

    /// `<f, e>` for a spectral field `f`.
    pub fn project(&self, g: &Arc<Grid>, f: &[Complex64]) -> f64 {
        let mut e = vec![Complex64::default(); g.spec_len()];
        self.fill(g, &mut e);
        spectral_inner(g, f, &e)
    }

    /// Spectral coefficients of the normalised target.
    pub fn fill(&self, g: &Grid, out: &mut [Complex64]) {
        let sl = g.spec_plane_len();
        let norm = self.norm(g);
        out.fill(Complex64::default());
        for j in 0..g.planes() {
            let v = (std::f64::consts::PI * self.vertical as f64 * g.x3(j)).sin() / norm;
            self.mode.deposit(g, v, &mut out[j * sl..(j + 1) * sl]);
        }
    }

    pub fn field(&self, g: &Arc<Grid>) -> ScalarField {
        let mut c = vec![Complex64::default(); g.spec_len()];
        self.fill(g, &mut c);
        SpectralField::from_coeffs(g, c, Dirichlet::ZERO).expect("sizes agree").to_physical()
    }
}

/// Lowest Fourier-Dirichlet products `sigma_q(x1, x2) sin(n pi x3)` with
/// `1 <= n <= max_vertical`, ordered by `|q|`, then `n`, then the horizontal
/// order of [`horizontal_modes`].
pub fn target_family(g: &Grid, d: usize, max_vertical: usize) -> Result<Vec<Target>> {
    if max_vertical == 0 || max_vertical >= g.n3() {
        return Err(Error::InvalidArgument(format!("max_vertical = {max_vertical} must lie in 1..{}", g.n3())));
    }
    let per_mode = max_vertical;
    let n_modes = d.div_ceil(per_mode) + 8;
    let modes = horizontal_modes(n_modes);
    let mut all: Vec<(i64, usize, usize, Target)> = Vec::new();
    for (order, mode) in modes.into_iter().enumerate() {
        let q2 = mode.q1 * mode.q1 + mode.q2 * mode.q2;
        for n in 1..=max_vertical {
            all.push((q2, n, order, Target { mode, vertical: n }));
        }
    }
    all.sort_by_key(|a| (a.0, a.1, a.2));
    let out: Vec<Target> = all.into_iter().take(d).map(|a| a.3).collect();
    for t in &out {
        match g.slot(t.mode.q1, t.mode.q2) {
            Some((i1, i2, _)) if g.is_resolved(i1, i2) => {}
            _ => return Err(Error::InvalidArgument("target wavevector is not resolved on the grid".into())),
        }
    }
    Ok(out)
}
