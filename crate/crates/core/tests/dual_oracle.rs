//! Dense oracles for the linearised solver on an 8x8x9 grid.
//!
//! The control-to-state map `L: zeta -> theta(1)` is assembled column by
//! column over plane-localised steady forcings; its columns are checked
//! against central differences of the nonlinear stepper, and the dual is
//! checked against `L^T` row by row. `A_n` is assembled densely and its
//! weighted transpose compared with the transpose routine.

use std::sync::Arc;

use benard_mix::field::random_smooth;
use benard_mix::noise::{horizontal_modes, HorizontalMode};
use benard_mix::tangent::LinearizedSolver;
use benard_mix::thermal::{spectral_inner, FrozenTrajectory, NoForcing, SteadyForcing, StepperConfig, ThermalStepper};
use benard_mix::{Dirichlet, Grid, ScalarField, SpectralField};
use num_complex::Complex64;

fn stepper() -> ThermalStepper {
    let g = Grid::new(8, 8, 8, 0.25).unwrap();
    ThermalStepper::new(&g, StepperConfig { ra: 1e3, dt: 1.0 / 32.0, adaptive: false, ..Default::default() }).unwrap()
}

fn start(st: &ThermalStepper) -> ScalarField {
    let g = st.grid();
    let b = st.config().boundary;
    let mut t = ScalarField::conduction(g, b).add(&random_smooth(g, 4, 2, 2).scale(0.2));
    t.set_boundary(b);
    t
}

/// Resolved horizontal modes of the grid.
fn modes(g: &Grid) -> Vec<HorizontalMode> {
    horizontal_modes(64)
        .into_iter()
        .filter(|m| matches!(g.slot(m.q1, m.q2), Some((i1, i2, _)) if g.is_resolved(i1, i2)))
        .collect()
}

/// `sigma(x1, x2)` on plane `j`, zero elsewhere.
fn plane_mode(g: &Arc<Grid>, m: &HorizontalMode, j: usize) -> SpectralField {
    let x3 = g.x3(j);
    ScalarField::from_fn(g, |x1, x2, z| if (z - x3).abs() < 1e-12 { m.eval(x1, x2) } else { 0.0 }).to_spectral()
}

fn columns(g: &Arc<Grid>) -> Vec<SpectralField> {
    let ms = modes(g);
    (1..g.n3()).flat_map(|j| ms.iter().map(move |m| plane_mode(g, m, j))).collect()
}

fn trajectory(st: &ThermalStepper) -> FrozenTrajectory {
    st.integrate_unit_interval(&start(st), &NoForcing, true).unwrap().1.trajectory.unwrap()
}

#[test]
fn tangent_columns_match_central_differences() {
    let st = stepper();
    let g = st.grid().clone();
    let traj = trajectory(&st);
    let lin = LinearizedSolver::new(&st, &traj).unwrap();
    let t0 = start(&st);
    let cols = columns(&g);
    // a spread of columns: low and high modes, bottom and middle planes
    for k in [0, 1, 5, cols.len() / 2, cols.len() - 1] {
        let theta = lin.solve_tangent(&SteadyForcing(cols[k].clone()), false).unwrap().end;
        let eps = 1e-4;
        let run = |s: f64| {
            let mut f = cols[k].clone();
            f.coeffs_mut().iter_mut().for_each(|c| *c *= s);
            st.integrate_unit_interval(&t0, &SteadyForcing(f), false).unwrap().1.s_end
        };
        let (plus, minus) = (run(eps), run(-eps));
        let fd: Vec<Complex64> = plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
        let diff: Vec<Complex64> = fd.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let rel = (spectral_inner(&g, &diff, &diff) / spectral_inner(&g, &theta, &theta)).sqrt();
        assert!(rel < 1e-6, "column {k}: relative difference {rel:e}");
    }
}

#[test]
fn dual_is_the_transpose_of_the_dense_control_map() {
    let st = stepper();
    let g = st.grid().clone();
    let traj = trajectory(&st);
    let lin = LinearizedSolver::new(&st, &traj).unwrap();
    let cols = columns(&g);
    let forcings: Vec<SteadyForcing> = cols.iter().map(|c| SteadyForcing(c.clone())).collect();
    let refs: Vec<&dyn benard_mix::thermal::Forcing> = forcings.iter().map(|f| f as _).collect();
    let l = lin.solve_tangent_many(&refs).unwrap();

    let psi1 = random_smooth(&g, 21, 3, 4).to_spectral().into_coeffs();
    let dual = lin.solve_dual(&psi1).unwrap();
    // steady forcing: the dual integral collapses to g = sum_n dt_n lambda^n
    let mut gsum = vec![Complex64::default(); g.spec_len()];
    for (n, lambda) in dual.substeps.iter().enumerate() {
        let dt = traj.step_size(n);
        for (s, x) in gsum.iter_mut().zip(lambda) {
            *s += x * dt;
        }
    }
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (k, c) in cols.iter().enumerate() {
        let lhs = spectral_inner(&g, &l[k], &psi1);
        let rhs = spectral_inner(&g, c.coeffs(), &gsum);
        worst = worst.max((lhs - rhs).abs());
        scale = scale.max(lhs.abs());
    }
    assert!(scale > 1e-8, "control map is trivially zero");
    assert!(worst <= 1e-11 * scale.max(1.0), "worst row mismatch {worst:e} (scale {scale:e})");
}

#[test]
fn transpose_of_a_matches_dense_weighted_transpose() {
    let st = stepper();
    let g = st.grid().clone();
    let traj = trajectory(&st);
    let lin = LinearizedSolver::new(&st, &traj).unwrap();
    let cols = columns(&g);
    let raw: Vec<Vec<Complex64>> = cols.iter().map(|c| c.coeffs().to_vec()).collect();
    for n in [0, traj.steps() / 2, traj.steps() - 1] {
        let a: Vec<Vec<Complex64>> = raw.iter().map(|c| lin.linear_operator(n, c)).collect();
        let at: Vec<Vec<Complex64>> = raw.iter().map(|c| lin.linear_operator_transpose(n, c)).collect();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..raw.len() {
            for j in 0..raw.len() {
                // <e_i, A e_j> against <A^T e_i, e_j>
                let x = spectral_inner(&g, &raw[i], &a[j]);
                let y = spectral_inner(&g, &at[i], &raw[j]);
                worst = worst.max((x - y).abs());
                scale = scale.max(x.abs());
            }
        }
        assert!(scale > 0.0);
        assert!(worst <= 1e-12 * scale, "node {n}: {worst:e} vs {scale:e}");
    }
}

#[test]
fn tangent_is_linear_and_dual_is_linear() {
    let st = stepper();
    let g = st.grid().clone();
    let traj = trajectory(&st);
    let lin = LinearizedSolver::new(&st, &traj).unwrap();
    let f1 = random_smooth(&g, 1, 2, 3).to_spectral();
    let f2 = random_smooth(&g, 2, 2, 3).to_spectral();
    let combo = SpectralField::from_coeffs(
        &g,
        f1.coeffs().iter().zip(f2.coeffs()).map(|(a, b)| a * 2.0 - b * 0.5).collect(),
        Dirichlet::ZERO,
    )
    .unwrap();
    let t1 = lin.solve_tangent(&SteadyForcing(f1.clone()), false).unwrap().end;
    let t2 = lin.solve_tangent(&SteadyForcing(f2.clone()), false).unwrap().end;
    let tc = lin.solve_tangent(&SteadyForcing(combo.clone()), false).unwrap().end;
    let norm = spectral_inner(&g, &tc, &tc).sqrt();
    let err: f64 = tc.iter().zip(t1.iter().zip(&t2)).map(|(c, (a, b))| (c - (a * 2.0 - b * 0.5)).norm()).fold(0.0, f64::max);
    assert!(err <= 1e-12 * norm.max(1.0), "{err:e}");

    let d1 = lin.solve_dual(f1.coeffs()).unwrap();
    let d2 = lin.solve_dual(f2.coeffs()).unwrap();
    let dc = lin.solve_dual(combo.coeffs()).unwrap();
    let err: f64 = dc
        .start()
        .iter()
        .zip(d1.start().iter().zip(d2.start()))
        .map(|(c, (a, b))| (c - (a * 2.0 - b * 0.5)).norm())
        .fold(0.0, f64::max);
    let norm = spectral_inner(&g, dc.start(), dc.start()).sqrt();
    assert!(err <= 1e-12 * norm.max(1.0), "{err:e}");
}
