//! Randomised invariants of transforms, the Stokes operator and `Pi_l`.

use std::sync::Arc;

use approx::assert_relative_eq;
use benard_mix::control::Projection;
use benard_mix::field::{horizontal_derivative, random_smooth, sobolev_norm, vertical_derivative, Axis};
use benard_mix::noise::{NoiseBasis, NoiseConfig};
use benard_mix::stokes::StokesSolver;
use benard_mix::{Dirichlet, Grid, ScalarField, VectorField};
use proptest::prelude::*;
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Arbitrary (not smooth) values with zero walls.
fn rough(g: &Arc<Grid>, seed: u64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pl = g.plane_len();
    let values = (0..g.phys_len())
        .map(|i| if i < pl || i >= g.n3() * pl { 0.0 } else { uniform(&mut rng) })
        .collect();
    ScalarField::from_values(g, values, Dirichlet::ZERO).unwrap()
}

fn grids() -> impl Strategy<Value = Arc<Grid>> {
    (prop::sample::select(vec![8usize, 10, 12, 16]), prop::sample::select(vec![8usize, 14, 16]), 4usize..24)
        .prop_filter_map("layer on a plane", |(n1, n2, n3)| Grid::new(n1, n2, n3, 0.5).ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transforms_round_trip_and_keep_parseval(g in grids(), seed in any::<u64>()) {
        let f = rough(&g, seed);
        let spec = f.to_spectral();
        let back = spec.to_physical();
        let scale = f.max_abs();
        for (a, b) in f.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
        let phys = f.inner(&f);
        prop_assert!((phys - spec.inner(&spec)).abs() <= 1e-10 * phys);
        prop_assert!(spec.conjugate_symmetry_defect() <= 1e-13 * scale);
    }

    #[test]
    fn derivatives_are_linear_and_kill_constants(g in grids(), seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (f, h) = (rough(&g, seed), rough(&g, seed ^ 0x9e37));
        let combo = f.axpby(a, &h, b);
        for axis in [Axis::X1, Axis::X2] {
            let lhs = horizontal_derivative(&combo, axis);
            let rhs = horizontal_derivative(&f, axis).axpby(a, &horizontal_derivative(&h, axis), b);
            prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-11 * (1.0 + lhs.max_abs()));
            prop_assert!(horizontal_derivative(&ScalarField::constant(&g, a), axis).max_abs() == 0.0);
            prop_assert!(horizontal_derivative(&f, axis).to_spectral().conjugate_symmetry_defect() <= 1e-12);
        }
        let lhs = vertical_derivative(&combo).unwrap();
        let rhs = vertical_derivative(&f).unwrap().axpby(a, &vertical_derivative(&h).unwrap(), b);
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-11 * (1.0 + lhs.max_abs()));
        prop_assert!(vertical_derivative(&ScalarField::constant(&g, b)).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn stokes_is_linear_no_slip_and_self_consistent(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let g = Grid::new(16, 8, 16, 0.25).unwrap();
        let st = StokesSolver::new(&g, 1e4);
        let (t1, t2) = (rough(&g, seed), rough(&g, seed.wrapping_add(1)));
        let u = st.apply_m(&t1.axpby(a, &t2, b)).unwrap();
        let (u1, u2) = (st.apply_m(&t1).unwrap(), st.apply_m(&t2).unwrap());
        let mixed = VectorField::new(
            u1.components[0].axpby(a, &u2.components[0], b),
            u1.components[1].axpby(a, &u2.components[1], b),
            u1.components[2].axpby(a, &u2.components[2], b),
        );
        prop_assert!(u.sub(&mixed).max_abs() <= 1e-10 * (1.0 + u.max_abs()));
        for c in &u.components {
            prop_assert!(c.plane(0).iter().chain(c.plane(g.n3())).all(|&v| v == 0.0));
        }
        // adjointness on a rough pair
        let f = VectorField::new(rough(&g, seed ^ 1), rough(&g, seed ^ 2), rough(&g, seed ^ 3));
        let lhs = u1.inner(&f);
        let rhs = t1.inner(&st.apply_m_star(&f).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * sobolev_norm(&t1, 0) * f.norm());
    }

    #[test]
    fn projection_is_linear_idempotent_and_self_adjoint(seed in any::<u64>(), l in 1usize..=8, a in -2.0f64..2.0) {
        let g = Grid::new(8, 8, 16, 0.25).unwrap();
        let basis = NoiseBasis::build(&NoiseConfig { m: 8, time_nodes: 8, ..Default::default() }, &g).unwrap();
        let p = Projection::new(&basis, l).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sample = || {
            let mut s = basis.empty_samples();
            for v in s.values.iter_mut().flatten() {
                // wall planes carry no noise
                let n = v.len();
                for x in &mut v[1..n - 1] {
                    *x = uniform(&mut rng);
                }
            }
            s
        };
        let (f, h) = (sample(), sample());
        let pf = p.apply(&f).unwrap();
        let ph = p.apply(&h).unwrap();
        let scale = basis.e_inner(&f, &f).sqrt() * basis.e_inner(&h, &h).sqrt();
        prop_assert!((basis.e_inner(&pf, &h) - basis.e_inner(&f, &ph)).abs() <= 1e-9 * scale);
        let ppf = p.apply(&pf).unwrap();
        let (c1, c2) = (p.coefficients(&pf).unwrap(), p.coefficients(&ppf).unwrap());
        for (x, y) in c1.iter().zip(&c2) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
        let mut combo = f.clone();
        for (cv, hv) in combo.values.iter_mut().flatten().zip(h.values.iter().flatten()) {
            for (x, y) in cv.iter_mut().zip(hv) {
                *x = a * *x + y;
            }
        }
        let cc = p.coefficients(&combo).unwrap();
        let (cf, ch) = (p.coefficients(&f).unwrap(), p.coefficients(&h).unwrap());
        for i in 0..l {
            prop_assert!((cc[i] - (a * cf[i] + ch[i])).abs() <= 1e-9 * (1.0 + cc[i].abs()));
        }
    }
}

/// `C = max |M S|_{H^1} / |S|_{L^2}` over a fixed family of smooth fields.
fn smoothing_constant(n3: usize) -> f64 {
    let g = Grid::new(16, 16, n3, 0.25).unwrap();
    let st = StokesSolver::new(&g, 1.0);
    (0..6)
        .map(|s| {
            let t = random_smooth(&g, s, 3, 4);
            st.apply_m(&t).unwrap().h1_norm() / sobolev_norm(&t, 0)
        })
        .fold(0.0, f64::max)
}

#[test]
fn smoothing_constant_is_stable_under_refinement() {
    let (c16, c32, c64) = (smoothing_constant(16), smoothing_constant(32), smoothing_constant(64));
    assert!(c16.is_finite() && c16 > 0.0);
    assert_relative_eq!(c32, c64, max_relative = 0.02);
    assert_relative_eq!(c16, c64, max_relative = 0.1);
}
