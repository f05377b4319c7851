//! Mixing estimators and chain runs against direct oracles.

use std::f64::consts::PI;

use benard_mix::markov::{estimate_dual_lipschitz, fit_decay_rate, ChainState, MarkovChain, ObservableDictionary};
use benard_mix::noise::{NoiseBasis, NoiseConfig};
use benard_mix::thermal::{spectral_inner, StepperConfig, ThermalStepper};
use benard_mix::{Grid, ScalarField};
use num_complex::Complex64;
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn setup(ra: f64, a: f64) -> (ThermalStepper, NoiseBasis, NoiseConfig) {
    let g = Grid::new(16, 16, 16, 0.25).unwrap();
    let st = ThermalStepper::new(&g, StepperConfig { ra, dt: 1.0 / 64.0, ..Default::default() }).unwrap();
    let cfg = NoiseConfig { a, m: 8, time_nodes: 64, ..Default::default() };
    let basis = NoiseBasis::build(&cfg, &g).unwrap();
    (st, basis, cfg)
}

#[test]
fn one_point_ensembles_give_tanh_of_one() {
    let g = Grid::new(8, 8, 16, 0.25).unwrap();
    // two profiles in different horizontal modes, hence orthogonal
    let g1 = ScalarField::from_fn(&g, |x1, _, z| (PI * z).sin() * x1.cos()).to_spectral().into_coeffs();
    let g2 = ScalarField::from_fn(&g, |_, x2, z| (2.0 * PI * z).sin() * (2.0 * x2).cos()).to_spectral().into_coeffs();
    let dict = ObservableDictionary::from_profiles(&g, vec![g1.clone(), g2]).unwrap();
    let s1 = dict.scale(0);
    let norm_sq = spectral_inner(&g, &g1, &g1);
    let diff: Vec<Complex64> = g1.iter().map(|c| c * (s1 / norm_sq)).collect();
    let zero = vec![Complex64::default(); g.spec_len()];
    let a = vec![dict.evaluate(&g, &zero)];
    let b = vec![dict.evaluate(&g, &diff)];
    let d = estimate_dual_lipschitz(&a, &b).unwrap();
    assert!((d - 1f64.tanh()).abs() < 1e-14, "{d}");
    assert!(b[0][1].abs() < 1e-14);
}

/// `E tanh(X + shift)` for `X ~ N(0, sd^2)` by Simpson's rule on `+-10 sd`.
fn gaussian_tanh_mean(sd: f64, shift: f64) -> f64 {
    let n = 20_000;
    let (lo, hi) = (-10.0 * sd, 10.0 * sd);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| (x + shift).tanh() * (-0.5 * (x / sd).powi(2)).exp() / (sd * (2.0 * PI).sqrt());
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn shifted_gaussians_match_quadrature() {
    let (sd, delta, n) = (0.8, 0.3, 40_000);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let normal = Normal::<f64>::new(0.0, sd).unwrap();
    let a: Vec<Vec<f64>> = (0..n).map(|_| vec![normal.sample(&mut rng).tanh()]).collect();
    let b: Vec<Vec<f64>> = (0..n).map(|_| vec![(normal.sample(&mut rng) + delta).tanh()]).collect();
    let est = estimate_dual_lipschitz(&a, &b).unwrap();
    let exact = (gaussian_tanh_mean(sd, 0.0) - gaussian_tanh_mean(sd, delta)).abs();
    let var = |v: &[Vec<f64>]| {
        let m = v.iter().map(|r| r[0]).sum::<f64>() / v.len() as f64;
        v.iter().map(|r| (r[0] - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let se = ((var(&a) + var(&b)) / n as f64).sqrt();
    assert!((est - exact).abs() < 4.0 * se, "estimate {est}, quadrature {exact}, se {se}");
}

#[test]
fn decay_fits() {
    let ks: Vec<usize> = (0..30).collect();
    let exact: Vec<f64> = ks.iter().map(|&k| 1.7 * (-0.35 * k as f64).exp()).collect();
    let f = fit_decay_rate(&ks, &exact, 3, 25).unwrap();
    assert!((f.gamma - 0.35).abs() < 1e-10 && (f.prefactor - 1.7).abs() < 1e-10);

    let f = fit_decay_rate(&ks, &vec![0.4; 30], 0, 29).unwrap();
    assert!(f.gamma.abs() < 1e-14);

    // log-normal noise of known spread: slope within 4 standard errors
    let sigma = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::<f64>::new(0.0, sigma).unwrap();
    let noisy: Vec<f64> = exact.iter().map(|d| d * normal.sample(&mut rng).exp()).collect();
    let f = fit_decay_rate(&ks, &noisy, 5, 25).unwrap();
    let xs: Vec<f64> = (5..=25).map(|k| k as f64).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let se = sigma / sxx.sqrt();
    assert!((f.gamma - 0.35).abs() < 4.0 * se, "gamma {} se {se}", f.gamma);

    // nonpositive entries are reported, not fitted
    let mut holes = exact.clone();
    holes[10] = 0.0;
    holes[11] = -1.0;
    let f = fit_decay_rate(&ks, &holes, 5, 25).unwrap();
    assert_eq!(f.excluded, vec![10, 11]);
    assert!((f.gamma - 0.35).abs() < 1e-10);
}

#[test]
fn heat_equation_coupling_contracts_at_the_discrete_rate() {
    let (st, basis, cfg) = setup(0.0, 0.0);
    let g = st.grid().clone();
    let mc = MarkovChain::new(&st, &basis, cfg).unwrap();
    let b = st.config().boundary;
    let tbar = ScalarField::conduction(&g, b);
    let mut t1 = tbar.add(&ScalarField::from_fn(&g, |x1, _, z| 0.3 * x1.cos() * (PI * z).sin()));
    t1.set_boundary(b);
    let a = ChainState::new(&st, &tbar, 1, 0).unwrap();
    let other = ChainState::new(&st, &t1, 1, 0).unwrap();
    let dist = mc.coupling_experiment(&a, &other, 4).unwrap();

    // the difference solves the discrete heat equation; cos(x1) sin(pi x3)
    // is an eigenvector of the discrete Laplacian
    let h = g.h();
    let lambda = -4.0 / (h * h) * (PI * h / 2.0).sin().powi(2) - 1.0;
    let dt = st.config().dt;
    let per_step = (1.0 + 0.5 * dt * lambda) / (1.0 - 0.5 * dt * lambda);
    let per_unit = per_step.powi((1.0 / dt).round() as i32);
    for k in 1..dist.len() {
        let ratio = dist[k] / dist[k - 1];
        assert!((ratio / per_unit - 1.0).abs() < 1e-9, "step {k}: {ratio} vs {per_unit}");
    }

    let same = mc.coupling_experiment(&a, &a, 2).unwrap();
    assert!(same.iter().all(|&d| d == 0.0));
}

#[test]
fn ensembles_are_reproducible_and_bounded() {
    let (st, basis, cfg) = setup(2e3, 1.0);
    let g = st.grid().clone();
    let mc = MarkovChain::new(&st, &basis, cfg).unwrap();
    let dict = ObservableDictionary::random(&g, 6, 9);
    let t0 = ScalarField::conduction(&g, st.config().boundary);
    let init: Vec<ChainState> = (0..3).map(|c| ChainState::new(&st, &t0, 4, c).unwrap()).collect();
    let e1 = mc.run_ensemble(&init, 2, &dict).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let e2 = pool.install(|| mc.run_ensemble(&init, 2, &dict)).unwrap();
    assert_eq!(e1.values, e2.values);
    assert!(e1.values.iter().flatten().flatten().all(|v| v.abs() <= 1.0));
    // one chain is the plain loop
    let mut rows = Vec::new();
    let end = mc.run(&init[1], 2, |s| rows.push(dict.evaluate(&g, &s.s))).unwrap();
    assert_eq!(rows, e1.values[1]);
    assert_eq!(end, e1.finals[1]);
    // distinct streams give distinct chains
    assert_ne!(e1.values[0], e1.values[1]);
}

#[test]
fn norm_stays_in_the_calibrated_ball() {
    let (st, basis, cfg) = setup(2e3, 1.0);
    let g = st.grid().clone();
    let mc = MarkovChain::new(&st, &basis, cfg).unwrap();
    let t0 = ScalarField::conduction(&g, st.config().boundary);
    let s0 = ChainState::new(&st, &t0, 3, 0).unwrap();
    let radius = mc.calibrate_ball(&s0, 4, 1.2).unwrap();
    let after = mc.run(&s0, 4, |_| {}).unwrap();
    let mut norms = Vec::new();
    mc.run(&after, 4, |s| norms.push(mc.h1_norm(s))).unwrap();
    assert!(norms.iter().all(|&n| n <= radius), "{norms:?} vs {radius}");
}

#[test]
fn entry_times_grow_with_the_initial_radius() {
    let (st, basis, cfg) = setup(2e3, 1.0);
    let mc = MarkovChain::new(&st, &basis, cfg).unwrap();
    let t0 = ScalarField::conduction(st.grid(), st.config().boundary);
    let radius = mc.calibrate_ball(&ChainState::new(&st, &t0, 0, 0).unwrap(), 2, 1.2).unwrap();
    let rep = mc.dissipativity_experiment(&[0.0, 10.0, 100.0], radius, 20, 0).unwrap();
    let entries: Vec<usize> = rep.entries.iter().map(|e| e.entry.expect("entered")).collect();
    assert_eq!(entries[0], 0);
    assert!(entries.windows(2).all(|w| w[0] <= w[1]), "{entries:?}");
}

fn rows(chains: usize, obs: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..=1.0, obs), chains)
}

proptest! {
    #[test]
    fn estimator_lies_in_zero_two(a in rows(5, 3), b in rows(7, 3)) {
        let d = estimate_dual_lipschitz(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        prop_assert_eq!(estimate_dual_lipschitz(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn estimator_ignores_chain_order(
        (a, pa) in rows(9, 4).prop_flat_map(|r| { let p = Just(r.clone()).prop_shuffle(); (Just(r), p) }),
        b in rows(6, 4),
    ) {
        prop_assert_eq!(estimate_dual_lipschitz(&a, &b).unwrap(), estimate_dual_lipschitz(&pa, &b).unwrap());
    }
}
