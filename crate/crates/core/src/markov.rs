//! The Markov chain `T_k = S(T_{k-1}, eta_k)`, ensembles of chains and the
//! mixing, coupling and dissipativity experiments built on them.
//!
//! Chain `i` of an experiment draws its noise from the stream
//! `(seed, i)`, so results never depend on how chains are scheduled. Two
//! ensembles run with the same seed use common random numbers: chain `i`
//! of one sees the same noise as chain `i` of the other.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::control::trial_seed;
use crate::error::{Error, Result};
use crate::field::{pairwise_sum, random_smooth, ScalarField};
use crate::grid::Grid;
use crate::noise::{sample_noise, NoiseBasis, NoiseConfig, NoiseStream};
use crate::thermal::{spectral_h1, spectral_inner, spectral_l2_sq, ThermalStepper};

/// Number of observables in the default dictionary.
pub const DICTIONARY_SIZE: usize = 32;

/// State of one chain: `S = T - Tbar` in spectral form, the step index and
/// the stream it draws from.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState {
    pub s: Vec<Complex64>,
    pub k: u64,
    pub seed: u64,
    pub chain: u64,
}

impl ChainState {
    pub fn new(stepper: &ThermalStepper, t0: &ScalarField, seed: u64, chain: u64) -> Result<Self> {
        Ok(ChainState { s: stepper.perturbation_of(t0)?, k: 0, seed, chain })
    }

    pub fn temperature(&self, stepper: &ThermalStepper) -> ScalarField {
        stepper.temperature_from(&self.s)
    }
}

/// Drives chains with one noise sample per unit interval.
pub struct MarkovChain<'a> {
    stepper: &'a ThermalStepper,
    basis: &'a NoiseBasis,
    noise: NoiseConfig,
}

impl<'a> MarkovChain<'a> {
    pub fn new(stepper: &'a ThermalStepper, basis: &'a NoiseBasis, noise: NoiseConfig) -> Result<Self> {
        stepper.grid().ensure_same(basis.grid())?;
        if noise.m != basis.len() {
            return Err(Error::InvalidArgument(format!("noise m = {} but the basis has {} elements", noise.m, basis.len())));
        }
        Ok(MarkovChain { stepper, basis, noise })
    }

    pub fn stepper(&self) -> &ThermalStepper {
        self.stepper
    }

    pub fn noise(&self) -> &NoiseConfig {
        &self.noise
    }

    /// One unit interval with the noise sample `eta_{k+1}` of the state's
    /// stream.
    pub fn advance_chain(&self, state: &ChainState) -> Result<ChainState> {
        let stream = NoiseStream::new(state.seed, state.chain);
        let sample = sample_noise(state.k, &self.noise, self.basis, &stream);
        let mut ws = self.stepper.workspace();
        let res = self.stepper.integrate_unit_spectral(&state.s, sample.forcing(), false, None, &mut ws)?;
        Ok(ChainState { s: res.s_end, k: state.k + 1, seed: state.seed, chain: state.chain })
    }

    /// Advances a state `steps` times, calling `visit` after every step.
    pub fn run(&self, state: &ChainState, steps: usize, mut visit: impl FnMut(&ChainState)) -> Result<ChainState> {
        let mut s = state.clone();
        for _ in 0..steps {
            s = self.advance_chain(&s)?;
            visit(&s);
        }
        Ok(s)
    }

    /// Runs `initial.len()` chains for `steps` units in parallel (chain ids
    /// taken from the states) and evaluates `dict` after every step.
    pub fn run_ensemble(&self, initial: &[ChainState], steps: usize, dict: &ObservableDictionary) -> Result<Ensemble> {
        let per_chain: Vec<Result<(Vec<Vec<f64>>, ChainState)>> = initial
            .par_iter()
            .map(|st| {
                let mut rows = Vec::with_capacity(steps);
                let end = self.run(st, steps, |s| rows.push(dict.evaluate(self.stepper.grid(), &s.s)))?;
                Ok((rows, end))
            })
            .collect();
        let mut values = Vec::with_capacity(initial.len());
        let mut finals = Vec::with_capacity(initial.len());
        for r in per_chain {
            let (rows, end) = r?;
            values.push(rows);
            finals.push(end);
        }
        Ok(Ensemble { values, finals })
    }

    /// Chains `a` and `b` driven by the same noise (chain id of `a`); returns
    /// `|T_k^a - T_k^b|_{H^1}` for `k = 0..=steps`.
    pub fn coupling_experiment(&self, a: &ChainState, b: &ChainState, steps: usize) -> Result<Vec<f64>> {
        let g = self.stepper.grid();
        let mut b = b.clone();
        b.seed = a.seed;
        b.chain = a.chain;
        b.k = a.k;
        let dist = |x: &ChainState, y: &ChainState| {
            let d: Vec<Complex64> = x.s.iter().zip(&y.s).map(|(p, q)| p - q).collect();
            spectral_h1(g, &d)
        };
        let mut out = vec![dist(a, &b)];
        let (mut x, mut y) = (a.clone(), b);
        for _ in 0..steps {
            let (nx, ny) = rayon::join(|| self.advance_chain(&x), || self.advance_chain(&y));
            x = nx?;
            y = ny?;
            out.push(dist(&x, &y));
        }
        Ok(out)
    }

    /// `|T|_{H^1}` of a chain state (full temperature including `Tbar`).
    pub fn h1_norm(&self, state: &ChainState) -> f64 {
        crate::field::sobolev_norm(&state.temperature(self.stepper), 1)
    }

    /// Ball radius `factor * max_k |T_k|_{H^1}` over a burn-in run from
    /// `state`.
    pub fn calibrate_ball(&self, state: &ChainState, burn_in: usize, factor: f64) -> Result<f64> {
        let mut max = self.h1_norm(state);
        self.run(state, burn_in, |s| max = max.max(self.h1_norm(s)))?;
        Ok(factor * max)
    }

    /// For each initial radius `R`, starts from `Tbar + R f` (`f` a unit
    /// `H^1` smooth random field) and records the first step with
    /// `|T_k|_{H^1} <= radius`, giving up after `budget` steps.
    pub fn dissipativity_experiment(&self, radii: &[f64], radius: f64, budget: usize, seed: u64) -> Result<DissipativityReport> {
        let g = self.stepper.grid();
        let f = random_smooth(g, trial_seed(seed, 0), 3, 4);
        let tbar = ScalarField::conduction(g, self.stepper.config().boundary);
        let mut entries = Vec::with_capacity(radii.len());
        for (i, &r) in radii.iter().enumerate() {
            let mut t0 = tbar.add(&f.scale(r));
            t0.set_boundary(self.stepper.config().boundary);
            let mut st = ChainState::new(self.stepper, &t0, seed, i as u64)?;
            let mut norms = vec![self.h1_norm(&st)];
            let mut entry = None;
            if norms[0] <= radius {
                entry = Some(0);
            }
            while entry.is_none() && (st.k as usize) < budget {
                st = self.advance_chain(&st)?;
                let n = self.h1_norm(&st);
                norms.push(n);
                if n <= radius {
                    entry = Some(st.k as usize);
                }
            }
            entries.push(EntryTime { initial_radius: r, entry, norms });
        }
        let pts: Vec<(f64, f64)> =
            entries.iter().filter_map(|e| e.entry.map(|k| ((e.initial_radius + 2.0).ln(), k as f64))).collect();
        let (slope, intercept) = if pts.len() >= 2 { linear_fit(&pts).map(|(a, b, _)| (a, b)).unwrap_or((f64::NAN, f64::NAN)) } else { (f64::NAN, f64::NAN) };
        Ok(DissipativityReport { radius, entries, slope, intercept })
    }
}

/// Observable values of an ensemble: `values[chain][step][observable]` for
/// steps `1..=K`, plus the final states.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub values: Vec<Vec<Vec<f64>>>,
    pub finals: Vec<ChainState>,
}

impl Ensemble {
    pub fn chains(&self) -> usize {
        self.values.len()
    }

    pub fn steps(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }

    /// Observable values of all chains at step `k` (1-based), one row per
    /// chain.
    pub fn at_step(&self, k: usize) -> Vec<Vec<f64>> {
        self.values.iter().map(|c| c[k - 1].clone()).collect()
    }
}

/// Observables `f_i(T) = tanh(<g_i, T - Tbar> / s_i)` with `s_i = |g_i|_{L^2}`,
/// so each `f_i` is bounded by 1 and 1-Lipschitz in `H^1`.
#[derive(Clone, Debug)]
pub struct ObservableDictionary {
    profiles: Vec<Vec<Complex64>>,
    scales: Vec<f64>,
}

impl ObservableDictionary {
    /// `count` smooth random profiles from `seed`.
    pub fn random(grid: &Arc<Grid>, count: usize, seed: u64) -> Self {
        let profiles: Vec<Vec<Complex64>> =
            (0..count).map(|i| random_smooth(grid, trial_seed(seed, i as u64), 2, 3).to_spectral().into_coeffs()).collect();
        let scales = profiles.iter().map(|p| spectral_l2_sq(grid, p).sqrt()).collect();
        ObservableDictionary { profiles, scales }
    }

    /// Dictionary from given profiles (zero wall values), scaled by their
    /// `L^2` norms.
    pub fn from_profiles(grid: &Arc<Grid>, profiles: Vec<Vec<Complex64>>) -> Result<Self> {
        let scales: Vec<f64> = profiles.iter().map(|p| spectral_l2_sq(grid, p).sqrt()).collect();
        if scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("observable profiles must be nonzero".into()));
        }
        Ok(ObservableDictionary { profiles, scales })
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn scale(&self, i: usize) -> f64 {
        self.scales[i]
    }

    pub fn profile(&self, i: usize) -> &[Complex64] {
        &self.profiles[i]
    }

    /// `f_i(T)` for `S = T - Tbar` given spectrally.
    pub fn evaluate(&self, grid: &Grid, s: &[Complex64]) -> Vec<f64> {
        self.profiles.iter().zip(&self.scales).map(|(g, sc)| (spectral_inner(grid, g, s) / sc).tanh()).collect()
    }
}

/// Order-independent mean: pairwise sum of the sorted values.
pub fn exchangeable_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    pairwise_sum(&v) / v.len() as f64
}

/// `max_i |mean_A f_i - mean_B f_i|` over ensembles given as one row of
/// observable values per sample. A lower bound on the dual-Lipschitz
/// distance of the two empirical laws.
pub fn estimate_dual_lipschitz(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    let n = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("ensembles use different dictionaries".into()));
    }
    let mut best: f64 = 0.0;
    for i in 0..n {
        let ma = exchangeable_mean(&a.iter().map(|r| r[i]).collect::<Vec<_>>());
        let mb = exchangeable_mean(&b.iter().map(|r| r[i]).collect::<Vec<_>>());
        best = best.max((ma - mb).abs());
    }
    Ok(best)
}

/// Least-squares fit of `ln d_k = ln C - gamma k`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DecayFit {
    pub gamma: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    /// Steps used by the fit.
    pub used: Vec<usize>,
    /// Steps in the window dropped because `d_k <= 0`.
    pub excluded: Vec<usize>,
}

/// Fits `series[k]` (`k` as given by `steps`) over the inclusive window
/// `[first, last]`.
pub fn fit_decay_rate(steps: &[usize], series: &[f64], first: usize, last: usize) -> Result<DecayFit> {
    if steps.len() != series.len() {
        return Err(Error::SizeMismatch { expected: steps.len(), got: series.len() });
    }
    let mut pts = Vec::new();
    let mut used = Vec::new();
    let mut excluded = Vec::new();
    for (&k, &d) in steps.iter().zip(series) {
        if k < first || k > last {
            continue;
        }
        if d > 0.0 && d.is_finite() {
            pts.push((k as f64, d.ln()));
            used.push(k);
        } else {
            excluded.push(k);
        }
    }
    let (slope, intercept, r2) =
        linear_fit(&pts).ok_or_else(|| Error::InvalidArgument(format!("need two positive entries in [{first}, {last}]")))?;
    Ok(DecayFit { gamma: -slope, prefactor: intercept.exp(), r_squared: r2, used, excluded })
}

/// Ordinary least squares `y = a x + b`; returns `(a, b, R^2)`. `R^2` is 1
/// when the data have no spread.
pub fn linear_fit(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - a * p.0 - b).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Some((a, b, r2))
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EntryTime {
    pub initial_radius: f64,
    /// First step inside the ball; `None` when the budget ran out.
    pub entry: Option<usize>,
    /// `|T_k|_{H^1}` for `k = 0..` up to the entry step.
    pub norms: Vec<f64>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct DissipativityReport {
    pub radius: f64,
    pub entries: Vec<EntryTime>,
    /// Regression of entry time on `ln(R + 2)`.
    pub slope: f64,
    pub intercept: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Dirichlet;
    use crate::thermal::StepperConfig;

    fn chain_setup(ra: f64, a: f64) -> (ThermalStepper, NoiseBasis, NoiseConfig) {
        let g = Grid::new(8, 8, 16, 0.25).unwrap();
        let st = ThermalStepper::new(&g, StepperConfig { ra, dt: 1.0 / 32.0, ..Default::default() }).unwrap();
        let cfg = NoiseConfig { a, m: 8, time_nodes: 32, ..Default::default() };
        let basis = NoiseBasis::build(&cfg, &g).unwrap();
        (st, basis, cfg)
    }

    #[test]
    fn zero_amplitude_is_deterministic_flow() {
        let (st, basis, cfg) = chain_setup(1e3, 0.0);
        let mc = MarkovChain::new(&st, &basis, cfg).unwrap();
        let t0 = crate::control::random_initial_field(&st, 0.3, 1);
        let s = ChainState::new(&st, &t0, 5, 0).unwrap();
        let next = mc.advance_chain(&s).unwrap();
        let mut ws = st.workspace();
        let direct = st.integrate_unit_spectral(&s.s, &crate::thermal::NoForcing, false, None, &mut ws).unwrap();
        assert_eq!(next.s, direct.s_end);
        assert_eq!(next.k, 1);
    }

    #[test]
    fn same_seed_same_chain() {
        let (st, basis, cfg) = chain_setup(1e3, 1.0);
        let mc = MarkovChain::new(&st, &basis, cfg).unwrap();
        let t0 = ScalarField::conduction(st.grid(), Dirichlet::new(1.0, 0.0));
        let s = ChainState::new(&st, &t0, 5, 3).unwrap();
        let a = mc.run(&s, 2, |_| {}).unwrap();
        let b = mc.run(&s, 2, |_| {}).unwrap();
        assert_eq!(a, b);
        let mut other = s.clone();
        other.chain = 4;
        assert_ne!(mc.run(&other, 2, |_| {}).unwrap().s, a.s);
    }

    #[test]
    fn estimator_trivia() {
        let a = vec![vec![0.1, -0.5], vec![0.3, 0.2]];
        assert_eq!(estimate_dual_lipschitz(&a, &a).unwrap(), 0.0);
        let b = vec![vec![0.0, 0.0]];
        let d = estimate_dual_lipschitz(&a, &b).unwrap();
        assert!((d - 0.2).abs() < 1e-15);
        assert!(estimate_dual_lipschitz(&a, &[]).is_err());
        let mut rev = a.clone();
        rev.reverse();
        assert_eq!(estimate_dual_lipschitz(&rev, &b).unwrap(), d);
    }

    #[test]
    fn exact_decay_is_recovered() {
        let steps: Vec<usize> = (0..30).collect();
        let series: Vec<f64> = steps.iter().map(|&k| 0.7 * (-0.3 * k as f64).exp()).collect();
        let fit = fit_decay_rate(&steps, &series, 5, 25).unwrap();
        assert!((fit.gamma - 0.3).abs() < 1e-10 && (fit.prefactor - 0.7).abs() < 1e-10);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let flat = vec![0.5; 30];
        assert!(fit_decay_rate(&steps, &flat, 5, 25).unwrap().gamma.abs() < 1e-12);
        let mut holes = series.clone();
        holes[7] = 0.0;
        assert_eq!(fit_decay_rate(&steps, &holes, 5, 25).unwrap().excluded, vec![7]);
    }

    #[test]
    fn identical_coupled_chains_stay_together() {
        let (st, basis, cfg) = chain_setup(1e3, 1.0);
        let mc = MarkovChain::new(&st, &basis, cfg).unwrap();
        let t0 = crate::control::random_initial_field(&st, 0.3, 2);
        let s = ChainState::new(&st, &t0, 1, 0).unwrap();
        assert!(mc.coupling_experiment(&s, &s, 2).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn dictionary_is_bounded_and_lipschitz() {
        let g = Grid::new(8, 8, 16, 0.25).unwrap();
        let d = ObservableDictionary::random(&g, 4, 9);
        let st = ThermalStepper::new(&g, StepperConfig::default()).unwrap();
        let x = st.perturbation_of(&crate::control::random_initial_field(&st, 3.0, 1)).unwrap();
        let y = st.perturbation_of(&crate::control::random_initial_field(&st, 3.0, 2)).unwrap();
        let (fx, fy) = (d.evaluate(&g, &x), d.evaluate(&g, &y));
        let diff: Vec<Complex64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        let dist = spectral_h1(&g, &diff);
        for (a, b) in fx.iter().zip(&fy) {
            assert!(a.abs() <= 1.0);
            assert!((a - b).abs() <= dist * (1.0 + 1e-12));
        }
    }
}
