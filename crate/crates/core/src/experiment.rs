//! Experiment drivers behind the command line. Each takes a validated
//! [`RunConfig`], returns a [`Report`] and optionally writes it with its CSV
//! series into an output directory.
//!
//! Reports hold no timing or paths outside the output directory, so equal
//! configs give byte-identical `report.json` files at any thread count.
//! Wall time goes to a separate `timing.json`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{self, Kind as CheckpointKind, CSV_SCHEMA};
use crate::config::{InitSpec, RunConfig};
use crate::control::{random_initial_field, trial_seed, Controller, PeriodicSolution, L_CANDIDATES};
use crate::error::{Error, Result};
use crate::field::{random_smooth, Dirichlet, ScalarField};
use crate::grid::Grid;
use crate::markov::{estimate_dual_lipschitz, fit_decay_rate, linear_fit, ChainState, MarkovChain, ObservableDictionary};
use crate::noise::{sample_noise, sample_xi, xi_cdf, BasisForcing, NoiseBasis, NoiseStream};
use crate::stokes::{oracle, SpectralVelocity, StokesSolver};
use crate::tangent::LinearizedSolver;
use crate::thermal::{energy_sample, spectral_l2_sq, Forcing, ThermalStepper};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Mix,
    Control,
    AdjointCheck,
    StokesValidate,
    NoiseValidate,
    Dissipativity,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Simulate,
        ExperimentKind::Mix,
        ExperimentKind::Control,
        ExperimentKind::AdjointCheck,
        ExperimentKind::StokesValidate,
        ExperimentKind::NoiseValidate,
        ExperimentKind::Dissipativity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Mix => "mix",
            ExperimentKind::Control => "control",
            ExperimentKind::AdjointCheck => "adjoint-check",
            ExperimentKind::StokesValidate => "stokes-validate",
            ExperimentKind::NoiseValidate => "noise-validate",
            ExperimentKind::Dissipativity => "dissipativity",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment '{s}'")))
    }
}

/// A CSV series: header plus rows, written as `<name>.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Series {
    fn new(name: &str, header: &[&str]) -> Self {
        Series { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(self.file_name()))?);
        writeln!(w, "{CSV_SCHEMA}")?;
        writeln!(w, "{}", self.header.join(","))?;
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|x| format!("{x:.17e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub seed: u64,
    /// Gate outcome; the command exits with 1 when false.
    pub passed: bool,
    pub metrics: Value,
    /// CSV files written next to the report.
    pub csv: Vec<String>,
    #[serde(skip)]
    pub series: Vec<Series>,
}

impl Report {
    fn new(kind: ExperimentKind, cfg: &RunConfig, passed: bool, metrics: Value, series: Vec<Series>) -> Self {
        Report {
            kind,
            config_hash: cfg.hash(),
            seed: cfg.noise.seed,
            passed,
            metrics,
            csv: series.iter().map(Series::file_name).collect(),
            series,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Writes `report.json` and the CSV series into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json() + "\n")?;
        for s in &self.series {
            s.write(dir)?;
        }
        Ok(())
    }
}

/// Runs an experiment; with `out` set, writes the report, its series,
/// `timing.json` and any checkpoints there.
pub fn run_experiment(kind: ExperimentKind, cfg: &RunConfig, out: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let report = match kind {
        ExperimentKind::Simulate => simulate(cfg, out)?,
        ExperimentKind::Mix => mix(cfg)?,
        ExperimentKind::Control => control(cfg)?,
        ExperimentKind::AdjointCheck => adjoint_check(cfg)?,
        ExperimentKind::StokesValidate => stokes_validate(cfg, 50, 10, 100)?,
        ExperimentKind::NoiseValidate => noise_validate(cfg, 1_000_000, 100_000)?,
        ExperimentKind::Dissipativity => dissipativity(cfg)?,
    };
    if let Some(dir) = out {
        report.write(dir)?;
        let timing = json!({ "kind": kind, "wall_time_s": start.elapsed().as_secs_f64() });
        std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
    }
    Ok(report)
}

/// Stepper and noise basis of a configuration.
pub struct Setup {
    pub grid: Arc<Grid>,
    pub stepper: ThermalStepper,
    pub basis: NoiseBasis,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let grid = cfg.build_grid()?;
        let stepper = ThermalStepper::new(&grid, cfg.stepper_config())?;
        let basis = NoiseBasis::build(&cfg.noise_config(), &grid)?;
        Ok(Setup { grid, stepper, basis })
    }

    pub fn chain(&self, cfg: &RunConfig) -> Result<MarkovChain<'_>> {
        MarkovChain::new(&self.stepper, &self.basis, cfg.noise_config())
    }
}

/// Initial chain state for `spec`. Random fields are fixed by the seed, not
/// by the chain id.
pub fn initial_state(setup: &Setup, spec: &InitSpec, seed: u64, chain: u64) -> Result<ChainState> {
    let st = &setup.stepper;
    match spec {
        InitSpec::Conduction => {
            ChainState::new(st, &ScalarField::conduction(&setup.grid, st.config().boundary), seed, chain)
        }
        InitSpec::Random(r) => {
            ChainState::new(st, &random_initial_field(st, *r, trial_seed(seed, u32::MAX as u64)), seed, chain)
        }
        InitSpec::Checkpoint(path) => {
            let header = checkpoint::read_header(path)?;
            let boundary = match header.kind {
                CheckpointKind::Chain => {
                    let (mut s, b) = checkpoint::load_chain(&setup.grid, path)?;
                    s.seed = seed;
                    s.chain = chain;
                    check_boundary(b, st.config().boundary)?;
                    return Ok(s);
                }
                CheckpointKind::Field => header.boundary(),
            };
            check_boundary(boundary, st.config().boundary)?;
            ChainState::new(st, &checkpoint::load_field(&setup.grid, path)?, seed, chain)
        }
    }
}

fn check_boundary(found: Dirichlet, expected: Dirichlet) -> Result<()> {
    if found != expected {
        return Err(Error::Checkpoint(format!("checkpoint boundary {found:?} differs from the configured {expected:?}")));
    }
    Ok(())
}

fn simulate(cfg: &RunConfig, out: Option<&Path>) -> Result<Report> {
    let setup = Setup::new(cfg)?;
    let mc = setup.chain(cfg)?;
    let init = InitSpec::parse(&cfg.simulate.init).map_err(|e| Error::Config(vec![e]))?;
    let s0 = initial_state(&setup, &init, cfg.noise.seed, 0)?;
    let b = setup.stepper.config().boundary;
    let mut series = Series::new("energy", &["k", "s_l2", "grad_s_l2", "t_h1", "h3_diagnostic"]);
    let every = cfg.simulate.checkpoint_every;
    let mut saved = Ok(());
    let end = mc.run(&s0, cfg.simulate.steps, |s| {
        let e = energy_sample(&setup.grid, s.k as f64, &s.s, b);
        series.rows.push(vec![s.k as f64, e.s_l2, e.grad_s_l2, e.t_h1, e.h3_diagnostic]);
        if let (Some(dir), true) = (out, every > 0 && s.k > 0 && s.k % every as u64 == 0) {
            if saved.is_ok() {
                saved = checkpoint::save_chain(&setup.grid, b, s, dir.join(format!("checkpoint_{}.bmix", s.k)));
            }
        }
    })?;
    saved?;
    let final_h1 = mc.h1_norm(&end);
    if let Some(dir) = out {
        checkpoint::save_chain(&setup.grid, b, &end, dir.join("final.bmix"))?;
        checkpoint::write_profile_csv(&end.temperature(&setup.stepper), dir.join("profile.csv"))?;
    }
    let metrics = json!({ "steps": cfg.simulate.steps, "final_t_h1": final_h1, "final_k": end.k });
    Ok(Report::new(ExperimentKind::Simulate, cfg, final_h1.is_finite(), metrics, vec![series]))
}

/// Mixing run: two ensembles with common noise, one from conduction and one
/// from `mix.init`, plus a same-noise coupling of one pair.
pub fn mix(cfg: &RunConfig) -> Result<Report> {
    let setup = Setup::new(cfg)?;
    let mc = setup.chain(cfg)?;
    let m = &cfg.mix;
    let seed = cfg.noise.seed;
    let dict = ObservableDictionary::random(&setup.grid, m.observables, m.dictionary_seed);
    let init = InitSpec::parse(&m.init).map_err(|e| Error::Config(vec![e]))?;
    let a0 = initial_state(&setup, &InitSpec::Conduction, seed, 0)?;
    let b0 = initial_state(&setup, &init, seed, 0)?;
    let replicate =
        |s: &ChainState| -> Vec<ChainState> { (0..m.chains as u64).map(|i| ChainState { chain: i, ..s.clone() }).collect() };
    let ea = mc.run_ensemble(&replicate(&a0), m.steps, &dict)?;
    let eb = mc.run_ensemble(&replicate(&b0), m.steps, &dict)?;
    let mut gaps = Vec::with_capacity(m.steps);
    for k in 1..=m.steps {
        gaps.push(estimate_dual_lipschitz(&ea.at_step(k), &eb.at_step(k))?);
    }
    let coupling = mc.coupling_experiment(&a0, &b0, m.steps)?;
    let ks: Vec<usize> = (1..=m.steps).collect();
    let fit = fit_decay_rate(&ks, &gaps, m.window_start, m.window_end);
    let cks: Vec<usize> = (0..=m.steps).collect();
    let cfit = fit_decay_rate(&cks, &coupling, m.window_start, m.window_end);
    let mut series = Series::new("mixing", &["k", "d_k", "coupling_h1"]);
    series.rows.push(vec![0.0, f64::NAN, coupling[0]]);
    for k in 1..=m.steps {
        series.rows.push(vec![k as f64, gaps[k - 1], coupling[k]]);
    }
    let passed = matches!(&fit, Ok(f) if f.gamma > 0.0 && f.r_squared >= 0.9) && matches!(&cfit, Ok(f) if f.gamma > 0.0);
    let fit_json = |f: &Result<crate::markov::DecayFit>| match f {
        Ok(f) => serde_json::to_value(f).expect("fit serialises"),
        Err(e) => json!({ "error": e.to_string() }),
    };
    let metrics = json!({
        "chains": m.chains,
        "steps": m.steps,
        "observables": dict.len(),
        "window": [m.window_start, m.window_end],
        "mixing_fit": fit_json(&fit),
        "coupling_fit": fit_json(&cfit),
        "amplitude": cfg.noise.a,
    });
    Ok(Report::new(ExperimentKind::Mix, cfg, passed, metrics, vec![series]))
}

/// Outcome of one rank in the automatic selection.
#[derive(Clone, Debug, Serialize)]
pub struct RankTrial {
    pub l: usize,
    pub ratio: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Tries ranks in order (only `cfg.control.l` when set) and returns every
/// attempt, with the accepted controller last when one contracts.
pub fn select_rank<'a>(
    setup: &'a Setup,
    cfg: &RunConfig,
) -> Result<(Vec<RankTrial>, Option<(Controller<'a>, PeriodicSolution)>)> {
    let ccfg = cfg.control_config();
    let ranks: Vec<usize> = match cfg.control.l {
        Some(l) => vec![l],
        None => L_CANDIDATES.iter().copied().filter(|&l| l <= setup.basis.len()).collect(),
    };
    let mut trials = Vec::new();
    for l in ranks {
        let c = Controller::new(&setup.stepper, &setup.basis, ccfg.clone(), l)?;
        let p = match c.periodic_iteration() {
            Ok(p) => p,
            Err(e @ (Error::Cfl { .. } | Error::NonFinite(_))) => {
                // the projected system left the resolvable range: not contracting
                log::info!("rank {l}: {e}");
                trials.push(RankTrial { l, ratio: f64::INFINITY, residual: f64::INFINITY, iterations: 0, converged: false });
                continue;
            }
            Err(e) => return Err(e),
        };
        log::info!("rank {l}: ratio {:.4e}, residual {:.3e}", p.ratio(), p.residual);
        trials.push(RankTrial { l, ratio: p.ratio(), residual: p.residual, iterations: p.iterations, converged: p.converged });
        if p.converged && p.ratio() <= ccfg.contraction_target {
            return Ok((trials, Some((c, p))));
        }
    }
    Ok((trials, None))
}

fn control(cfg: &RunConfig) -> Result<Report> {
    let setup = Setup::new(cfg)?;
    let (ranks, chosen) = select_rank(&setup, cfg)?;
    let c = &cfg.control;
    let mut series = Series::new("control", &["trial", "ratio", "initial_distance", "final_distance", "consistency", "minimal_amplitude"]);
    let Some((ctrl, periodic)) = chosen else {
        let best = ranks.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
        let metrics = json!({
            "ranks": ranks,
            "best_periodic_ratio": best,
            "reason": "no rank gave a contracting periodic orbit",
        });
        return Ok(Report::new(ExperimentKind::Control, cfg, false, metrics, vec![series]));
    };
    let noise = cfg.noise_config();
    let mut ratios = Vec::with_capacity(c.trials);
    let mut amplitude: f64 = 0.0;
    for i in 0..c.trials {
        let t0 = random_initial_field(&setup.stepper, c.initial_radius, trial_seed(cfg.noise.seed, i as u64));
        let rep = ctrl.verify_property_c(&t0, c.horizon, &periodic)?;
        let a = rep.controls.minimal_amplitude(&noise);
        amplitude = amplitude.max(a);
        series.rows.push(vec![i as f64, rep.ratio, rep.initial_distance, rep.final_distance, rep.consistency, a]);
        ratios.push(rep.ratio);
    }
    let passes = ratios.iter().filter(|&&r| r <= c.ratio_gate).count();
    let best = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let metrics = json!({
        "ranks": ranks,
        "l": ctrl.rank(),
        "periodic_ratio": periodic.ratio(),
        "periodic_residual": periodic.residual,
        "ratios": ratios,
        "passes": passes,
        "required_passes": c.required_passes,
        "best_ratio": best,
        "reaches_one_twelfth": best <= 1.0 / 12.0,
        "minimal_amplitude": amplitude,
    });
    Ok(Report::new(ExperimentKind::Control, cfg, passes >= c.required_passes, metrics, vec![series]))
}

/// Sum of weighted forcings.
struct Combined<'a>(Vec<(&'a dyn Forcing, f64)>);

impl Forcing for Combined<'_> {
    fn add_spectral(&self, t: f64, scale: f64, out: &mut [Complex64]) {
        for (f, w) in &self.0 {
            f.add_spectral(t, scale * w, out);
        }
    }
}

/// Random control with coefficients `b_j xi_j`.
fn random_control(basis: &NoiseBasis, cfg: &RunConfig, seed: u64, k: u64) -> BasisForcing {
    BasisForcing::new(basis, &random_control_coeffs(basis, cfg, seed, k))
}

fn random_control_coeffs(basis: &NoiseBasis, cfg: &RunConfig, seed: u64, k: u64) -> Vec<f64> {
    let noise = cfg.noise_config();
    let stream = NoiseStream::new(seed, 1);
    (0..basis.len()).map(|j| noise.b(j) * stream.xi(k, j)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct DualityStats {
    pub dt: f64,
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

/// Duality residuals for `pairs` random `(zeta, psi_1)` on the trajectory
/// from a random state driven by noise sample 0.
pub fn duality_residuals(cfg: &RunConfig, pairs: usize) -> Result<DualityStats> {
    let setup = Setup::new(cfg)?;
    let seed = cfg.noise.seed;
    let (traj, _) = base_trajectory(&setup, cfg)?;
    let lin = LinearizedSolver::new(&setup.stepper, &traj)?;
    let zetas: Vec<BasisForcing> = (0..pairs).map(|i| random_control(&setup.basis, cfg, seed, i as u64)).collect();
    let refs: Vec<&dyn Forcing> = zetas.iter().map(|z| z as &dyn Forcing).collect();
    let thetas = lin.solve_tangent_many(&refs)?;
    let psis: Vec<Vec<Complex64>> = (0..pairs)
        .map(|i| random_smooth(&setup.grid, trial_seed(seed, 1000 + i as u64), 4, 4).to_spectral().into_coeffs())
        .collect();
    let theta_refs: Vec<&[Complex64]> = thetas.iter().map(|t| t.as_slice()).collect();
    let psi_refs: Vec<&[Complex64]> = psis.iter().map(|p| p.as_slice()).collect();
    let residuals: Vec<f64> = lin.duality_many(&refs, &theta_refs, &psi_refs)?.iter().map(|r| r.residual).collect();
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(DualityStats { dt: cfg.stepper.dt, residuals, max_residual })
}

/// Recorded unit interval from a random unit-radius state under noise
/// sample 0, with the noise sample.
fn base_trajectory(setup: &Setup, cfg: &RunConfig) -> Result<(crate::thermal::FrozenTrajectory, BasisForcing)> {
    let seed = cfg.noise.seed;
    let t0 = random_initial_field(&setup.stepper, 1.0, trial_seed(seed, 7));
    let s0 = setup.stepper.perturbation_of(&t0)?;
    let eta = sample_noise(0, &cfg.noise_config(), &setup.basis, &NoiseStream::new(seed, 0)).forcing().clone();
    let mut ws = setup.stepper.workspace();
    let res = setup.stepper.integrate_unit_spectral(&s0, &eta, true, None, &mut ws)?;
    Ok((res.trajectory.expect("recorded"), eta))
}

#[derive(Clone, Debug, Serialize)]
pub struct FiniteDifference {
    pub eps: Vec<f64>,
    /// `|(S(eta + eps zeta) - S(eta)) / eps - theta| / |theta|`.
    pub errors: Vec<f64>,
    pub slope: f64,
}

/// Finite-difference check of the tangent over `eps` log-spaced in
/// `[1e-5, 1e-2]`. The control is scaled so that its response has the size
/// of the end state, and perturbed runs replay the substep schedule of the
/// base run.
pub fn tangent_finite_difference(cfg: &RunConfig, points: usize) -> Result<FiniteDifference> {
    let setup = Setup::new(cfg)?;
    let seed = cfg.noise.seed;
    let (traj, eta) = base_trajectory(&setup, cfg)?;
    let lin = LinearizedSolver::new(&setup.stepper, &traj)?;
    let g = &setup.grid;
    let base = traj.perturbation(traj.len() - 1).to_vec();
    let s0 = traj.perturbation(0).to_vec();
    let raw = random_control_coeffs(&setup.basis, cfg, seed, 999);
    let theta_raw = lin.solve_tangent(&BasisForcing::new(&setup.basis, &raw), false)?.end;
    let (sn, rn) = (spectral_l2_sq(g, &base).sqrt(), spectral_l2_sq(g, &theta_raw).sqrt());
    let kappa = if sn > 0.0 && rn > 0.0 { sn / rn } else { 1.0 };
    let zeta = BasisForcing::new(&setup.basis, &raw.iter().map(|c| c * kappa).collect::<Vec<_>>());
    let theta: Vec<Complex64> = theta_raw.iter().map(|t| t * kappa).collect();
    let tn = spectral_l2_sq(g, &theta).sqrt();
    let mut eps = Vec::with_capacity(points);
    let mut errors = Vec::with_capacity(points);
    let mut ws = setup.stepper.workspace();
    for i in 0..points {
        let e = 10f64.powf(-5.0 + 3.0 * i as f64 / (points.max(2) - 1) as f64);
        let forcing = Combined(vec![(&eta, 1.0), (&zeta, e)]);
        let s = setup.stepper.integrate_unit_replay(&s0, &traj, &forcing, &mut ws)?.s_end;
        let d: Vec<Complex64> = s.iter().zip(&base).zip(&theta).map(|((a, b), t)| (a - b) / e - t).collect();
        eps.push(e);
        errors.push(spectral_l2_sq(g, &d).sqrt() / tn);
    }
    let pts: Vec<(f64, f64)> = eps.iter().zip(&errors).map(|(e, r)| (e.ln(), r.ln())).collect();
    let slope = linear_fit(&pts).map_or(f64::NAN, |f| f.0);
    Ok(FiniteDifference { eps, errors, slope })
}

/// Singular values of the control-to-state map at the configuration.
pub fn density(cfg: &RunConfig) -> Result<crate::tangent::GramReport> {
    let setup = Setup::new(cfg)?;
    let (traj, _) = base_trajectory(&setup, cfg)?;
    let lin = LinearizedSolver::new(&setup.stepper, &traj)?;
    lin.density_diagnostic_adjoint(&setup.basis, setup.basis.len(), cfg.adjoint.density_d, cfg.adjoint.max_vertical)
}

fn adjoint_check(cfg: &RunConfig) -> Result<Report> {
    let pairs = cfg.adjoint.pairs;
    let coarse = duality_residuals(cfg, pairs)?;
    let mut half = cfg.clone();
    half.stepper.dt = cfg.stepper.dt / 2.0;
    let fine = duality_residuals(&half, pairs)?;
    let order = (coarse.max_residual / fine.max_residual).log2();
    let fd = tangent_finite_difference(cfg, 7)?;
    let gram = density(cfg)?;
    let duality_ok = coarse.max_residual <= 1e-6 && fine.max_residual <= 1e-6;
    let slope_ok = (fd.slope - 1.0).abs() <= 0.1;
    let density_ok = gram.smallest() > 1e-10;
    let mut series = Series::new("duality", &["pair", "residual_dt", "residual_half_dt"]);
    for i in 0..pairs {
        series.rows.push(vec![i as f64, coarse.residuals[i], fine.residuals[i]]);
    }
    let mut fds = Series::new("finite_difference", &["eps", "relative_error"]);
    fds.rows = fd.eps.iter().zip(&fd.errors).map(|(e, r)| vec![*e, *r]).collect();
    let metrics = json!({
        "duality_max_residual": coarse.max_residual,
        "duality_max_residual_half_dt": fine.max_residual,
        "duality_observed_order": order,
        "fd_slope": fd.slope,
        "density_smallest_singular_value": gram.smallest(),
        "density_singular_values": gram.singular_values,
        "duality_ok": duality_ok,
        "fd_slope_ok": slope_ok,
        "density_ok": density_ok,
    });
    Ok(Report::new(ExperimentKind::AdjointCheck, cfg, duality_ok && slope_ok && density_ok, metrics, vec![series, fds]))
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Random temperature with zero walls and uniform interior values.
fn random_interior(g: &Arc<Grid>, rng: &mut ChaCha8Rng) -> ScalarField {
    let pl = g.plane_len();
    let n = g.phys_len();
    let values = (0..n).map(|i| if i < pl || i >= n - pl { 0.0 } else { uniform(rng) }).collect();
    ScalarField::from_values(g, values, Dirichlet::ZERO).expect("sizes agree")
}

#[derive(Clone, Debug, Serialize)]
pub struct StokesValidation {
    pub oracle_max_relative_error: f64,
    pub profile_max_relative: f64,
    pub adjoint_max_relative: f64,
}

/// `M` against the dense primitive-variable solve, `M(profile) = 0` and the
/// adjoint identity, each over random inputs.
pub fn stokes_validation(cfg: &RunConfig, fields: usize, profiles: usize, pairs: usize) -> Result<StokesValidation> {
    let g = cfg.build_grid()?;
    let ra = cfg.physics.ra;
    let st = StokesSolver::new(&g, ra);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed ^ 0x570c);
    let (sl, n3) = (g.spec_plane_len(), g.n3());
    let mut oracle_err: f64 = 0.0;
    for _ in 0..fields {
        let t = random_interior(&g, &mut rng).to_spectral();
        let u = st.apply_m_spectral(&t);
        let mut o = SpectralVelocity::zeros(&g);
        for i1 in 0..g.n1() / 2 + 1 {
            for i2 in 0..g.n2() {
                let Some(ms) = st.mode(i1, i2) else { continue };
                let s = i1 * g.n2() + i2;
                let (k1, k2) = ms.wavevector();
                let col: Vec<Complex64> = (0..=n3).map(|j| t.coeffs()[j * sl + s]).collect();
                let (a, b, c) = oracle::primitive_solve(n3, k1, k2, ra, &col);
                for j in 0..=n3 {
                    o.components[0].coeffs_mut()[j * sl + s] = a[j];
                    o.components[1].coeffs_mut()[j * sl + s] = b[j];
                    o.components[2].coeffs_mut()[j * sl + s] = c[j];
                }
            }
        }
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..3 {
            let d: Vec<Complex64> =
                u.components[c].coeffs().iter().zip(o.components[c].coeffs()).map(|(x, y)| x - y).collect();
            num += spectral_l2_sq(&g, &d);
            den += spectral_l2_sq(&g, o.components[c].coeffs());
        }
        oracle_err = oracle_err.max((num / den).sqrt());
    }
    let mut profile_max: f64 = 0.0;
    for _ in 0..profiles {
        let coef: Vec<f64> = (0..6).map(|_| uniform(&mut rng)).collect();
        let p = ScalarField::from_profile(&g, |z| {
            coef[0] + coef[1] * z + coef.iter().skip(2).enumerate().map(|(n, a)| a * ((n + 1) as f64 * std::f64::consts::PI * z).sin()).sum::<f64>()
        });
        let u = st.apply_m(&p)?;
        profile_max = profile_max.max(u.norm() / p.inner(&p).sqrt());
    }
    let mut adjoint_max: f64 = 0.0;
    for _ in 0..pairs {
        let t = random_interior(&g, &mut rng);
        let f = crate::field::VectorField::new(random_interior(&g, &mut rng), random_interior(&g, &mut rng), random_interior(&g, &mut rng));
        let lhs = st.apply_m(&t)?.inner(&f);
        let rhs = t.inner(&st.apply_m_star(&f)?);
        adjoint_max = adjoint_max.max((lhs - rhs).abs() / (t.inner(&t).sqrt() * f.norm()));
    }
    Ok(StokesValidation { oracle_max_relative_error: oracle_err, profile_max_relative: profile_max, adjoint_max_relative: adjoint_max })
}

fn stokes_validate(cfg: &RunConfig, fields: usize, profiles: usize, pairs: usize) -> Result<Report> {
    let v = stokes_validation(cfg, fields, profiles, pairs)?;
    let passed = v.oracle_max_relative_error <= 1e-9 && v.profile_max_relative <= 1e-10 && v.adjoint_max_relative <= 1e-10;
    Ok(Report::new(ExperimentKind::StokesValidate, cfg, passed, serde_json::to_value(&v)?, Vec::new()))
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseValidation {
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub ks: f64,
    /// Largest `|phi_j|` on planes at or above `x3 = c`; must be exactly 0.
    pub max_outside_layer: f64,
}

impl NoiseValidation {
    pub fn passed(&self) -> bool {
        self.mean.abs() <= 3.0 * self.mean_se
            && (self.variance - 1.0 / 7.0).abs() <= 3.0 * self.variance_se
            && self.ks <= 0.01
            && self.max_outside_layer == 0.0
    }
}

/// Moments of `moment_draws` samples of `xi`, the Kolmogorov-Smirnov
/// distance of `ks_draws` samples, and the support of every basis element.
pub fn noise_validation(cfg: &RunConfig, moment_draws: usize, ks_draws: usize) -> Result<NoiseValidation> {
    let setup_grid = cfg.build_grid()?;
    let noise = cfg.noise_config();
    let basis = NoiseBasis::build(&noise, &setup_grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise.seed ^ 0x9e37);
    let xs: Vec<f64> = (0..moment_draws).map(|_| sample_xi(&mut rng)).collect();
    let n = xs.len() as f64;
    let mean = crate::field::pairwise_sum(&xs) / n;
    let c2: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
    let c4: Vec<f64> = xs.iter().map(|x| (x - mean).powi(4)).collect();
    let variance = crate::field::pairwise_sum(&c2) / (n - 1.0);
    let m4 = crate::field::pairwise_sum(&c4) / n;
    let mut ks_sample: Vec<f64> = (0..ks_draws).map(|_| sample_xi(&mut rng)).collect();
    ks_sample.sort_by(f64::total_cmp);
    let kn = ks_sample.len() as f64;
    let ks = ks_sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = xi_cdf(x);
            (f - i as f64 / kn).abs().max(((i + 1) as f64 / kn - f).abs())
        })
        .fold(0.0, f64::max);
    let g = &setup_grid;
    let top = (g.layer_height() * g.n3() as f64).round() as usize;
    let mut outside: f64 = 0.0;
    for j in 0..basis.len() {
        for t in [0.0, 0.37, 1.0] {
            let f = basis.element_field(j, t);
            for p in top..=g.n3() {
                outside = outside.max(f.plane(p).iter().fold(0.0, |m, v| m.max(v.abs())));
            }
        }
    }
    Ok(NoiseValidation {
        mean,
        mean_se: (variance / n).sqrt(),
        variance,
        variance_se: ((m4 - variance * variance) / n).sqrt(),
        ks,
        max_outside_layer: outside,
    })
}

fn noise_validate(cfg: &RunConfig, moment_draws: usize, ks_draws: usize) -> Result<Report> {
    let v = noise_validation(cfg, moment_draws, ks_draws)?;
    Ok(Report::new(ExperimentKind::NoiseValidate, cfg, v.passed(), serde_json::to_value(&v)?, Vec::new()))
}

/// Entry times are consistent with logarithmic rather than linear growth in
/// `R`: over sorted radii, the rise from the second to the last radius is
/// at most ten times the rise from the first to the second (a linear law
/// gives about 110 for radii 10, 100, 1000; a logarithmic one about 2).
pub fn sublinear(entries: &[(f64, usize)]) -> bool {
    if entries.len() < 3 {
        return true;
    }
    let t: Vec<f64> = entries.iter().map(|e| e.1 as f64).collect();
    let first = t[1] - t[0];
    let rest = t[t.len() - 1] - t[1];
    rest <= 10.0 * first.max(1.0)
}

fn dissipativity(cfg: &RunConfig) -> Result<Report> {
    let setup = Setup::new(cfg)?;
    let mc = setup.chain(cfg)?;
    let d = &cfg.dissipativity;
    let seed = cfg.noise.seed;
    let start = initial_state(&setup, &InitSpec::Conduction, seed, u32::MAX as u64)?;
    let radius = mc.calibrate_ball(&start, d.burn_in, d.ball_factor)?;
    let mut radii = d.radii.clone();
    radii.sort_by(f64::total_cmp);
    let rep = mc.dissipativity_experiment(&radii, radius, d.budget, seed)?;
    let entered: Vec<(f64, usize)> = rep.entries.iter().filter_map(|e| e.entry.map(|k| (e.initial_radius, k))).collect();
    let all_entered = entered.len() == rep.entries.len();
    let monotone = entered.windows(2).all(|w| w[0].1 <= w[1].1);
    let passed = all_entered && monotone && sublinear(&entered);
    let mut series = Series::new("entry_times", &["initial_radius", "entry", "initial_h1"]);
    for e in &rep.entries {
        series.rows.push(vec![e.initial_radius, e.entry.map_or(f64::NAN, |k| k as f64), e.norms[0]]);
    }
    let metrics = json!({
        "ball_radius": radius,
        "entries": rep.entries.iter().map(|e| json!({ "initial_radius": e.initial_radius, "entry": e.entry })).collect::<Vec<_>>(),
        "slope_vs_ln_r_plus_2": rep.slope,
        "intercept": rep.intercept,
        "all_entered": all_entered,
        "non_decreasing": monotone,
    });
    Ok(Report::new(ExperimentKind::Dissipativity, cfg, passed, metrics, vec![series]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.grid.n1 = 8;
        cfg.grid.n2 = 8;
        cfg.grid.n3 = 16;
        cfg.physics.ra = 1e3;
        cfg.stepper.dt = 1.0 / 32.0;
        cfg.noise.m = 8;
        cfg
    }

    #[test]
    fn kinds_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn finite_differences_converge_at_first_order() {
        let mut cfg = small();
        cfg.physics.ra = 3e3;
        let fd = tangent_finite_difference(&cfg, 4).unwrap();
        assert!((fd.slope - 1.0).abs() < 0.1, "slope {} errors {:?}", fd.slope, fd.errors);
    }

    #[test]
    fn zero_step_simulation_is_empty() {
        let mut cfg = small();
        cfg.simulate.steps = 0;
        let r = run_experiment(ExperimentKind::Simulate, &cfg, None).unwrap();
        assert!(r.passed);
        assert!(r.series[0].rows.is_empty());
        assert_eq!(r.config_hash, cfg.hash());
    }

    #[test]
    fn reports_are_reproducible() {
        let mut cfg = small();
        cfg.simulate.steps = 2;
        cfg.simulate.init = "random:0.5".into();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        run_experiment(ExperimentKind::Simulate, &cfg, Some(&a)).unwrap();
        run_experiment(ExperimentKind::Simulate, &cfg, Some(&b)).unwrap();
        for f in ["report.json", "energy.csv", "profile.csv", "final.bmix"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
        }
        // resuming from the checkpoint continues the chain
        let g = cfg.build_grid().unwrap();
        let (st, _) = checkpoint::load_chain(&g, a.join("final.bmix")).unwrap();
        assert_eq!(st.k, 2);
    }

    #[test]
    fn sublinear_rule() {
        assert!(sublinear(&[(10.0, 3), (100.0, 5), (1000.0, 7)]));
        assert!(!sublinear(&[(10.0, 1), (100.0, 2), (1000.0, 30)]));
        assert!(sublinear(&[(10.0, 0), (100.0, 0), (1000.0, 0)]));
    }
}
