//! TOML run configuration with defaults, validation and a content hash.
//!
//! Every section and key is optional; absent keys take the defaults below.
//! Unknown keys are rejected so typos do not silently fall back.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::ControlConfig;
use crate::error::{Error, Result};
use crate::field::Dirichlet;
use crate::grid::Grid;
use crate::noise::NoiseConfig;
use crate::thermal::StepperConfig;

/// Smallest `n3` accepted by a run configuration.
pub const MIN_N3: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub c: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { n1: 32, n2: 32, n3: 32, c: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsSection {
    pub ra: f64,
    pub t_bottom: f64,
    pub t_top: f64,
}

impl Default for PhysicsSection {
    fn default() -> Self {
        PhysicsSection { ra: 1e4, t_bottom: 1.0, t_top: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepperSection {
    pub dt: f64,
    pub cfl_limit: f64,
    pub adaptive: bool,
}

impl Default for StepperSection {
    fn default() -> Self {
        StepperSection { dt: 1.0 / 256.0, cfl_limit: 0.5, adaptive: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub a: f64,
    pub m: usize,
    pub s: f64,
    pub b0: f64,
    pub seed: u64,
    pub time_degree: usize,
    pub vertical_modes: Option<usize>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = NoiseConfig::default();
        NoiseSection { a: d.a, m: d.m, s: d.s, b0: d.b0, seed: d.seed, time_degree: d.time_degree, vertical_modes: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub steps: usize,
    /// `conduction`, `random:R` or `checkpoint:path`.
    pub init: String,
    /// Writes `checkpoint_k.bmix` every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { steps: 10, init: "conduction".into(), checkpoint_every: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixSection {
    pub chains: usize,
    pub steps: usize,
    pub window_start: usize,
    pub window_end: usize,
    pub observables: usize,
    pub dictionary_seed: u64,
    /// Second ensemble start: `conduction`, `random:R` or `checkpoint:path`.
    pub init: String,
}

impl Default for MixSection {
    fn default() -> Self {
        MixSection {
            chains: 64,
            steps: 25,
            window_start: 5,
            window_end: 25,
            observables: crate::markov::DICTIONARY_SIZE,
            dictionary_seed: 0x5eed,
            init: "random:1".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    /// Projection rank; absent means automatic selection.
    pub l: Option<usize>,
    pub eps1: Option<f64>,
    pub eps2: Option<f64>,
    /// Horizon `n` of the control problem.
    pub horizon: usize,
    pub trials: usize,
    pub required_passes: usize,
    pub ratio_gate: f64,
    /// Radius of the ball the random initial fields are drawn from.
    pub initial_radius: f64,
    pub periodic_tol: f64,
    pub max_periodic_iterations: usize,
}

impl Default for ControlSection {
    fn default() -> Self {
        let d = ControlConfig::default();
        ControlSection {
            l: None,
            eps1: None,
            eps2: None,
            horizon: 8,
            trials: 10,
            required_passes: 9,
            ratio_gate: 0.5,
            initial_radius: 1.0,
            periodic_tol: d.periodic_tol,
            max_periodic_iterations: d.max_periodic_iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DissipativitySection {
    pub radii: Vec<f64>,
    pub burn_in: usize,
    pub ball_factor: f64,
    pub budget: usize,
}

impl Default for DissipativitySection {
    fn default() -> Self {
        DissipativitySection { radii: vec![10.0, 100.0, 1000.0], burn_in: 10, ball_factor: 1.2, budget: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjointSection {
    pub pairs: usize,
    pub density_d: usize,
    pub max_vertical: usize,
}

impl Default for AdjointSection {
    fn default() -> Self {
        AdjointSection { pairs: 20, density_d: 20, max_vertical: 4 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub physics: PhysicsSection,
    pub stepper: StepperSection,
    pub noise: NoiseSection,
    pub simulate: SimulateSection,
    pub mix: MixSection,
    pub control: ControlSection,
    pub dissipativity: DissipativitySection,
    pub adjoint: AdjointSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse(&text)
    }

    /// Parses and validates TOML text.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every rule and reports all violations at once. Warnings are
    /// logged, not returned.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let g = &self.grid;
        for (key, n) in [("grid.n1", g.n1), ("grid.n2", g.n2)] {
            if n < 8 || n % 2 != 0 {
                errs.push(format!("{key} = {n} must be even and >= 8"));
            }
        }
        if g.n3 < MIN_N3 {
            errs.push(format!("grid.n3 = {} must be >= {MIN_N3}", g.n3));
        }
        if !(g.c > 0.0 && g.c < 1.0) {
            errs.push(format!("grid.c = {} must lie in (0, 1)", g.c));
        } else {
            let cn = g.c * g.n3 as f64;
            if (cn - cn.round()).abs() > 1e-9 {
                errs.push(format!("grid.c * grid.n3 = {cn} must be an integer"));
            } else if cn.round() < 2.0 {
                errs.push(format!("grid.c * grid.n3 = {cn} must be >= 2"));
            }
        }
        let p = &self.physics;
        if !(p.ra >= 0.0 && p.ra.is_finite()) {
            errs.push(format!("physics.ra = {} must be finite and >= 0", p.ra));
        }
        if !p.t_bottom.is_finite() || !p.t_top.is_finite() {
            errs.push("physics.t_bottom and physics.t_top must be finite".into());
        } else if p.t_bottom < p.t_top {
            log::warn!("physics.t_bottom < physics.t_top: stably stratified, no convective instability");
        }
        let s = &self.stepper;
        let n = (1.0 / s.dt).round();
        if !(s.dt > 0.0 && s.dt <= 1.0) || (n * s.dt - 1.0).abs() > 1e-12 {
            errs.push(format!("stepper.dt = {} must be 1/N for an integer N", s.dt));
        }
        if !(s.cfl_limit > 0.0) {
            errs.push(format!("stepper.cfl_limit = {} must be > 0", s.cfl_limit));
        }
        let nz = &self.noise;
        if !(nz.a >= 0.0 && nz.a.is_finite()) {
            errs.push(format!("noise.a = {} must be finite and >= 0", nz.a));
        }
        if nz.m == 0 {
            errs.push("noise.m must be >= 1".into());
        }
        if !(nz.s >= 0.0) {
            errs.push(format!("noise.s = {} must be >= 0", nz.s));
        }
        if !(nz.b0 > 0.0) {
            errs.push(format!("noise.b0 = {} must be > 0", nz.b0));
        }
        let mx = &self.mix;
        if mx.chains < 2 {
            errs.push(format!("mix.chains = {} must be >= 2", mx.chains));
        }
        if mx.window_start >= mx.window_end || mx.window_end > mx.steps {
            errs.push(format!(
                "mix window [{}, {}] must be increasing and end by mix.steps = {}",
                mx.window_start, mx.window_end, mx.steps
            ));
        }
        if mx.observables == 0 {
            errs.push("mix.observables must be >= 1".into());
        }
        if let Err(e) = InitSpec::parse(&mx.init) {
            errs.push(format!("mix.init: {e}"));
        }
        if let Err(e) = InitSpec::parse(&self.simulate.init) {
            errs.push(format!("simulate.init: {e}"));
        }
        let c = &self.control;
        if c.horizon == 0 {
            errs.push("control.horizon must be >= 1".into());
        }
        if c.required_passes > c.trials {
            errs.push(format!("control.required_passes = {} exceeds control.trials = {}", c.required_passes, c.trials));
        }
        if let Some(l) = c.l {
            if l == 0 || l > nz.m {
                errs.push(format!("control.l = {l} must lie in 1..=noise.m"));
            }
        }
        let d = &self.dissipativity;
        if d.radii.iter().any(|r| !(*r >= 0.0)) {
            errs.push("dissipativity.radii must be >= 0".into());
        }
        if !(d.ball_factor >= 1.0) {
            errs.push(format!("dissipativity.ball_factor = {} must be >= 1", d.ball_factor));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Hex SHA-256 of the canonical JSON form; covers every field.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn build_grid(&self) -> Result<Arc<Grid>> {
        Grid::new(self.grid.n1, self.grid.n2, self.grid.n3, self.grid.c)
    }

    pub fn boundary(&self) -> Dirichlet {
        Dirichlet::new(self.physics.t_bottom, self.physics.t_top)
    }

    pub fn stepper_config(&self) -> StepperConfig {
        StepperConfig {
            dt: self.stepper.dt,
            ra: self.physics.ra,
            boundary: self.boundary(),
            cfl_limit: self.stepper.cfl_limit,
            adaptive: self.stepper.adaptive,
        }
    }

    /// Noise configuration; the quadrature uses the stepper's base nodes.
    pub fn noise_config(&self) -> NoiseConfig {
        let n = &self.noise;
        NoiseConfig {
            a: n.a,
            m: n.m,
            s: n.s,
            b0: n.b0,
            seed: n.seed,
            time_degree: n.time_degree,
            vertical_modes: n.vertical_modes,
            time_nodes: (1.0 / self.stepper.dt).round() as usize,
        }
    }

    pub fn control_config(&self) -> ControlConfig {
        let c = &self.control;
        ControlConfig {
            l: c.l,
            eps1: c.eps1,
            eps2: c.eps2,
            periodic_tol: c.periodic_tol,
            max_periodic_iterations: c.max_periodic_iterations,
            seed: self.noise.seed,
            ..ControlConfig::default()
        }
    }
}

/// Initial condition of a chain ensemble.
#[derive(Clone, Debug, PartialEq)]
pub enum InitSpec {
    Conduction,
    /// `Tbar + R f` with `f` a unit-`H^1` smooth random field.
    Random(f64),
    Checkpoint(String),
}

impl InitSpec {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "conduction" {
            return Ok(InitSpec::Conduction);
        }
        if let Some(r) = s.strip_prefix("random:") {
            return match r.parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => Ok(InitSpec::Random(v)),
                _ => Err(format!("bad radius in '{s}'")),
            };
        }
        if let Some(p) = s.strip_prefix("checkpoint:") {
            if !p.is_empty() {
                return Ok(InitSpec::Checkpoint(p.to_string()));
            }
        }
        Err(format!("'{s}' is not conduction, random:R or checkpoint:path"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.grid.n3, 32);
        assert_eq!(cfg.noise_config().time_nodes, 256);
        let partial = RunConfig::parse("[physics]\nra = 2000.0\n").unwrap();
        assert_eq!(partial.physics.ra, 2000.0);
        assert_eq!(partial.grid, GridSection::default());
    }

    #[test]
    fn reversed_temperatures_are_accepted() {
        assert!(RunConfig::parse("[physics]\nt_bottom = 0.0\nt_top = 1.0\n").is_ok());
    }

    #[test]
    fn fractional_layer_names_the_key() {
        let e = RunConfig::parse("[grid]\nn3 = 42\nc = 0.25\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("grid.c * grid.n3 = 10.5"), "{msg}");
    }

    #[test]
    fn all_violations_are_listed() {
        let e = RunConfig::parse("[grid]\nn1 = 7\nn3 = 8\n[noise]\nm = 0\n").unwrap_err();
        match e {
            Error::Config(v) => {
                assert!(v.iter().any(|s| s.contains("grid.n1")));
                assert!(v.iter().any(|s| s.contains("grid.n3")));
                assert!(v.iter().any(|s| s.contains("noise.m")));
            }
            other => panic!("{other}"),
        }
        assert!(RunConfig::parse("[grid]\nnn = 3\n").is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.mix.dictionary_seed += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn init_specs() {
        assert_eq!(InitSpec::parse("conduction").unwrap(), InitSpec::Conduction);
        assert_eq!(InitSpec::parse("random:2.5").unwrap(), InitSpec::Random(2.5));
        assert_eq!(InitSpec::parse("checkpoint:a.bin").unwrap(), InitSpec::Checkpoint("a.bin".into()));
        assert!(InitSpec::parse("random:x").is_err());
        assert!(InitSpec::parse("hot").is_err());
    }
}
