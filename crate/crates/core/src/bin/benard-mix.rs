//! `benard-mix <subcommand> --config path [flags]`
//!
//! Exit codes: 0 when the experiment's gate passes, 1 when it fails or the
//! run errors, 2 for configuration and usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use benard_mix::config::{InitSpec, RunConfig};
use benard_mix::experiment::{run_experiment, ExperimentKind};
use benard_mix::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "benard-mix", version, about = "Randomly forced infinite-Prandtl convection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration; defaults are used for absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for report.json, CSV series and checkpoints.
    #[arg(long, visible_alias = "out-dir", default_value = "out")]
    out: PathBuf,
    /// Overrides noise.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the chain and records energy diagnostics.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// conduction | random:R | checkpoint:path
        #[arg(long)]
        init: Option<String>,
        /// Chain checkpoint every this many steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Two ensembles with common noise and a same-noise coupling.
    Mix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        init: Option<String>,
    },
    /// Builds controls towards a periodic target and checks contraction.
    Control {
        #[command(flatten)]
        common: Common,
        /// Projection rank; automatic selection when absent.
        #[arg(long)]
        l: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Duality identity, tangent finite differences and density diagnostic.
    AdjointCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Stokes operator against a dense primitive-variable solve.
    StokesValidate {
        #[command(flatten)]
        common: Common,
    },
    /// Noise coefficient law and basis support.
    NoiseValidate {
        #[command(flatten)]
        common: Common,
    },
    /// Entry times into the absorbing ball from large initial fields.
    Dissipativity {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.noise.seed = s;
    }
    Ok(cfg)
}

fn prepare(cmd: &Command) -> Result<(ExperimentKind, RunConfig, PathBuf), Error> {
    let (kind, common) = match cmd {
        Command::Simulate { common, .. } => (ExperimentKind::Simulate, common),
        Command::Mix { common, .. } => (ExperimentKind::Mix, common),
        Command::Control { common, .. } => (ExperimentKind::Control, common),
        Command::AdjointCheck { common } => (ExperimentKind::AdjointCheck, common),
        Command::StokesValidate { common } => (ExperimentKind::StokesValidate, common),
        Command::NoiseValidate { common } => (ExperimentKind::NoiseValidate, common),
        Command::Dissipativity { common } => (ExperimentKind::Dissipativity, common),
    };
    let mut cfg = load(common)?;
    let check_init = |s: &str| InitSpec::parse(s).map(|_| s.to_string()).map_err(|e| Error::Config(vec![format!("--init: {e}")]));
    match cmd {
        Command::Simulate { steps, init, checkpoint_every, .. } => {
            if let Some(s) = steps {
                cfg.simulate.steps = *s;
            }
            if let Some(e) = checkpoint_every {
                cfg.simulate.checkpoint_every = *e;
            }
            if let Some(i) = init {
                cfg.simulate.init = check_init(i)?;
            }
        }
        Command::Mix { chains, steps, init, .. } => {
            if let Some(c) = chains {
                cfg.mix.chains = *c;
            }
            if let Some(s) = steps {
                cfg.mix.steps = *s;
            }
            if let Some(i) = init {
                cfg.mix.init = check_init(i)?;
            }
        }
        Command::Control { l, trials, .. } => {
            if l.is_some() {
                cfg.control.l = *l;
            }
            if let Some(t) = trials {
                cfg.control.trials = *t;
                cfg.control.required_passes = cfg.control.required_passes.min(*t);
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok((kind, cfg, common.out.clone()))
}

fn thread_pool() -> Result<(), Error> {
    let Ok(v) = std::env::var("BENARD_MIX_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(vec![format!("BENARD_MIX_THREADS = '{v}' is not a positive integer")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (kind, cfg, out) = match thread_pool().and_then(|_| prepare(&cli.command)) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(kind, &cfg, Some(&out)) {
        Ok(report) => {
            println!("{}", report.to_json());
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
