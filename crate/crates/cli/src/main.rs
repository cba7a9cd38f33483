//! `epvs`: run view-selection experiments and inspect their pieces.
//!
//! Exit status is 0 on success, 2 for configuration or usage errors and 3 for
//! failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use epvs_core::config::Config;
use epvs_core::edges::canny_edges_quantile;
use epvs_core::experiment::{run_experiment, Experiment};
use epvs_core::io::{read_projection, read_volume, write_atomic, write_projection, write_volume};
use epvs_core::projector::forward_project;
use epvs_core::recon::{reconstruct_with, SirtParams};
use epvs_core::scoring::{lambda_schedule, DispersionParams, ObjectiveParams, ScoreBreakdown};
use epvs_core::selection::{score_candidates, Policy, SelectionState};
use epvs_core::sim::make_phantom;
use epvs_core::{Error, Projection};

const THREADS_ENV: &str = "EPVS_THREADS";

#[derive(Parser)]
#[command(name = "epvs", version, about = "Adaptive cone-beam CT view selection experiments")]
struct Cli {
    /// worker threads (overrides EPVS_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// experiment configuration (TOML)
    #[arg(long)]
    config: PathBuf,

    /// override every random seed in the configuration
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<Config, Failure> {
        let mut cfg = Config::load(&self.config).map_err(Failure::config)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run selection policies and write trace and summary CSVs
    Run {
        #[command(flatten)]
        common: Common,
        /// comma separated subset of epvs,uniform,eavs
        #[arg(long, default_value = "epvs,uniform,eavs")]
        policies: String,
        /// output directory (defaults to output.dir from the config)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the CAD and ground-truth volumes
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project a volume at one angle
    Project {
        #[command(flatten)]
        common: Common,
        /// rotation angle, degrees
        #[arg(long)]
        angle: f64,
        /// volume to project; the configured ground truth when omitted
        #[arg(long)]
        volume: Option<PathBuf>,
        /// polychromatic noisy measurement followed by linearization
        #[arg(long)]
        simulate: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// SIRT reconstruction from projection files
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        projections: Vec<PathBuf>,
    },
    /// Print the objective breakdown of every remaining candidate
    Score {
        #[command(flatten)]
        common: Common,
        /// comma separated grid indices already acquired
        #[arg(long, default_value = "")]
        selected: String,
        /// current reconstruction; the CAD volume when omitted
        #[arg(long)]
        recon: Option<PathBuf>,
        /// CAD weight; the schedule value for the next step when omitted
        #[arg(long)]
        lambda: Option<f64>,
        /// write CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        Failure::Config(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config { .. }) => Failure::Config(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().with_context(|| format!("{THREADS_ENV}={v} is not a thread count"))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn parse_policies(list: &str) -> Result<Vec<Policy>, Failure> {
    let mut out = Vec::new();
    for item in list.split(',').filter(|s| !s.trim().is_empty()) {
        let p: Policy = item.parse().map_err(Failure::config)?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Failure::Config(anyhow::anyhow!("no policies given")));
    }
    Ok(out)
}

fn parse_indices(list: &str) -> Result<Vec<usize>, Failure> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Failure::Config(anyhow::anyhow!("'{s}' is not a grid index")))
        })
        .collect()
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { common, policies, out } => {
            let cfg = common.load()?;
            let policies = parse_policies(&policies)?;
            let out = out.unwrap_or_else(|| cfg.output.dir.clone());
            let report = run_experiment(cfg, &policies, &out)?;
            for f in &report.files {
                println!("{}", f.display());
            }
        }
        Command::Phantom { common, out } => {
            let cfg = common.load()?;
            let (cad, truth) = make_phantom(&cfg.phantom_spec())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_volume(&out.join("cad.epv"), &cad)?;
            write_volume(&out.join("truth.epv"), &truth)?;
        }
        Command::Project {
            common,
            angle,
            volume,
            simulate,
            out,
        } => {
            let cfg = common.load()?;
            let geom = cfg.geometry()?;
            let proj = match (volume, simulate) {
                (Some(path), false) => forward_project(&read_volume(&path)?, &geom, angle)?,
                (None, false) => forward_project(&make_phantom(&cfg.phantom_spec())?.1, &geom, angle)?,
                (path, true) => simulated(cfg, path.as_deref(), angle)?,
            };
            write_projection(&out, &proj, geom.det_pitch())?;
        }
        Command::Reconstruct {
            common,
            iterations,
            out,
            projections,
        } => {
            let cfg = common.load()?;
            let geom = cfg.geometry()?;
            let projs: Vec<Projection> = projections
                .iter()
                .map(|p| read_projection(p).map(|(proj, _)| proj))
                .collect::<Result<_, _>>()?;
            let params = SirtParams {
                iterations: iterations.unwrap_or(cfg.recon.eval_iterations),
                ..cfg.recon.eval_sirt()
            };
            let x = reconstruct_with(&projs, &geom, &params)?;
            write_volume(&out, &x)?;
        }
        Command::Score {
            common,
            selected,
            recon,
            lambda,
            out,
        } => {
            let cfg = common.load()?;
            let selected = parse_indices(&selected)?;
            let csv = score_table(cfg, &selected, recon.as_deref(), lambda)?;
            match out {
                Some(path) => write_atomic(&path, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

/// Measurement of `volume` (or the truth) with the configured spectrum,
/// noise and linearization.
fn simulated(cfg: Config, volume: Option<&Path>, angle: f64) -> Result<Projection, Failure> {
    let exp = Experiment::new(cfg)?;
    let target = match volume {
        Some(p) => read_volume(p)?,
        None => exp.truth().clone(),
    };
    let raw = epvs_core::sim::simulate_measurement(&target, exp.geometry(), angle, exp.spectrum(), exp.config().spectrum.seed)?;
    Ok(epvs_core::sim::linearize(&raw, exp.linearization())?)
}

fn score_table(cfg: Config, selected: &[usize], recon: Option<&Path>, lambda: Option<f64>) -> Result<String, Failure> {
    let (n_init, budget) = (cfg.selection.n_init, cfg.selection.budget);
    let exp = Experiment::new(cfg)?;
    let sc = &exp.config().scoring;
    let dmat = exp.distance_matrix()?;
    let mut state = SelectionState::new(*exp.geometry(), exp.grid().clone(), Arc::clone(&dmat))?;
    for &i in selected {
        state.push(i)?;
    }
    let edge = |v: &epvs_core::Volume| canny_edges_quantile(v, sc.canny_sigma, sc.canny_low_quantile, sc.canny_high_quantile);
    let edge_cad = edge(exp.cad())?;
    let edge_recon = match recon {
        Some(p) => {
            let v = read_volume(p)?;
            state.recon = v.clone();
            edge(&v)?
        }
        None => edge_cad.clone(),
    };
    let lambda = match lambda {
        Some(l) if (0.0..=1.0).contains(&l) => l,
        Some(l) => return Err(Failure::Config(anyhow::anyhow!("lambda {l} outside [0, 1]"))),
        None if budget > n_init => lambda_schedule(selected.len() + 1, n_init, budget)?,
        None => 1.0,
    };
    let cad_scale = positive_or_one(exp.cad_alignment()?.iter().copied().fold(0.0, f64::max));
    let unit = ObjectiveParams {
        softmax: sc.softmax()?,
        dispersion: DispersionParams::auto(&dmat, sc.gamma_scale)?,
        lambda,
        cad_scale,
        recon_scale: 1.0,
    };
    // normalise the reconstruction term by its largest raw value
    let raw = score_candidates(&state, &edge_cad, &edge_recon, &unit)?;
    let recon_scale = positive_or_one(raw.iter().map(|c| c.score.i_recon).fold(0.0, f64::max));
    let cands = raw.into_iter().map(|c| {
        let s = c.score;
        (c.index, ScoreBreakdown::combine(s.i_cad, s.i_recon / recon_scale, s.dispersion, s.lambda))
    });
    let mut out = String::from("index,angle,i_cad,i_recon,dispersion,lambda,total\n");
    for (index, s) in cands {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            index,
            exp.grid().angle(index),
            s.i_cad,
            s.i_recon,
            s.dispersion,
            s.lambda,
            s.total
        ));
    }
    Ok(out)
}

fn positive_or_one(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        1.0
    }
}
