//! `cvgl`: dataset generation, experiment runs, evaluation, reports and
//! single-sample solves.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cvgl_core::feature_net::{
    forward_pyramid, identity_pyramid, load_checkpoint, Branch, CHECKPOINT_MANIFEST,
};
use cvgl_core::federation::{
    load_models, run_experiment, write_csv, ExperimentConfig, MetricsRow, METRICS_HEADERS,
};
use cvgl_core::geometry::Pose;
use cvgl_core::lm_solver::{solve_coarse_to_fine, Problem, SolverConfig};
use cvgl_core::metrics::compute_metrics_with;
use cvgl_core::synthetic::{load_sample, load_world, make_client_datasets, WorldConfig};
use cvgl_core::tensor::Graph;
use cvgl_core::training::{evaluate_pose_errors, pose_error};

mod report;

#[derive(Parser)]
#[command(
    name = "cvgl",
    version,
    about = "Federated cross-view geo-localization simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate client datasets and the held-out test set.
    GenData {
        /// World configuration JSON; defaults apply to missing keys.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one scenario described by an experiment configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate saved checkpoints on a dataset's test set.
    Eval {
        /// A checkpoint directory, or a directory of them as written by `run`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge metrics.csv files under a directory into a comparison table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Also write recall-vs-round SVG charts next to the table.
        #[arg(long)]
        svg: bool,
    },
    /// Solve one sample and print the result.
    Solve {
        /// Path of the sample's aerial or ground tensor file.
        #[arg(long)]
        sample: PathBuf,
        /// Learned features; identity features when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dump_trace: Option<PathBuf>,
    },
}

/// Marks failures caused by the user's configuration (exit code 2).
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| ConfigError(format!("parsing {}: {e}", path.display())).into())
}

/// Library configuration errors become [`ConfigError`].
fn lib<T>(r: cvgl_core::Result<T>) -> Result<T> {
    r.map_err(|e| match e.root() {
        cvgl_core::Error::Config(_) => ConfigError(e.to_string()).into(),
        _ => anyhow::Error::new(e),
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<ConfigError>()) {
        2
    } else {
        3
    }
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: WorldConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    lib(cfg.validate())?;
    let world = lib(make_client_datasets(&cfg, out))?;
    let n: usize = world.clients.iter().map(|c| c.len()).sum::<usize>() + world.test.len();
    println!(
        "wrote {n} samples ({} clients + test) to {}",
        world.clients.len(),
        out.display()
    );
    Ok(())
}

fn run(config: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: ExperimentConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    // Relative paths in the config resolve against its directory.
    let base = config.parent().unwrap_or(Path::new("."));
    cfg.data_dir = base.join(&cfg.data_dir);
    cfg.out_dir = base.join(&cfg.out_dir);
    lib(cfg.validate())?;
    let bundle = lib(run_experiment(&cfg))?;
    if let Some(last) = bundle.reports.last() {
        for r in &last.recalls {
            println!(
                "{:<13} {:>4} {:>7.2}",
                r.family.name(),
                r.threshold,
                r.value_percent
            );
        }
    }
    println!("results in {}", cfg.out_dir.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (models, meta) = if checkpoint.join(CHECKPOINT_MANIFEST).exists() {
        let (p, m) = lib(load_checkpoint(checkpoint))?;
        (vec![p], m.meta)
    } else {
        let models = lib(load_models(checkpoint))?;
        let first = ["model", "model_client_0"]
            .iter()
            .map(|n| checkpoint.join(n))
            .find(|p| p.exists());
        let meta = match first {
            Some(p) => lib(load_checkpoint(&p))?.1.meta,
            None => Default::default(),
        };
        (models, meta)
    };
    let world = lib(load_world(data))?;
    let solver = SolverConfig::default();
    let mut errors = Vec::new();
    for m in &models {
        errors.extend(lib(evaluate_pose_errors(m, &world.test, &solver))?);
    }
    let report = lib(compute_metrics_with(
        &errors,
        &cvgl_core::metrics::DEFAULT_THRESHOLDS_M,
        &cvgl_core::metrics::DEFAULT_THRESHOLDS_DEG,
    ))?;
    lib(report.check())?;
    let scenario = meta
        .get("scenario")
        .cloned()
        .unwrap_or_else(|| "eval".into());
    let round = meta.get("rounds").and_then(|r| r.parse().ok()).unwrap_or(0);
    let rows: Vec<MetricsRow> = report
        .recalls
        .iter()
        .map(|r| MetricsRow {
            scenario: scenario.clone(),
            round,
            metric_family: r.family.name().to_string(),
            threshold: r.threshold,
            value_percent: r.value_percent,
        })
        .collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    lib(write_csv(out, &rows, &METRICS_HEADERS))?;
    for r in &report.recalls {
        println!(
            "{:<13} {:>4} {:>7.2}",
            r.family.name(),
            r.threshold,
            r.value_percent
        );
    }
    Ok(())
}

fn solve(sample: &Path, checkpoint: Option<&Path>, dump: Option<&Path>) -> Result<()> {
    let s = lib(load_sample(sample)).with_context(|| format!("loading {}", sample.display()))?;
    let mut g = Graph::new();
    let (sat, grd) = match checkpoint {
        Some(dir) => {
            let (params, _) = lib(load_checkpoint(dir))?;
            let nodes = params.to_graph_frozen(&mut g);
            let a = g.constant(s.aerial.clone());
            let b = g.constant(s.ground.clone());
            (
                lib(forward_pyramid(&mut g, a, &nodes, Branch::Sat))?,
                lib(forward_pyramid(&mut g, b, &nodes, Branch::Grd))?,
            )
        }
        None => (
            lib(identity_pyramid(&mut g, &s.aerial))?,
            lib(identity_pyramid(&mut g, &s.ground))?,
        ),
    };
    let problem = lib(Problem::new(&mut g, &sat, &grd, &s.intrinsics, &s.georef))?;
    let init = g.constant(s.init_pose.to_tensor());
    let out = lib(solve_coarse_to_fine(
        &mut g,
        &problem,
        init,
        &SolverConfig::default(),
    ))?;
    let show = |p: &Pose| {
        format!(
            "x {:8.3} m  y {:8.3} m  yaw {:8.3} deg",
            p.x_m,
            p.y_m,
            p.yaw_rad.to_degrees()
        )
    };
    println!("init  {}", show(&s.init_pose));
    println!("final {}", show(&out.pose));
    println!("gt    {}", show(&s.gt_pose));
    let e = pose_error(&out.pose, &s.gt_pose);
    println!(
        "error lateral {:.3} m, longitudinal {:.3} m, azimuth {:.3} deg after {} iterations",
        e.lateral_m,
        e.longitudinal_m,
        e.yaw_deg,
        out.trace.entries.len()
    );
    if let Some(path) = dump {
        fs::write(path, lib(out.trace.to_json())?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(&config, &out, seed),
        Command::Run { config, seed } => run(&config, seed),
        Command::Eval {
            checkpoint,
            data,
            out,
        } => eval(&checkpoint, &data, &out),
        Command::Report { input, svg } => {
            if !input.is_dir() {
                bail!(ConfigError(format!(
                    "{} is not a directory",
                    input.display()
                )));
            }
            let table = report::run(&input, svg)?;
            print!("{table}");
            Ok(())
        }
        Command::Solve {
            sample,
            checkpoint,
            dump_trace,
        } => solve(&sample, checkpoint.as_deref(), dump_trace.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Clap exits with code 2 on usage errors.
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
