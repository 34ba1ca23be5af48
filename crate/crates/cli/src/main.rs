mod config;
mod plot;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use erank::gram::{build_grid, BoxDomain, QuadratureScheme};
use erank::rfm::{run_method, FeatureConfig, MethodReport};
use erank::theory::{compress, planted_instance, probe_lemma};
use erank::train::{train_run, RunAbort, TrajectoryRecord};
use rayon::prelude::*;
use serde::Serialize;

use config::ExperimentConfig;

/// Overrides the root directory for run outputs.
const OUT_ENV: &str = "ERANK_OUT";

#[derive(Parser)]
#[command(name = "erank", version, about = "ε-rank experiments: training trajectories, RFM/ELM comparison, compression certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a preset or config file and record loss / ε-rank trajectories.
    Run {
        #[arg(long)]
        preset: Option<String>,
        /// TOML config; may name a preset to start from.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replace the seed list (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// List run presets.
    Presets,
    /// Render trajectory CSVs to an SVG chart.
    Plot {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "loss and ε-rank")]
        title: String,
    },
    /// Random feature method vs extreme learning machine.
    RfmCompare {
        #[arg(long, default_value = "ex3.2")]
        preset: String,
        /// 900 features over 3×3 cells instead of 256 over 2×2.
        #[arg(long)]
        full: bool,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compression certificate and submatrix bound experiments.
    Theory {
        #[command(subcommand)]
        command: TheoryCommand,
    },
}

#[derive(Subcommand)]
enum TheoryCommand {
    /// Compress a random tanh combination with a planted ε-rank.
    Compress {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        p: usize,
        /// Size of the perturbation that separates the dependent functions.
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        /// Gauss points on [-1, 1].
        #[arg(long, default_value_t = 60)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample Haar orthonormal matrices and record the best square-block σ_min.
    Probe {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        p: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Abort(String),
    Io(String),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<erank::Error> for Failure {
    fn from(e: erank::Error) -> Self {
        match e {
            erank::Error::Config(_) | erank::Error::Domain(_) | erank::Error::UnsupportedActivation(_) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Io(other.to_string()),
        }
    }
}

fn out_root(explicit: Option<PathBuf>, name: &str, fallback: PathBuf) -> PathBuf {
    explicit.unwrap_or_else(|| match std::env::var_os(OUT_ENV) {
        Some(root) => PathBuf::from(root).join(name),
        None => fallback,
    })
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    steps_completed: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    final_rank: Option<usize>,
    first_loss_below: BTreeMap<String, Option<usize>>,
    first_rank_at_least_95pct: Option<usize>,
    abort: Option<RunAbort>,
}

#[derive(Serialize)]
struct RunSummary {
    name: String,
    width: usize,
    seeds: Vec<SeedSummary>,
}

fn run_seed(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<SeedSummary, Failure> {
    let grid = cfg.grid()?;
    let net = cfg.init.apply(&cfg.blank_network()?, seed, &cfg.task.domain())?;
    let layers = cfg.train.per_layer.then_some(cfg.network.depth);
    let mut csv = BufWriter::new(File::create(out.join(format!("seed_{seed}.csv")))?);
    let mut jsonl = BufWriter::new(File::create(out.join(format!("seed_{seed}.jsonl")))?);
    writeln!(csv, "{}", TrajectoryRecord::csv_header(layers))?;
    let mut io_err = None;
    let outcome = train_run(&net, &cfg.task, &cfg.optimizer, &cfg.train, &grid, seed, |r| {
        let res = writeln!(csv, "{}", r.csv_row()).and_then(|_| writeln!(jsonl, "{}", r.json_line()));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    csv.flush()?;
    jsonl.flush()?;
    fs::write(out.join(format!("seed_{seed}.ckpt")), outcome.final_network.to_checkpoint())?;
    let thresholds = ["1e-1", "1e-2", "1e-3", "1e-4"];
    Ok(SeedSummary {
        seed,
        steps_completed: outcome.loss_history.len(),
        initial_loss: outcome.initial_loss(),
        final_loss: outcome.final_loss,
        final_rank: outcome.final_rank(),
        first_loss_below: thresholds
            .iter()
            .map(|t| (t.to_string(), outcome.first_loss_below(t.parse().unwrap())))
            .collect(),
        first_rank_at_least_95pct: outcome.first_rank_at_least((0.95 * cfg.network.width as f64).ceil() as usize),
        abort: outcome.abort,
    })
}

fn cmd_run(
    preset: Option<String>,
    config_path: Option<PathBuf>,
    seeds: Vec<u64>,
    steps: Option<usize>,
    out: Option<PathBuf>,
    workers: Option<usize>,
) -> Result<(), Failure> {
    if preset.is_none() && config_path.is_none() {
        return Err(Failure::Config(format!(
            "give --preset or --config; available presets:\n{}",
            config::preset_listing()
        )));
    }
    let text = match &config_path {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let path_str = config_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let file = text.as_deref().map(|t| (path_str.as_str(), t));
    let mut cfg = config::resolve(file, preset.as_deref()).map_err(Failure::Config)?;
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    cfg.out = out_root(out, &cfg.name, cfg.out.clone());
    cfg.validate().map_err(Failure::Config)?;

    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("resolved.toml"), cfg.to_toml())?;
    let threads = match cfg.workers {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        w => w,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.min(cfg.seeds.len()))
        .build()
        .map_err(|e| Failure::Io(e.to_string()))?;
    let results: Vec<Result<SeedSummary, Failure>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let r = run_seed(&cfg, seed, &cfg.out);
                if let Ok(s) = &r {
                    eprintln!(
                        "{} seed {seed}: final loss {:?}, final rank {:?}",
                        cfg.name, s.final_loss, s.final_rank
                    );
                }
                r
            })
            .collect()
    });
    let mut summaries = Vec::new();
    for r in results {
        summaries.push(r?);
    }
    let summary = RunSummary {
        name: cfg.name.clone(),
        width: cfg.network.width,
        seeds: summaries,
    };
    fs::write(
        cfg.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;

    let mut series = Vec::new();
    for s in &summary.seeds {
        let path = cfg.out.join(format!("seed_{}.csv", s.seed));
        if let Ok(mut t) = plot::read_trajectory(&path) {
            t.label = format!("seed {}", s.seed);
            series.push(t);
        }
    }
    if !series.is_empty() {
        fs::write(cfg.out.join("trajectory.svg"), plot::render_svg(&series, &cfg.name))?;
    }
    eprintln!("wrote {}", cfg.out.display());

    let aborted: Vec<String> = summary
        .seeds
        .iter()
        .filter_map(|s| s.abort.as_ref().map(|a| format!("seed {} at iteration {}: {}", s.seed, a.iteration, a.detail)))
        .collect();
    if !aborted.is_empty() {
        return Err(Failure::Abort(aborted.join("\n")));
    }
    Ok(())
}

fn cmd_plot(files: Vec<PathBuf>, out: PathBuf, title: String) -> Result<(), Failure> {
    let series = files
        .iter()
        .map(|f| plot::read_trajectory(f))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Config)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&out, plot::render_svg(&series, &title))?;
    Ok(())
}

#[derive(Serialize)]
struct RfmReport {
    preset: String,
    partition_of_unity: &'static str,
    feature: &'static str,
    gamma: f64,
    trunc_tol: f64,
    epsilon: f64,
    collocation_per_axis: usize,
    eval_per_axis: usize,
    rows: Vec<(u64, MethodReport)>,
    rank_rfm_above_elm: usize,
    error_rfm_below_elm: usize,
}

fn cmd_rfm(preset: String, full: bool, seeds: Vec<u64>, gamma: f64, out: Option<PathBuf>) -> Result<(), Failure> {
    if preset != "ex3.2" {
        return Err(Failure::Config(format!("rfm-compare knows only preset 'ex3.2', got '{preset}'")));
    }
    if !(gamma > 0.0) {
        return Err(Failure::Config(format!("gamma must be > 0, got {gamma}")));
    }
    let seeds = if seeds.is_empty() { (0..5).collect() } else { seeds };
    let (cells, total) = if full { (3, 900) } else { (2, 256) };
    let tol = 1e-12;
    let domain = BoxDomain::cube(-1.0, 1.0, 2)?;
    let colloc = build_grid(&domain, QuadratureScheme::Trapezoid, 63, None)?.points;
    let eval = build_grid(&domain, QuadratureScheme::Trapezoid, 65, None)?;
    let cfg = FeatureConfig { gamma };
    let mut rows = Vec::new();
    let (mut rank_wins, mut err_wins) = (0, 0);
    for &seed in &seeds {
        let (_, elm) = run_method(&domain, 1, total, cfg, seed, &colloc, &eval, tol)?;
        let (_, rfm) = run_method(&domain, cells, total / (cells * cells), cfg, seed, &colloc, &eval, tol)?;
        eprintln!(
            "seed {seed}: rank rfm {} elm {}, relative error rfm {:.3e} elm {:.3e}",
            rfm.eps_rank, elm.eps_rank, rfm.relative_l2_error, elm.relative_l2_error
        );
        rank_wins += usize::from(rfm.eps_rank > elm.eps_rank);
        err_wins += usize::from(rfm.relative_l2_error < elm.relative_l2_error);
        rows.push((seed, elm));
        rows.push((seed, rfm));
    }
    let report = RfmReport {
        preset: if full { "ex3.2-full".into() } else { preset },
        partition_of_unity: "indicator functions of the cells",
        feature: "tanh(gamma (a . x_local + b)), x_local in [-1,1]^2 per cell, a uniform on the unit circle, b ~ U(-1,1)",
        gamma,
        trunc_tol: tol,
        epsilon: tol,
        collocation_per_axis: 63,
        eval_per_axis: 65,
        rows,
        rank_rfm_above_elm: rank_wins,
        error_rfm_below_elm: err_wins,
    };
    let dir = out_root(out, &report.preset, PathBuf::from("runs").join(&report.preset));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report).expect("report serializes"))?;
    let mut csv = String::new();
    csv.push_str(&format!("# partition of unity: {}\n# features: {}\n", report.partition_of_unity, report.feature));
    csv.push_str("seed,method,cells,features,eps_rank,l2_error,relative_l2_error,solve_ms\n");
    for (seed, r) in &report.rows {
        csv.push_str(&format!(
            "{seed},{},{},{},{},{:e},{:e},{}\n",
            r.method, r.cells, r.features, r.eps_rank, r.l2_error, r.relative_l2_error, r.solve_ms
        ));
    }
    fs::write(dir.join("report.csv"), csv)?;
    println!("rank rfm > elm: {rank_wins}/{}; error rfm < elm: {err_wins}/{}", seeds.len(), seeds.len());
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn emit(json: String, out: Option<PathBuf>) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_theory(cmd: TheoryCommand) -> Result<(), Failure> {
    match cmd {
        TheoryCommand::Compress { n, p, delta, m, seed, out } => {
            let grid = build_grid(&BoxDomain::cube(-1.0, 1.0, 1)?, QuadratureScheme::Gauss, m, None)?;
            let (features, beta, eps) = planted_instance(n, p, delta, &grid, seed)?;
            let r = compress(&features, &beta, &grid, eps)?;
            emit(serde_json::to_string_pretty(&r).expect("result serializes"), out)
        }
        TheoryCommand::Probe { n, p, trials, seed, out } => {
            let r = probe_lemma(n, p, trials, seed)?;
            emit(serde_json::to_string_pretty(&r).expect("probe serializes"), out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { preset, config, seeds, steps, out, workers } => cmd_run(preset, config, seeds, steps, out, workers),
        Command::Presets => {
            println!("{}", config::preset_listing());
            Ok(())
        }
        Command::Plot { files, out, title } => cmd_plot(files, out, title),
        Command::RfmCompare { preset, full, seeds, gamma, out } => cmd_rfm(preset, full, seeds, gamma, out),
        Command::Theory { command } => cmd_theory(command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Abort(m)) => {
            eprintln!("run aborted:\n{m}");
            ExitCode::from(3)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
