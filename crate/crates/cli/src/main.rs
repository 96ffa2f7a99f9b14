mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::ExperimentConfig;
use ringtdrc::capacity::CapacityConfig;
use ringtdrc::phys::{ghz_to_rad_per_s, PhysicalParams};
use ringtdrc::sweep::{grid_sweep, run_experiment, ExperimentOutcome, SweepResult};
use ringtdrc::tasks::{self, TaskKind};
use ringtdrc::tcmt::{lorentzian_check, rk4_errors};
use serde_json::json;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(name = "ringtdrc", version, about = "WDM microring time-delay reservoir simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario preset; overrides the one named in the config.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory. Falls back to the config, then RINGTDRC_OUT, then ./out.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Replace the seed list by consecutive seeds starting here.
    #[arg(long)]
    seed_base: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and score every channel.
    Run(Common),
    /// Evaluate a scenario over a grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid preset (region-map, delta-phi, channel-scaling).
        #[arg(long)]
        grid: Option<String>,
    },
    /// Linear memory and information processing capacity per channel.
    Mc {
        #[command(flatten)]
        common: Common,
        /// Highest polynomial order.
        #[arg(long, default_value_t = 3)]
        h_max: u32,
        /// Longest delay.
        #[arg(long, default_value_t = 50)]
        k_max: usize,
    },
    /// Spread of the nonlinear detuning over a grid.
    Detuning {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        grid: Option<String>,
    },
    /// Write a task dataset as CSV.
    GenTask {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 4250)]
        len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Channel SNR in dB for channel equalization; omit for 32 dB.
        #[arg(long)]
        snr_db: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and run the linear-cavity self-tests.
    Validate(Common),
}

const LORENTZ_TOL: f64 = 1e-6;
const RK4_MIN_RATIO: f64 = 12.0;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(c) => run(&c),
        Command::Sweep { common, grid } => sweep(&common, grid.as_deref(), false),
        Command::Mc { common, h_max, k_max } => mc(&common, h_max, k_max),
        Command::Detuning { common, grid } => sweep(&common, grid.as_deref(), true),
        Command::GenTask { task, len, seed, snr_db, out } => gen_task(task, len, seed, snr_db, out),
        Command::Validate(c) => validate(&c),
    }
}

struct Loaded {
    cfg: ExperimentConfig,
    scenario: ringtdrc::sweep::Scenario,
    out: PathBuf,
    workers: usize,
}

fn load(c: &Common) -> Result<Loaded> {
    let cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let scenario = cfg.scenario(c.preset.as_deref(), c.seed_base)?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .or_else(|| std::env::var_os("RINGTDRC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let workers = c.workers.or(cfg.workers).unwrap_or(1).max(1);
    Ok(Loaded { cfg, scenario, out, workers })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("cannot start the worker pool")
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("cannot write {}", path.display()))?))
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sidecar(dir: &Path, name: &str, mut body: serde_json::Value) -> Result<()> {
    body["timestamp_unix_s"] = json!(timestamp());
    serde_json::to_writer_pretty(create(dir, name)?, &body)?;
    Ok(())
}

fn write_scores(dir: &Path, out: &ExperimentOutcome) -> Result<()> {
    let mut w = csv_writer(create(dir, "scores.csv")?);
    w.write_record(["channel", "task", "metric", "seed", "value", "std", "self_pulsing"])?;
    for c in &out.channels {
        for s in &c.per_seed {
            w.write_record([
                c.channel.to_string(),
                c.task.to_string(),
                c.metric.clone(),
                s.seed.to_string(),
                s.value().to_string(),
                String::new(),
                s.self_pulsing.to_string(),
            ])?;
        }
        w.write_record([
            c.channel.to_string(),
            c.task.to_string(),
            c.metric.clone(),
            "mean".into(),
            c.mean.to_string(),
            c.std.to_string(),
            c.self_pulsing.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn csv_writer<W: std::io::Write>(w: W) -> csv::Writer<W> {
    csv::Writer::from_writer(w)
}

fn run(c: &Common) -> Result<ExitCode> {
    let ctx = load(c)?;
    let out = pool(ctx.workers)?.install(|| run_experiment(&ctx.scenario))?;
    write_scores(&ctx.out, &out)?;
    sidecar(&ctx.out, "run.json", json!({ "scenario": ctx.scenario, "outcome": out }))?;
    for ch in &out.channels {
        println!("{ch}");
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(c: &Common, grid_flag: Option<&str>, detuning: bool) -> Result<ExitCode> {
    let mut ctx = load(c)?;
    let grid = ctx.cfg.grid(grid_flag)?;
    ctx.scenario.detuning |= detuning;
    let res = grid_sweep(&grid, &ctx.scenario, ctx.workers)?;
    let (csv_name, json_name, res) = if detuning {
        let rows = res.rows.iter().filter(|r| r.metric == "sigma_nl_hz" || !r.is_ok()).cloned().collect();
        ("detuning.csv", "detuning.json", SweepResult { axis_labels: res.axis_labels.clone(), rows })
    } else {
        ("sweep.csv", "sweep.json", res)
    };
    res.write_csv(create(&ctx.out, csv_name)?)?;
    sidecar(&ctx.out, json_name, json!({ "scenario": ctx.scenario, "grid": grid, "workers": ctx.workers }))?;
    let failed = res.rows.iter().filter(|r| !r.is_ok()).count();
    for ch in 0..res.n_channels() {
        let rows: Vec<_> = res.rows.iter().filter(|r| r.channel == ch && r.is_ok()).collect();
        let best = rows.iter().min_by(|a, b| a.mean.total_cmp(&b.mean));
        let worst = rows.iter().max_by(|a, b| a.mean.total_cmp(&b.mean));
        if let (Some(lo), Some(hi)) = (best, worst) {
            println!(
                "ch{ch} {} {}: min {:.6} at {:?}, max {:.6} at {:?}, {} points",
                lo.task,
                lo.metric,
                lo.mean,
                lo.coords,
                hi.mean,
                hi.coords,
                rows.len()
            );
        }
    }
    if failed > 0 {
        eprintln!("{failed} grid rows failed; see the status column");
    }
    Ok(ExitCode::SUCCESS)
}

fn mc(c: &Common, h_max: u32, k_max: usize) -> Result<ExitCode> {
    let ctx = load(c)?;
    let mut sc = ctx.scenario.clone();
    sc.capacity = Some(sc.capacity.unwrap_or(CapacityConfig { h_max, k_max, lambda: sc.lambda, ..CapacityConfig::default() }));
    sc.seeds.truncate(1);
    let out = pool(ctx.workers)?.install(|| run_experiment(&sc))?;
    let mut summary = Vec::new();
    for ch in &out.channels {
        let k = ch.channel;
        let report = ch.capacity.as_ref().context("capacity report missing")?;
        report.write_csv(create(&ctx.out, &format!("capacity_ch{k}.csv"))?)?;
        println!(
            "ch{k} {:<8} C_lin {:.4}, per order {:?}, total {:.4}",
            ch.task.name(),
            report.c_lin,
            report.per_order.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            report.total
        );
        summary.push(json!({ "channel": k, "task": ch.task, "report": report.summary_json() }));
    }
    sidecar(&ctx.out, "capacity.json", json!({ "scenario": sc, "seed": sc.seeds[0], "channels": summary }))?;
    Ok(ExitCode::SUCCESS)
}

fn gen_task(task: TaskKind, len: usize, seed: u64, snr_db: Option<f64>, out: Option<PathBuf>) -> Result<ExitCode> {
    let ds = match task {
        TaskKind::Narma10 => tasks::gen_narma10(seed, len)?,
        TaskKind::Swc => tasks::gen_swc(seed, len)?,
        TaskKind::ChannelEq => tasks::gen_cheq(seed, len, Some(snr_db.unwrap_or(32.0)))?,
        TaskKind::Radar => tasks::gen_radar_surrogate(seed, len, 2)?,
    };
    let dir = out
        .or_else(|| std::env::var_os("RINGTDRC_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let name = format!("task_{}_seed{seed}.csv", task.name());
    ds.write_csv(create(&dir, &name)?)?;
    println!("{} symbols of {task} written to {}", ds.len(), dir.join(name).display());
    Ok(ExitCode::SUCCESS)
}

fn validate(c: &Common) -> Result<ExitCode> {
    let ctx = load(c)?;
    let params: &PhysicalParams = &ctx.scenario.params;
    println!("config ok: scenario `{}`, {} channel(s), {} seed(s)", ctx.scenario.name, ctx.scenario.channels.len(), ctx.scenario.seeds.len());
    if ctx.cfg.grid.is_some() {
        println!("grid ok: {} points", ctx.cfg.grid(None)?.points().len());
    }

    let detunings: Vec<f64> = (0..11).map(|i| -5.0 + i as f64).collect();
    let pts = lorentzian_check(params, &detunings, 4_000)?;
    let worst = pts.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    let lorentz_ok = worst < LORENTZ_TOL;
    println!("{} lorentzian oracle: max rel error {worst:.3e} over {} detunings", verdict(lorentz_ok), pts.len());

    let errs = rk4_errors(params, ghz_to_rad_per_s(30.0), 400e-12, &[4e-12, 2e-12, 1e-12, 0.5e-12])?;
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let rk4_ok = ratios.iter().all(|r| *r >= RK4_MIN_RATIO);
    println!("{} rk4 order: error ratios {:?}", verdict(rk4_ok), ratios.iter().map(|r| (r * 100.0).round() / 100.0).collect::<Vec<_>>());

    if !(lorentz_ok && rk4_ok) {
        bail!("self-test failed");
    }
    Ok(ExitCode::SUCCESS)
}

fn verdict(ok: bool) -> &'static str {
    if ok { "PASS" } else { "FAIL" }
}
