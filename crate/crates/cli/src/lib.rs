//! `uaf` command-line driver.
//!
//! [`dispatch`] parses an argv vector and returns the process exit code:
//! 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use uaf_core::dataset::Dataset;
use uaf_core::env::EnvConfig;
use uaf_core::fsutil::write_atomic;
use uaf_core::mask::ChannelGroupMap;
use uaf_core::report::{emit_svg, flag_rows, read_report};
use uaf_core::train::{
    generate_dataset, loss_csv, mode_averaging_probe, read_env_sidecar, rollout_with, rollouts_csv, run_ablation,
    train_policy, AblationConfig, Checkpoint, ChunkStrategy, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "uaf", version, about = "Sensor-ablation framework for action-chunking policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic master dataset of scripted demonstrations.
    GenData(GenDataArgs),
    /// Print dataset statistics and the synchronization report.
    Inspect(InspectArgs),
    /// Train one sensor configuration and write its checkpoint.
    Train(TrainArgs),
    /// Roll out a checkpoint in the environment and write per-trial results.
    Eval(EvalArgs),
    /// Train and evaluate several configurations on the same dataset.
    Ablate(AblateArgs),
    /// Redraw the Pareto scatter from a report.csv.
    Report(ReportArgs),
}

/// Environment overrides shared by every subcommand that builds an env.
#[derive(Debug, Args)]
pub struct EnvArgs {
    /// EnvConfig JSON file.
    #[arg(long)]
    pub env: Option<PathBuf>,
    /// Tactile signal-to-noise ratio in dB; `inf` disables the noise.
    #[arg(long, allow_negative_numbers = true)]
    pub snr_db: Option<f64>,
    /// Two drop boxes, chosen 50/50 by the demonstrator.
    #[arg(long)]
    pub bimodal: bool,
    /// Place the object at its canonical position instead of sampling it.
    #[arg(long)]
    pub fixed_objects: bool,
}

impl EnvArgs {
    fn apply(&self, base: EnvConfig) -> Result<EnvConfig> {
        let mut env = match &self.env {
            Some(p) => EnvConfig::load(p)?,
            None => base,
        };
        if let Some(s) = self.snr_db {
            env.snr_db = if s == f64::INFINITY { None } else { Some(s) };
        }
        if self.bimodal {
            env.bimodal = true;
        }
        if self.fixed_objects {
            env.randomize_objects = false;
        }
        env.validate()?;
        Ok(env)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory (must not already hold a dataset).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Print machine-readable JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

/// Training knobs shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct TrainKnobs {
    /// TrainConfig JSON file; the flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Channel-group map JSON (tag letter → q channel indices).
    #[arg(long)]
    pub groups: Option<PathBuf>,
}

impl TrainKnobs {
    fn config(&self, seed: u64) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainConfig::default(),
        };
        cfg.seed = seed;
        if let Some(s) = self.steps {
            cfg.total_steps = s;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn groups(&self) -> Result<ChannelGroupMap> {
        Ok(match &self.groups {
            Some(p) => ChannelGroupMap::load(p)?,
            None => ChannelGroupMap::default(),
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Policy name, e.g. `WA-P`.
    #[arg(long)]
    pub policy: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path; `loss.csv` is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainKnobs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Trial `i` resets the environment with `seed + i`.
    #[arg(long, default_value_t = 10_000)]
    pub seed: u64,
    /// `replan`, `open-loop` or `ensemble:<weight>`.
    #[arg(long, default_value = "ensemble:0.1")]
    pub strategy: String,
    /// Output rollouts CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the mode-averaging probe table to this path.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Comma-separated policy names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub policy: Vec<String>,
    /// Training seed shared by every row.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Base environment seed of the evaluation trials.
    #[arg(long, default_value_t = 10_000)]
    pub eval_seed: u64,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value = "ensemble:0.1")]
    pub strategy: String,
    /// Sweep directory; one subdirectory per policy plus report files.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub train: TrainKnobs,
    #[command(flatten)]
    pub env: EnvArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.csv written by `ablate`.
    #[arg(long)]
    pub report: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    pub out: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let env = a.env.apply(EnvConfig::default())?;
    let ds = generate_dataset(&env, a.episodes, a.seed, &a.out)?;
    println!("wrote {} episodes to {}", ds.len(), a.out.display());
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let ds = Dataset::open(&a.dataset)?;
    let stats = ds.stats()?;
    let report = ds.validate_sync()?;
    if a.json {
        let v = serde_json::json!({ "stats": stats, "sync": report });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        let m = ds.manifest();
        println!("dataset {} ({} fps)", m.dataset_name, m.fps);
        println!(
            "episodes {}  frames {}  duration {:.1} s{}",
            stats.episodes,
            stats.frames,
            stats.duration_seconds,
            if stats.data_limited { "  (data-limited)" } else { "" }
        );
        for (name, bytes) in &stats.stream_bytes {
            println!("  {name:<18} {bytes:>12} bytes");
        }
        let bad = report.episodes.iter().filter(|e| !e.ok()).count();
        println!("sync: {} ({bad} failing episodes)", if report.ok { "ok" } else { "FAILED" });
        for i in report.issues() {
            println!("  episode {}: {}", i.episode_id, i.message);
        }
    }
    if !report.ok {
        bail!("dataset failed synchronization checks");
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let ds = Dataset::open(&a.dataset)?;
    let cfg = a.train.config(a.seed)?;
    let out = train_policy(&ds, &a.policy, &cfg, &a.train.groups()?)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    out.checkpoint.save(&a.out)?;
    write_text(&a.out.with_file_name("loss.csv"), &loss_csv(&out.loss_log))?;
    let last = out.loss_log.last();
    println!(
        "trained {} for {} steps in {:.1} s (final l1 {:.4})",
        a.policy,
        out.checkpoint.steps,
        out.wall_seconds,
        last.map_or(f64::NAN, |r| r.recon_l1)
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let env = a.env.apply(ck.env.clone().unwrap_or_default())?;
    let strategy: ChunkStrategy = a.strategy.parse()?;
    let r = rollout_with(&ck, &env, a.trials, a.seed, strategy)?;
    write_text(&a.out, &rollouts_csv(&r))?;
    println!(
        "{}: success {:.1}% over {} trials, execution {:.3} min",
        ck.policy,
        r.success_rate_pct,
        r.n(),
        r.exec_time_min
    );
    if let Some(p) = &a.probe {
        let probe = mode_averaging_probe(&ck, &env, a.trials, a.seed)?;
        write_text(p, &probe.to_csv())?;
        println!(
            "probe: {} of {} trials end nearer the midpoint than either box",
            probe.midpoint_majority(),
            probe.rows.len()
        );
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let ds = Dataset::open(&a.dataset)?;
    let env = a.env.apply(read_env_sidecar(&ds)?.unwrap_or_default())?;
    let cfg = AblationConfig {
        train: a.train.config(a.seed)?,
        env,
        trials: a.trials,
        eval_seed: a.eval_seed,
        strategy: a.strategy.parse()?,
        groups: a.train.groups()?,
    };
    let report = run_ablation(&ds, &a.policy, &cfg, Some(&a.out))?;
    println!("{:<16} {:>5} {:>9} {:>9} {:>7}", "policy", "dim", "exec_min", "success", "pareto");
    for r in report.report_rows() {
        println!(
            "{:<16} {:>5} {:>9.3} {:>8.1}% {:>7}",
            r.policy,
            r.state_dim,
            r.exec_time_min,
            r.success_rate_pct,
            if r.pareto { "*" } else { "" }
        );
    }
    for f in &report.failures {
        eprintln!("{} failed: {}", f.policy, f.error);
    }
    if report.rows.is_empty() {
        bail!("every configuration failed");
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut rows = read_report(&a.report)?;
    if rows.is_empty() {
        bail!("{} has no rows", a.report.display());
    }
    flag_rows(&mut rows)?;
    emit_svg(&rows, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Inspect(a) => inspect(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    }
}

/// Parses `argv` (program name first), runs the command, returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
