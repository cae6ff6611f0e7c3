//! Sequential sweep over sensor configurations on one master dataset.

use std::path::Path;

use super::rollout::{rollout_with, rollouts_csv, trial_seed, ChunkStrategy, RolloutResult};
use super::{io_err, loss_csv, train_policy, TrainConfig, TrainError, TrainOutcome};
use crate::dataset::Dataset;
use crate::env::EnvConfig;
use crate::fsutil::write_atomic;
use crate::mask::{parse_policy_name, ChannelGroupMap, MaskError};
use crate::report::{emit_report, flag_rows, ReportRow};

/// Everything a sweep row shares with its siblings.
#[derive(Debug, Clone)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub env: EnvConfig,
    pub trials: usize,
    /// Base seed of the evaluation trials; trial `i` uses `eval_seed + i`
    /// in every row.
    pub eval_seed: u64,
    pub strategy: ChunkStrategy,
    pub groups: ChannelGroupMap,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub report: ReportRow,
    pub outcome: TrainOutcome,
    pub rollout: RolloutResult,
}

impl AblationRow {
    pub fn trial_seeds(&self) -> Vec<u64> {
        self.rollout.trials.iter().map(|t| t.seed).collect()
    }
}

/// A row that failed to train or evaluate; the sweep carries on.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub policy: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub failures: Vec<SweepFailure>,
}

impl AblationReport {
    pub fn report_rows(&self) -> Vec<ReportRow> {
        self.rows.iter().map(|r| r.report.clone()).collect()
    }
}

/// Writes `checkpoint.uafc`, `loss.csv` and `rollouts.csv` into `dir`.
pub fn write_run_artifacts(dir: &Path, outcome: &TrainOutcome, rollout: Option<&RolloutResult>) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    outcome.checkpoint.save(&dir.join("checkpoint.uafc"))?;
    let p = dir.join("loss.csv");
    write_atomic(&p, loss_csv(&outcome.loss_log).as_bytes()).map_err(io_err(&p))?;
    if let Some(r) = rollout {
        let p = dir.join("rollouts.csv");
        write_atomic(&p, rollouts_csv(r).as_bytes()).map_err(io_err(&p))?;
    }
    Ok(())
}

fn run_row(dataset: &Dataset, policy: &str, cfg: &AblationConfig, out_dir: Option<&Path>) -> Result<AblationRow, TrainError> {
    let outcome = train_policy(dataset, policy, &cfg.train, &cfg.groups)?;
    let rollout = rollout_with(&outcome.checkpoint, &cfg.env, cfg.trials, cfg.eval_seed, cfg.strategy);
    if let Some(dir) = out_dir {
        write_run_artifacts(&dir.join(policy), &outcome, rollout.as_ref().ok())?;
    }
    let rollout = rollout?;
    let report = ReportRow {
        policy: policy.to_string(),
        state_dim: outcome.checkpoint.sensor.state_dim(),
        train_wall_s: outcome.wall_seconds,
        trials: rollout.n(),
        exec_time_min: rollout.exec_time_min,
        success_rate_pct: rollout.success_rate_pct,
        pareto: false,
    };
    Ok(AblationRow {
        report,
        outcome,
        rollout,
    })
}

/// Trains and evaluates every named configuration from the same dataset
/// and seeds, then flags the Pareto frontier. With `out_dir`, per-policy
/// artifacts go to `out_dir/<policy>/` and the sweep report to `out_dir`.
pub fn run_ablation(
    dataset: &Dataset,
    policies: &[String],
    cfg: &AblationConfig,
    out_dir: Option<&Path>,
) -> Result<AblationReport, TrainError> {
    cfg.train.validate()?;
    cfg.env.validate()?;
    cfg.strategy.validate()?;
    if cfg.trials == 0 {
        return Err(TrainError::Config("trials must be at least 1".into()));
    }
    if policies.is_empty() {
        return Err(TrainError::Config("no policies to sweep".into()));
    }
    for p in policies {
        parse_policy_name(p).map_err(MaskError::from)?;
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for p in policies {
        log::info!("sweep: training {p}");
        match run_row(dataset, p, cfg, out_dir) {
            Ok(row) => {
                log::info!(
                    "sweep: {p} success {:.1}% exec {:.3} min",
                    row.report.success_rate_pct,
                    row.report.exec_time_min
                );
                rows.push(row);
            }
            Err(e) => {
                log::warn!("sweep: {p} failed: {e}");
                failures.push(SweepFailure {
                    policy: p.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let mut flat: Vec<ReportRow> = rows.iter().map(|r: &AblationRow| r.report.clone()).collect();
    flag_rows(&mut flat)?;
    for (r, f) in rows.iter_mut().zip(&flat) {
        r.report.pareto = f.pareto;
    }
    if let Some(dir) = out_dir {
        if !flat.is_empty() {
            emit_report(&flat, dir)?;
        }
        if !failures.is_empty() {
            let mut s = String::from("policy,error\n");
            for f in &failures {
                s.push_str(&format!("{},\"{}\"\n", f.policy, f.error.replace('"', "'")));
            }
            let p = dir.join("failures.csv");
            write_atomic(&p, s.as_bytes()).map_err(io_err(&p))?;
        }
    }
    debug_assert!(rows.iter().all(|r| r
        .trial_seeds()
        .iter()
        .enumerate()
        .all(|(i, &s)| s == trial_seed(cfg.eval_seed, i))));
    Ok(AblationReport { rows, failures })
}
