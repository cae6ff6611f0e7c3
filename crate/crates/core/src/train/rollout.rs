//! Closed-loop evaluation in the synthetic environment.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, TrainError};
use crate::dataset::StreamData;
use crate::env::{
    reset, run_demo, render_sensors, score_subtasks, sensor_manifest, step, EnvConfig, SensorFrame, SubtaskScore,
    WorldState,
};
use crate::mask::{apply_mask, assemble_state};
use crate::model::{forward, ActionChunk, Observation};

/// How predicted chunks are turned into per-step actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChunkStrategy {
    /// Predict every step and execute only the first row.
    ReplanEachStep,
    /// Execute all `k` rows, then predict again.
    OpenLoopChunk,
    /// Predict every step and average all chunks covering the current step,
    /// weighting a chunk predicted `age` steps ago by `weight^age`.
    TemporalEnsemble { weight: f64 },
}

impl Default for ChunkStrategy {
    fn default() -> Self {
        ChunkStrategy::TemporalEnsemble { weight: 0.1 }
    }
}

impl ChunkStrategy {
    pub fn validate(&self) -> Result<(), TrainError> {
        match *self {
            ChunkStrategy::TemporalEnsemble { weight } if !(weight.is_finite() && weight >= 0.0) => Err(
                TrainError::Config(format!("temporal ensemble weight must be finite and non-negative, got {weight}")),
            ),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for ChunkStrategy {
    type Err = TrainError;

    /// `replan`, `open-loop`, or `ensemble:<weight>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let st = match s {
            "replan" => ChunkStrategy::ReplanEachStep,
            "open-loop" => ChunkStrategy::OpenLoopChunk,
            _ => match s.strip_prefix("ensemble:").map(str::parse::<f64>) {
                Some(Ok(weight)) => ChunkStrategy::TemporalEnsemble { weight },
                _ => return Err(TrainError::Config(format!("unknown chunk strategy {s:?}"))),
            },
        };
        st.validate()?;
        Ok(st)
    }
}

/// Stateful chunk stitcher for one episode.
#[derive(Debug, Clone)]
pub struct ChunkExecutor {
    strategy: ChunkStrategy,
    chunks: VecDeque<(usize, ActionChunk)>,
    forward_calls: usize,
}

impl ChunkExecutor {
    pub fn new(strategy: ChunkStrategy) -> Result<Self, TrainError> {
        strategy.validate()?;
        Ok(Self {
            strategy,
            chunks: VecDeque::new(),
            forward_calls: 0,
        })
    }

    pub fn forward_calls(&self) -> usize {
        self.forward_calls
    }

    /// Action for step `t`; `predict` is called when a fresh chunk is needed.
    pub fn next_action(
        &mut self,
        t: usize,
        mut predict: impl FnMut() -> Result<ActionChunk, TrainError>,
    ) -> Result<Vec<f64>, TrainError> {
        let mut fresh = || -> Result<ActionChunk, TrainError> {
            let c = predict()?;
            if c.rows == 0 || c.cols == 0 {
                return Err(TrainError::Config("empty action chunk".into()));
            }
            Ok(c)
        };
        match self.strategy {
            ChunkStrategy::ReplanEachStep => {
                let c = fresh()?;
                self.forward_calls += 1;
                Ok(c.row(0).to_vec())
            }
            ChunkStrategy::OpenLoopChunk => {
                let stale = match self.chunks.front() {
                    Some((start, c)) => t < *start || t - start >= c.rows,
                    None => true,
                };
                if stale {
                    self.chunks.clear();
                    self.chunks.push_back((t, fresh()?));
                    self.forward_calls += 1;
                }
                let (start, c) = &self.chunks[0];
                Ok(c.row(t - start).to_vec())
            }
            ChunkStrategy::TemporalEnsemble { weight } => {
                self.chunks.push_back((t, fresh()?));
                self.forward_calls += 1;
                self.chunks.retain(|(start, c)| *start <= t && t - start < c.rows);
                let cols = self.chunks[0].1.cols;
                let mut acc = vec![0.0; cols];
                let mut total = 0.0;
                for (start, c) in &self.chunks {
                    let w = weight.powi((t - start) as i32);
                    if w == 0.0 {
                        continue;
                    }
                    for (a, v) in acc.iter_mut().zip(c.row(t - start)) {
                        *a += w * v;
                    }
                    total += w;
                }
                Ok(acc.into_iter().map(|a| a / total).collect())
            }
        }
    }
}

/// Inference wrapper: masks sensor frames, normalizes, decodes with `z = 0`.
pub struct Policy<'a> {
    pub checkpoint: &'a Checkpoint,
    zero_latent: Vec<f64>,
}

impl<'a> Policy<'a> {
    pub fn new(checkpoint: &'a Checkpoint) -> Self {
        Self {
            zero_latent: vec![0.0; checkpoint.model.config.latent_dim],
            checkpoint,
        }
    }

    /// Checks that `env` renders every stream the checkpoint consumes.
    pub fn check_env(&self, env: &EnvConfig) -> Result<(), TrainError> {
        let m = sensor_manifest(env, "eval");
        let c = &self.checkpoint.model.config;
        for cam in self.checkpoint.sensor.masked_cameras() {
            match m.stream(cam) {
                Some(d) if d.shape == [c.image_size[0], c.image_size[1], 3] => {}
                _ => {
                    return Err(TrainError::Config(format!(
                        "environment does not render {cam:?} at {}x{}",
                        c.image_size[0], c.image_size[1]
                    )))
                }
            }
        }
        for b in &self.checkpoint.sensor.blocks {
            match m.stream(&b.stream) {
                Some(d) if d.shape == [b.width] => {}
                _ => return Err(TrainError::Config(format!("environment lacks proprio block {:?}", b.stream))),
            }
        }
        Ok(())
    }

    /// Denormalized chunk for the current sensor readings.
    pub fn predict(&self, frame: &SensorFrame, command: [f64; 4]) -> Result<ActionChunk, TrainError> {
        let ck = self.checkpoint;
        let masked = apply_mask(&frame.to_episode(command), &ck.sensor)?;
        let state = ck.normalizer.state(&assemble_state(&masked.frame(0), &ck.sensor)?);
        let images: Vec<&[u8]> = masked
            .cameras
            .iter()
            .map(|s| match &s.data {
                StreamData::U8(v) => v.as_slice(),
                _ => unreachable!("apply_mask checks camera dtype"),
            })
            .collect();
        let obs = Observation {
            images: &images,
            state: &state,
        };
        let mut chunk = forward(&ck.model, &obs, &self.zero_latent)?;
        ck.normalizer.denormalize_actions(&mut chunk.data);
        Ok(chunk)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub score: SubtaskScore,
    /// Target object position when the trial ended.
    pub terminal_object: [f64; 2],
    pub forward_calls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub trials: Vec<TrialResult>,
    /// Mean subtask completion in percent.
    pub success_rate_pct: f64,
    /// Mean steps-until-release (or truncation), in minutes at the env fps.
    pub exec_time_min: f64,
    pub fps: f64,
}

impl RolloutResult {
    fn from_trials(trials: Vec<TrialResult>, fps: f64) -> Self {
        let n = trials.len() as f64;
        let success = trials.iter().map(|t| t.score.completion()).sum::<f64>() / n * 100.0;
        let exec = trials
            .iter()
            .map(|t| t.score.execution_steps as f64 / fps / 60.0)
            .sum::<f64>()
            / n;
        Self {
            trials,
            success_rate_pct: success,
            exec_time_min: exec,
            fps,
        }
    }

    pub fn n(&self) -> usize {
        self.trials.len()
    }
}

fn check_trials(trials: usize) -> Result<(), TrainError> {
    if trials == 0 {
        Err(TrainError::Config("trials must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Environment seed of trial `i`; identical for every policy in a sweep.
pub fn trial_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Runs one closed-loop episode; returns the visited states.
pub fn run_episode(
    policy: &Policy<'_>,
    env: &EnvConfig,
    seed: u64,
    strategy: ChunkStrategy,
) -> Result<(Vec<WorldState>, usize), TrainError> {
    let mut s = reset(env, seed);
    let mut traj = vec![s.clone()];
    let mut exec = ChunkExecutor::new(strategy)?;
    for t in 0..env.max_steps {
        let frame = render_sensors(env, &s);
        let a = exec.next_action(t, || policy.predict(&frame, s.command))?;
        let mut target = [0.0; 4];
        for (d, v) in target.iter_mut().zip(&a) {
            *d = *v;
        }
        s = step(env, &s, target);
        traj.push(s.clone());
        if score_subtasks(env, &traj).release {
            break;
        }
    }
    Ok((traj, exec.forward_calls()))
}

pub fn rollout(checkpoint: &Checkpoint, env: &EnvConfig, trials: usize, seed: u64) -> Result<RolloutResult, TrainError> {
    rollout_with(checkpoint, env, trials, seed, ChunkStrategy::default())
}

pub fn rollout_with(
    checkpoint: &Checkpoint,
    env: &EnvConfig,
    trials: usize,
    seed: u64,
    strategy: ChunkStrategy,
) -> Result<RolloutResult, TrainError> {
    check_trials(trials)?;
    env.validate()?;
    let policy = Policy::new(checkpoint);
    policy.check_env(env)?;
    let mut out = Vec::with_capacity(trials);
    for i in 0..trials {
        let ts = trial_seed(seed, i);
        let (traj, calls) = run_episode(&policy, env, ts, strategy)?;
        out.push(TrialResult {
            trial: i,
            seed: ts,
            score: score_subtasks(env, &traj),
            terminal_object: traj.last().expect("non-empty").objects[0],
            forward_calls: calls,
        });
    }
    Ok(RolloutResult::from_trials(out, env.fps))
}

/// The scripted demonstrator evaluated in the same harness.
pub fn oracle_rollout(env: &EnvConfig, trials: usize, seed: u64) -> Result<RolloutResult, TrainError> {
    check_trials(trials)?;
    let mut out = Vec::with_capacity(trials);
    for i in 0..trials {
        let ts = trial_seed(seed, i);
        let run = run_demo(env, ts)?;
        out.push(TrialResult {
            trial: i,
            seed: ts,
            score: score_subtasks(env, &run.states),
            terminal_object: run.states.last().expect("non-empty").objects[0],
            forward_calls: 0,
        });
    }
    Ok(RolloutResult::from_trials(out, env.fps))
}

pub fn rollouts_csv(result: &RolloutResult) -> String {
    let mut s = String::from(
        "trial,seed,approach,grasp,lift,transport,release,completion,execution_steps,exec_time_min,terminal_x,terminal_y\n",
    );
    for t in &result.trials {
        let sc = &t.score;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3},{},{:.6},{:.6},{:.6}\n",
            t.trial,
            t.seed,
            sc.approach as u8,
            sc.grasp as u8,
            sc.lift as u8,
            sc.transport as u8,
            sc.release as u8,
            sc.completion(),
            sc.execution_steps,
            sc.execution_steps as f64 / result.fps / 60.0,
            t.terminal_object[0],
            t.terminal_object[1],
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub trial: usize,
    pub seed: u64,
    pub terminal: [f64; 2],
    pub released: bool,
    pub dist_mode_a: f64,
    pub dist_mode_b: f64,
    pub dist_midpoint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub modes: [[f64; 2]; 2],
    pub midpoint: [f64; 2],
    pub rows: Vec<ProbeRow>,
    /// The probe ran on a single-box environment.
    pub unimodal: bool,
}

impl ProbeReport {
    /// Trials whose terminal point is closer to the midpoint than to either mode.
    pub fn midpoint_majority(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.dist_midpoint < r.dist_mode_a.min(r.dist_mode_b))
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial,seed,terminal_x,terminal_y,released,dist_mode_a,dist_mode_b,dist_midpoint\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{},{:.6},{:.6},{:.6}\n",
                r.trial,
                r.seed,
                r.terminal[0],
                r.terminal[1],
                r.released as u8,
                r.dist_mode_a,
                r.dist_mode_b,
                r.dist_midpoint
            ));
        }
        s
    }
}

fn probe_rows(env: &EnvConfig, terminals: impl Iterator<Item = (u64, [f64; 2], bool)>) -> ProbeReport {
    let [a, b] = env.bimodal_boxes.map(|x| x.center);
    let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
    let d = |p: [f64; 2], q: [f64; 2]| (p[0] - q[0]).hypot(p[1] - q[1]);
    let rows = terminals
        .enumerate()
        .map(|(trial, (seed, p, released))| ProbeRow {
            trial,
            seed,
            terminal: p,
            released,
            dist_mode_a: d(p, a),
            dist_mode_b: d(p, b),
            dist_midpoint: d(p, mid),
        })
        .collect();
    ProbeReport {
        modes: [a, b],
        midpoint: mid,
        rows,
        unimodal: !env.bimodal,
    }
}

/// Terminal drop positions of `trials` deterministic rollouts, measured
/// against the two drop boxes of `env.bimodal_boxes` and their midpoint.
pub fn mode_averaging_probe(
    checkpoint: &Checkpoint,
    env: &EnvConfig,
    trials: usize,
    seed: u64,
) -> Result<ProbeReport, TrainError> {
    if !env.bimodal {
        log::warn!("mode-averaging probe on a single-box environment");
    }
    let r = rollout(checkpoint, env, trials, seed)?;
    Ok(probe_rows(
        env,
        r.trials.iter().map(|t| (t.seed, t.terminal_object, t.score.release)),
    ))
}

/// The probe applied to scripted demonstrations.
pub fn oracle_probe(env: &EnvConfig, trials: usize, seed: u64) -> Result<ProbeReport, TrainError> {
    let r = oracle_rollout(env, trials, seed)?;
    Ok(probe_rows(
        env,
        r.trials.iter().map(|t| (t.seed, t.terminal_object, t.score.release)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(rows: usize, base: f64) -> ActionChunk {
        ActionChunk {
            rows,
            cols: 1,
            data: (0..rows).map(|i| base + i as f64).collect(),
        }
    }

    #[test]
    fn open_loop_replans_every_k_steps() {
        let mut ex = ChunkExecutor::new(ChunkStrategy::OpenLoopChunk).unwrap();
        let mut calls = 0;
        let mut got = Vec::new();
        for t in 0..8 {
            got.push(
                ex.next_action(t, || {
                    calls += 1;
                    Ok(chunk(4, 10.0 * calls as f64))
                })
                .unwrap()[0],
            );
        }
        assert_eq!(calls, 2);
        assert_eq!(got, [10.0, 11.0, 12.0, 13.0, 20.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn zero_weight_ensemble_uses_newest_chunk() {
        let mut ex = ChunkExecutor::new(ChunkStrategy::TemporalEnsemble { weight: 0.0 }).unwrap();
        for t in 0..5 {
            let a = ex.next_action(t, || Ok(chunk(3, 100.0 * t as f64))).unwrap();
            assert_eq!(a, [100.0 * t as f64]);
        }
    }

    #[test]
    fn ensemble_weights_by_age() {
        let mut ex = ChunkExecutor::new(ChunkStrategy::TemporalEnsemble { weight: 0.5 }).unwrap();
        ex.next_action(0, || Ok(chunk(2, 0.0))).unwrap();
        // step 1: newest row 0 = 10 (weight 1), previous row 1 = 1 (weight 0.5)
        let a = ex.next_action(1, || Ok(chunk(2, 10.0))).unwrap();
        assert!((a[0] - (10.0 + 0.5) / 1.5).abs() < 1e-12);
    }

    #[test]
    fn strategies_agree_for_single_row_chunks() {
        let strategies = [
            ChunkStrategy::ReplanEachStep,
            ChunkStrategy::OpenLoopChunk,
            ChunkStrategy::TemporalEnsemble { weight: 0.3 },
        ];
        let runs: Vec<Vec<f64>> = strategies
            .iter()
            .map(|&s| {
                let mut ex = ChunkExecutor::new(s).unwrap();
                (0..6)
                    .map(|t| ex.next_action(t, || Ok(chunk(1, (t * t) as f64))).unwrap()[0])
                    .collect()
            })
            .collect();
        assert!(runs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("replan".parse::<ChunkStrategy>().unwrap(), ChunkStrategy::ReplanEachStep);
        assert_eq!(
            "ensemble:0.25".parse::<ChunkStrategy>().unwrap(),
            ChunkStrategy::TemporalEnsemble { weight: 0.25 }
        );
        assert!("ensemble:-1".parse::<ChunkStrategy>().is_err());
        assert!("greedy".parse::<ChunkStrategy>().is_err());
    }

    #[test]
    fn oracle_scores_full_marks() {
        let env = EnvConfig::default();
        let r = oracle_rollout(&env, 5, 11).unwrap();
        assert_eq!(r.success_rate_pct, 100.0);
        assert!(oracle_rollout(&env, 0, 0).is_err());
        let p = oracle_probe(&EnvConfig { bimodal: true, ..env }, 6, 0).unwrap();
        assert!(p.rows.iter().all(|r| r.dist_mode_a.min(r.dist_mode_b) < 0.1));
    }
}
