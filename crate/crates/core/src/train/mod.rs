//! Training loop, checkpoints, closed-loop evaluation and ablation sweeps.

mod ablation;
mod checkpoint;
mod rollout;

pub use ablation::{run_ablation, write_run_artifacts, AblationConfig, AblationReport, AblationRow, SweepFailure};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};

pub use rollout::{
    mode_averaging_probe, oracle_probe, oracle_rollout, rollout, rollout_with, rollouts_csv, run_episode, trial_seed,
    ChunkExecutor, ChunkStrategy, Policy, ProbeReport, ProbeRow, RolloutResult, TrialResult,
};

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetError};
use crate::env::{EnvConfig, EnvError};
use crate::mask::{apply_mask, assemble_state, parse_policy_name, resolve_config, ChannelGroupMap, MaskError, SensorConfig};
use crate::model::{images_tensor, init_model, ActParams, Binder, ModelConfig, ModelError};
use crate::rng::{seeded, streams, Rng};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("training diverged at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: impl Into<std::path::PathBuf>) -> impl FnOnce(std::io::Error) -> TrainError {
    let path = path.into();
    move |source| TrainError::Io { path, source }
}

/// Architecture knobs that do not depend on the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelHyper {
    pub chunk_size: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub cnn_channels: [usize; 2],
    pub style_layers: usize,
}

impl Default for ModelHyper {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 1, 1);
        Self {
            chunk_size: d.chunk_size,
            latent_dim: d.latent_dim,
            embed_dim: d.embed_dim,
            enc_layers: d.enc_layers,
            dec_layers: d.dec_layers,
            heads: d.heads,
            ffn_dim: d.ffn_dim,
            cnn_channels: d.cnn_channels,
            style_layers: d.style_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    /// Peak learning rate, reached after `warmup_steps`.
    pub lr: f64,
    /// Cosine-decay floor reached at `total_steps`; equal to `lr` for a constant rate.
    pub lr_min: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub kl_weight: f64,
    /// Loss-log interval in steps.
    pub eval_every: u64,
    pub seed: u64,
    /// Z-score states and actions with training-set statistics.
    pub normalize: bool,
    pub model: ModelHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 5000,
            batch_size: 8,
            lr: 1e-3,
            lr_min: 1e-5,
            warmup_steps: 200,
            grad_clip: 1.0,
            kl_weight: 10.0,
            eval_every: 100,
            seed: 0,
            normalize: true,
            model: ModelHyper::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rate used for optimization step `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.lr_min.is_finite() && self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return bad("lr_min must be positive and at most lr");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        if !(self.kl_weight.is_finite() && self.kl_weight >= 0.0) {
            return bad("kl_weight must be non-negative");
        }
        Ok(())
    }
}

/// Per-channel affine map applied to states and actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

const MIN_STD: f64 = 1e-2;

impl Normalizer {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
        }
    }

    fn fit(rows: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
        let n = (rows.len() / dim).max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            r.iter().zip(&mut mean).for_each(|(x, m)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for i in 0..dim {
                var[i] += (r[i] - mean[i]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(MIN_STD)).collect();
        (mean, std)
    }

    pub fn state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(self.state_mean.iter().zip(&self.state_std))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect()
    }

    pub fn action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_mean.iter().zip(&self.action_std))
            .map(|(x, (m, sd))| (x - m) / sd)
            .collect()
    }

    /// Inverse of [`Normalizer::action`] applied row-wise.
    pub fn denormalize_actions(&self, data: &mut [f64]) {
        let a = self.action_mean.len();
        for row in data.chunks_exact_mut(a) {
            for i in 0..a {
                row[i] = row[i] * self.action_std[i] + self.action_mean[i];
            }
        }
    }
}

/// One logged loss window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub recon_l1: f64,
    pub kl: f64,
}

pub fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,total,recon_l1,kl\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.total, r.recon_l1, r.kl));
    }
    s
}

/// Masked, normalized episode held in memory for batch sampling.
struct PreparedEpisode {
    frames: usize,
    /// Per camera, all frames of HWC u8 pixels.
    images: Vec<Vec<u8>>,
    states: Vec<f64>,
    actions: Vec<f64>,
}

/// Step-by-step trainer; [`train_policy`] runs it to completion.
pub struct Trainer {
    pub sensor: SensorConfig,
    pub groups: ChannelGroupMap,
    pub config: TrainConfig,
    pub model: ActParams,
    pub normalizer: Normalizer,
    pub dataset_name: String,
    pub env: Option<EnvConfig>,
    adam: AdamState,
    episodes: Vec<PreparedEpisode>,
    batch_rng: Rng,
    latent_rng: Rng,
    steps_done: u64,
    window: (f64, f64, f64, u64),
    pub loss_log: Vec<LossRecord>,
}

impl Trainer {
    /// Parses and resolves the policy, loads and masks every episode, fits
    /// normalization statistics and initializes the model.
    pub fn new(dataset: &Dataset, policy: &str, config: &TrainConfig, groups: &ChannelGroupMap) -> Result<Self, TrainError> {
        config.validate()?;
        let name = parse_policy_name(policy).map_err(MaskError::from)?;
        let manifest = dataset.manifest();
        let sensor = resolve_config(&name, groups, manifest)?;
        if dataset.is_empty() {
            return Err(TrainError::Config("dataset has no episodes".into()));
        }
        let action_dim = manifest.action_stream().map(|d| d.frame_len()).unwrap_or(0);
        let cameras = sensor.masked_cameras().to_vec();
        let image_size = match cameras.first().and_then(|c| manifest.stream(c)) {
            Some(d) => [d.shape[0], d.shape[1]],
            None => return Err(TrainError::Config("policy selects no camera".into())),
        };
        for c in &cameras {
            let d = manifest.stream(c).expect("resolved");
            if [d.shape[0], d.shape[1]] != image_size {
                return Err(TrainError::Config(format!("camera {c:?} differs in size")));
            }
        }

        let state_dim = sensor.state_dim();
        let mut raw = Vec::new();
        for ep in dataset.episodes() {
            let ep = ep?;
            let masked = apply_mask(&ep, &sensor)?;
            let frames = masked.frames();
            let mut states = Vec::with_capacity(frames * state_dim);
            let mut actions = Vec::with_capacity(frames * action_dim);
            for t in 0..frames {
                states.extend(assemble_state(&masked.frame(t), &sensor)?);
                let a = masked
                    .action(t)
                    .ok_or_else(|| TrainError::Config(format!("episode {} lacks action {t}", ep.episode_id)))?;
                actions.extend(a.iter().map(|&v| v as f64));
            }
            let images = masked
                .cameras
                .iter()
                .map(|s| match &s.data {
                    crate::dataset::StreamData::U8(v) => v.clone(),
                    _ => unreachable!("apply_mask checks camera dtype"),
                })
                .collect();
            raw.push(PreparedEpisode {
                frames,
                images,
                states,
                actions,
            });
        }

        let normalizer = if config.normalize {
            let all_s: Vec<f64> = raw.iter().flat_map(|e| e.states.iter().copied()).collect();
            let all_a: Vec<f64> = raw.iter().flat_map(|e| e.actions.iter().copied()).collect();
            let (sm, ss) = Normalizer::fit(&all_s, state_dim);
            let (am, asd) = Normalizer::fit(&all_a, action_dim);
            Normalizer {
                state_mean: sm,
                state_std: ss,
                action_mean: am,
                action_std: asd,
            }
        } else {
            Normalizer::identity(state_dim, action_dim)
        };
        for e in &mut raw {
            e.states = e.states.chunks_exact(state_dim).flat_map(|s| normalizer.state(s)).collect();
            e.actions = e.actions.chunks_exact(action_dim).flat_map(|a| normalizer.action(a)).collect();
        }

        let h = &config.model;
        let mc = ModelConfig {
            state_dim,
            action_dim,
            chunk_size: h.chunk_size,
            latent_dim: h.latent_dim,
            embed_dim: h.embed_dim,
            enc_layers: h.enc_layers,
            dec_layers: h.dec_layers,
            heads: h.heads,
            ffn_dim: h.ffn_dim,
            image_size,
            cameras: cameras.len(),
            cnn_channels: h.cnn_channels,
            style_layers: h.style_layers,
            kl_weight: config.kl_weight,
            seed: config.seed,
        };
        let model = init_model(&mc)?;
        let adam = AdamState::new(
            model.params.tensors(),
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
        )?;
        Ok(Self {
            sensor,
            groups: groups.clone(),
            config: config.clone(),
            model,
            normalizer,
            dataset_name: manifest.dataset_name.clone(),
            env: None,
            adam,
            episodes: raw,
            batch_rng: seeded(config.seed, streams::BATCH),
            latent_rng: seeded(config.seed, streams::LATENT),
            steps_done: 0,
            window: (0.0, 0.0, 0.0, 0),
            loss_log: Vec::new(),
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.steps_done
    }

    pub fn param_count(&self) -> usize {
        self.model.param_count()
    }

    /// One optimization step; returns `(total, recon_l1, kl)`.
    pub fn step(&mut self) -> Result<(f64, f64, f64), TrainError> {
        let step = self.steps_done + 1;
        let c = &self.model.config;
        let (bsz, k, a_dim, s_dim) = (self.config.batch_size, c.chunk_size, c.action_dim, c.state_dim);
        let [ih, iw] = c.image_size;
        let frame_len = ih * iw * 3;

        let mut picks = Vec::with_capacity(bsz);
        for _ in 0..bsz {
            let e = self.batch_rng.random_range(0..self.episodes.len());
            let t = self.batch_rng.random_range(0..self.episodes[e].frames);
            picks.push((e, t));
        }
        let mut states = Vec::with_capacity(bsz * s_dim);
        let mut targets = Vec::with_capacity(bsz * k * a_dim);
        for &(e, t) in &picks {
            let ep = &self.episodes[e];
            states.extend_from_slice(&ep.states[t * s_dim..(t + 1) * s_dim]);
            for i in 0..k {
                let f = (t + i).min(ep.frames - 1);
                targets.extend_from_slice(&ep.actions[f * a_dim..(f + 1) * a_dim]);
            }
        }
        let eps: Vec<f64> = (0..bsz * c.latent_dim)
            .map(|_| StandardNormal.sample(&mut self.latent_rng))
            .collect();

        let mut g = Graph::new();
        let mut b = Binder::new(&self.model.params);
        let mut imgs = Vec::with_capacity(c.cameras);
        for cam in 0..c.cameras {
            let frames: Vec<&[u8]> = picks
                .iter()
                .map(|&(e, t)| &self.episodes[e].images[cam][t * frame_len..(t + 1) * frame_len])
                .collect();
            imgs.push(g.constant(images_tensor(&frames, ih, iw)?));
        }
        let diverged = |e: ModelError| match e {
            ModelError::Tensor(TensorError::NonFinite { op }) => TrainError::NonFinite {
                step,
                detail: format!("non-finite value produced by {op}"),
            },
            other => other.into(),
        };
        let sv = g.constant(Tensor::new(vec![bsz, s_dim], states)?);
        let tv = g.constant(Tensor::new(vec![bsz, k, a_dim], targets)?);
        let (mu, lv) = self.model.build_style(&mut g, &mut b, sv, tv).map_err(diverged)?;
        let half = g.scale(lv, 0.5)?;
        let sd = g.exp(half)?;
        let noise = g.constant(Tensor::new(vec![bsz, c.latent_dim], eps)?);
        let z = g.mul(sd, noise)?;
        let z = g.add(z, mu)?;
        let pred = self.model.build_decoder(&mut g, &mut b, &imgs, sv, z).map_err(diverged)?;
        let (total, recon, kl) =
            ActParams::build_loss(&mut g, pred, tv, mu, lv, self.config.kl_weight).map_err(diverged)?;
        let values = (g.value(total).item(), g.value(recon).item(), g.value(kl).item());
        if !(values.0.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("loss {values:?}"),
            });
        }
        let grads = g.backward(total)?;
        let grads = b.gradients(&grads);
        if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("gradient of {} is not finite", self.model.params.names()[i]),
            });
        }
        let mut grads = grads;
        if self.config.grad_clip > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|t| t.data().iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > self.config.grad_clip {
                let k = self.config.grad_clip / norm;
                grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= k));
            }
        }
        self.adam.hyper.lr = self.config.lr_at(step);
        adam_step(self.model.params.tensors_mut(), &grads, &mut self.adam)?;

        self.steps_done = step;
        let w = &mut self.window;
        *w = (w.0 + values.0, w.1 + values.1, w.2 + values.2, w.3 + 1);
        if step.is_multiple_of(self.config.eval_every) || step == self.config.total_steps {
            let n = w.3 as f64;
            self.loss_log.push(LossRecord {
                step,
                total: w.0 / n,
                recon_l1: w.1 / n,
                kl: w.2 / n,
            });
            log::debug!("step {step}: loss {:.4} (l1 {:.4}, kl {:.4})", w.0 / n, w.1 / n, w.2 / n);
            *w = (0.0, 0.0, 0.0, 0);
        }
        Ok(values)
    }

    /// Runs the remaining steps of `config.total_steps`.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while self.steps_done < self.config.total_steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            policy: self.sensor.policy.clone(),
            sensor: self.sensor.clone(),
            groups: self.groups.clone(),
            train: self.config.clone(),
            steps: self.steps_done,
            dataset_name: self.dataset_name.clone(),
            env: self.env.clone(),
            normalizer: self.normalizer.clone(),
            model: self.model.clone(),
        }
    }
}

/// Trained checkpoint plus training diagnostics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_log: Vec<LossRecord>,
    pub wall_seconds: f64,
}

/// Parse, resolve, mask, then run `config.total_steps` Adam steps.
pub fn train_policy(
    dataset: &Dataset,
    policy: &str,
    config: &TrainConfig,
    groups: &ChannelGroupMap,
) -> Result<TrainOutcome, TrainError> {
    let start = Instant::now();
    let mut t = Trainer::new(dataset, policy, config, groups)?;
    t.env = read_env_sidecar(dataset)?;
    t.run()?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        loss_log: t.loss_log.clone(),
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// File next to `manifest.json` recording the generating environment.
pub const ENV_SIDECAR: &str = "env_config.json";

pub fn read_env_sidecar(dataset: &Dataset) -> Result<Option<EnvConfig>, TrainError> {
    let p = dataset.root().join(ENV_SIDECAR);
    if p.exists() {
        Ok(Some(EnvConfig::load(&p)?))
    } else {
        Ok(None)
    }
}

/// Writes `episodes` scripted demonstrations (episode `i` from seed
/// `seed + i`) plus the environment sidecar into a fresh dataset at `root`.
pub fn generate_dataset(env: &EnvConfig, episodes: usize, seed: u64, root: &std::path::Path) -> Result<Dataset, TrainError> {
    env.validate()?;
    if root.join(crate::dataset::MANIFEST_FILE).exists() {
        return Err(TrainError::Config(format!("{} already holds a dataset", root.display())));
    }
    let manifest = crate::env::sensor_manifest(env, &format!("synth-{seed}"));
    let mut ds = Dataset::create(root, manifest)?;
    let p = root.join(ENV_SIDECAR);
    crate::fsutil::write_atomic(&p, env.to_json().as_bytes()).map_err(io_err(&p))?;
    for i in 0..episodes {
        let ep = crate::env::scripted_demo(env, seed.wrapping_add(i as u64))?;
        ds.write_episode(&ep)?;
    }
    Ok(ds)
}
