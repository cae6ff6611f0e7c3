//! Deterministic 2-D pick-and-place world.
//!
//! A point end effector with a gripper moves over a `2 × 1` workspace. One or
//! more discs sit in the left half, a drop box in the right half. The "head"
//! pans a 1-unit-wide active camera window across the scene, so the active
//! view only sees what the head points at. State channels are
//! `q = [x, y, grip, head_pan]`.

mod demo;
mod render;

pub use demo::{run_demo, scripted_demo, DemoPhase, DemoRun};
pub use render::{
    contact_force, pressure_noise_std, render_scene, render_sensors, sensor_manifest, Raster, SensorFrame, CONTACT_FORCE,
    PRESSURE_CHANNELS,
};

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{seeded, streams};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("scripted demonstrator failed for seed {seed} in phase {phase:?}")]
    OracleFailed { seed: u64, phase: DemoPhase },
    #[error("environment config JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Axis-aligned drop box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropBox {
    pub center: [f64; 2],
    pub half: f64,
}

impl DropBox {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (p[0] - self.center[0]).abs() <= self.half && (p[1] - self.center[1]).abs() <= self.half
    }
}

const CANONICAL_OBJECTS: [[f64; 2]; 5] = [[0.5, 0.5], [0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Workspace extent; the lower corner is the origin.
    pub workspace: [f64; 2],
    /// Region objects are drawn from when randomized.
    pub spawn_min: [f64; 2],
    pub spawn_max: [f64; 2],
    pub object_count: usize,
    pub object_radius: f64,
    pub drop_box: DropBox,
    /// Two drop boxes instead of one; demonstrations pick either with equal odds.
    pub bimodal: bool,
    pub bimodal_boxes: [DropBox; 2],
    /// Square camera resolution in pixels.
    pub image_size: usize,
    /// Tactile signal-to-noise ratio; `None` disables the noise.
    pub snr_db: Option<f64>,
    pub randomize_objects: bool,
    pub max_steps: usize,
    pub fps: f64,
    pub grasp_radius: f64,
    /// Object-to-effector distance counted as "approached".
    pub approach_radius: f64,
    /// Carry distance counted as "lifted".
    pub lift_distance: f64,
    pub home: [f64; 4],
    pub max_move: f64,
    pub max_grip_rate: f64,
    pub max_pan_rate: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            workspace: [2.0, 1.0],
            spawn_min: [0.1, 0.1],
            spawn_max: [0.9, 0.9],
            object_count: 1,
            object_radius: 0.05,
            drop_box: DropBox {
                center: [1.7, 0.5],
                half: 0.15,
            },
            bimodal: false,
            bimodal_boxes: [
                DropBox {
                    center: [1.7, 0.78],
                    half: 0.12,
                },
                DropBox {
                    center: [1.7, 0.22],
                    half: 0.12,
                },
            ],
            image_size: 32,
            snr_db: Some(20.0),
            randomize_objects: true,
            max_steps: 150,
            fps: 30.0,
            grasp_radius: 0.08,
            approach_radius: 0.1,
            lift_distance: 0.1,
            home: [1.0, 0.9, 1.0, -1.0],
            max_move: 0.05,
            max_grip_rate: 0.25,
            max_pan_rate: 0.15,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !(pos(self.workspace[0]) && pos(self.workspace[1])) {
            return bad("workspace extents must be positive");
        }
        if self.object_count == 0 || self.object_count > CANONICAL_OBJECTS.len() {
            return bad("object_count must be in 1..=5");
        }
        for a in 0..2 {
            if !(self.spawn_min[a] >= 0.0 && self.spawn_min[a] < self.spawn_max[a] && self.spawn_max[a] <= self.workspace[a])
            {
                return bad("spawn region must be a non-empty box inside the workspace");
            }
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return bad("image_size must be a positive multiple of 8");
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return bad("snr_db must be finite (use null to disable noise)");
            }
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        for v in [
            self.fps,
            self.object_radius,
            self.grasp_radius,
            self.approach_radius,
            self.lift_distance,
            self.max_move,
            self.max_grip_rate,
            self.max_pan_rate,
        ] {
            if !pos(v) {
                return bad("rates, radii and fps must be positive");
            }
        }
        for b in self.boxes() {
            if !pos(b.half) {
                return bad("drop box half-size must be positive");
            }
        }
        if !self.home.iter().all(|v| v.is_finite()) {
            return bad("home pose must be finite");
        }
        Ok(())
    }

    pub fn boxes(&self) -> Vec<DropBox> {
        if self.bimodal {
            self.bimodal_boxes.to_vec()
        } else {
            vec![self.drop_box]
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Active-camera window center for a head pan.
    pub fn pan_center(&self, pan: f64) -> f64 {
        0.5 * self.workspace[0] + 0.25 * self.workspace[0] * pan
    }

    /// Head pan that centers the active window on `x`.
    pub fn pan_toward(&self, x: f64) -> f64 {
        ((x - 0.5 * self.workspace[0]) / (0.25 * self.workspace[0])).clamp(-1.0, 1.0)
    }

    fn clamp_pose(&self, a: [f64; 4], fallback: [f64; 4]) -> [f64; 4] {
        let lim = [(0.0, self.workspace[0]), (0.0, self.workspace[1]), (0.0, 1.0), (-1.0, 1.0)];
        let mut out = [0.0; 4];
        for i in 0..4 {
            let v = if a[i].is_finite() { a[i] } else { fallback[i] };
            out[i] = v.clamp(lim[i].0, lim[i].1);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Held {
    pub object: usize,
    /// Object position relative to the effector.
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub end_effector: [f64; 2],
    pub grip: f64,
    pub head_pan: f64,
    pub objects: Vec<[f64; 2]>,
    pub initial_objects: Vec<[f64; 2]>,
    pub held: Option<Held>,
    pub boxes: Vec<DropBox>,
    pub step: usize,
    /// `q` one step earlier (equal to `q` at reset).
    pub prev_q: [f64; 4],
    /// Last commanded target after clamping.
    pub command: [f64; 4],
    /// Seed of the per-step tactile noise streams.
    pub noise_seed: u64,
}

impl WorldState {
    pub fn q(&self) -> [f64; 4] {
        [self.end_effector[0], self.end_effector[1], self.grip, self.head_pan]
    }

    pub fn is_holding(&self) -> bool {
        self.held.is_some()
    }
}

pub fn reset(config: &EnvConfig, seed: u64) -> WorldState {
    let mut rng = seeded(seed, streams::RESET);
    let r = config.object_radius;
    let mut objects: Vec<[f64; 2]> = Vec::with_capacity(config.object_count);
    if config.randomize_objects {
        while objects.len() < config.object_count {
            let p = [
                rng.random_range(config.spawn_min[0]..config.spawn_max[0]),
                rng.random_range(config.spawn_min[1]..config.spawn_max[1]),
            ];
            if objects.iter().all(|o| dist(*o, p) > 3.0 * r) {
                objects.push(p);
            }
        }
    } else {
        objects.extend_from_slice(&CANONICAL_OBJECTS[..config.object_count]);
    }
    let q = config.clamp_pose(config.home, [0.0; 4]);
    WorldState {
        end_effector: [q[0], q[1]],
        grip: q[2],
        head_pan: q[3],
        initial_objects: objects.clone(),
        objects,
        held: None,
        boxes: config.boxes(),
        step: 0,
        prev_q: q,
        command: q,
        noise_seed: seed,
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn approach(cur: f64, target: f64, rate: f64) -> f64 {
    cur + (target - cur).clamp(-rate, rate)
}

/// Advances one control step toward the target pose `[x, y, grip, head_pan]`.
/// Targets are clamped to the workspace; non-finite components hold position.
pub fn step(config: &EnvConfig, state: &WorldState, action: [f64; 4]) -> WorldState {
    let mut s = state.clone();
    let q = state.q();
    let cmd = config.clamp_pose(action, q);

    let d = [cmd[0] - q[0], cmd[1] - q[1]];
    let n = d[0].hypot(d[1]);
    if n <= config.max_move {
        s.end_effector = [cmd[0], cmd[1]];
    } else {
        let k = config.max_move / n;
        s.end_effector = [q[0] + d[0] * k, q[1] + d[1] * k];
    }
    s.grip = approach(q[2], cmd[2], config.max_grip_rate);
    s.head_pan = approach(q[3], cmd[3], config.max_pan_rate);

    if s.held.is_some() && s.grip > 0.5 {
        s.held = None;
    } else if s.held.is_none() && s.grip < 0.5 {
        let near = s
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, dist(*o, s.end_effector)))
            .filter(|&(_, d)| d <= config.grasp_radius)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = near {
            let o = s.objects[i];
            s.held = Some(Held {
                object: i,
                offset: [o[0] - s.end_effector[0], o[1] - s.end_effector[1]],
            });
        }
    }
    if let Some(h) = &s.held {
        let p = [s.end_effector[0] + h.offset[0], s.end_effector[1] + h.offset[1]];
        s.objects[h.object] = [p[0].clamp(0.0, config.workspace[0]), p[1].clamp(0.0, config.workspace[1])];
    }

    s.prev_q = q;
    s.command = cmd;
    s.step += 1;
    s
}

/// Five ordered milestones; each implies its predecessors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskScore {
    pub approach: bool,
    pub grasp: bool,
    pub lift: bool,
    pub transport: bool,
    pub release: bool,
    pub execution_steps: usize,
}

impl SubtaskScore {
    pub fn achieved(&self) -> usize {
        [self.approach, self.grasp, self.lift, self.transport, self.release]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn completion(&self) -> f64 {
        self.achieved() as f64 / 5.0
    }
}

/// Scores a trajectory against the target object (object 0).
///
/// A milestone counts only once every earlier one has been reached at the
/// same or an earlier step. `execution_steps` is the step index of the
/// first release, or the trajectory's last step index.
pub fn score_subtasks(config: &EnvConfig, trajectory: &[WorldState]) -> SubtaskScore {
    let mut reached = [None::<usize>; 5];
    let in_box = |s: &WorldState| s.boxes.iter().any(|b| b.contains(s.objects[0]));
    for (t, s) in trajectory.iter().enumerate() {
        let held = s.held.as_ref().is_some_and(|h| h.object == 0);
        let checks = [
            dist(s.end_effector, s.objects[0]) <= config.approach_radius,
            held,
            held && dist(s.objects[0], s.initial_objects[0]) >= config.lift_distance,
            held && in_box(s),
            !held && in_box(s),
        ];
        for i in 0..5 {
            if reached[i].is_none() && checks[i] && (i == 0 || reached[i - 1].is_some()) {
                reached[i] = Some(t);
            }
        }
    }
    let last = trajectory.last().map_or(0, |s| s.step);
    SubtaskScore {
        approach: reached[0].is_some(),
        grasp: reached[1].is_some(),
        lift: reached[2].is_some(),
        transport: reached[3].is_some(),
        release: reached[4].is_some(),
        execution_steps: reached[4].map_or(last, |t| trajectory[t].step),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        let c = EnvConfig::default();
        assert_eq!(reset(&c, 4), reset(&c, 4));
        assert_ne!(reset(&c, 4).objects, reset(&c, 5).objects);
    }

    #[test]
    fn fixed_layout_uses_canonical_position() {
        let c = EnvConfig {
            randomize_objects: false,
            ..EnvConfig::default()
        };
        assert_eq!(reset(&c, 99).objects, vec![[0.5, 0.5]]);
    }

    #[test]
    fn holding_pose_changes_only_step() {
        let c = EnvConfig::default();
        let s = reset(&c, 1);
        let n = step(&c, &s, s.q());
        let mut expect = s.clone();
        expect.step = 1;
        assert_eq!(n, expect);
    }

    #[test]
    fn release_over_box_drops_object_in_box() {
        let c = EnvConfig::default();
        let mut s = reset(&c, 1);
        s.end_effector = [1.7, 0.5];
        s.objects[0] = [1.7, 0.5];
        s.grip = 0.0;
        s.held = Some(Held {
            object: 0,
            offset: [0.0, 0.0],
        });
        for _ in 0..4 {
            s = step(&c, &s, [1.7, 0.5, 1.0, 1.0]);
        }
        assert!(s.held.is_none());
        assert!(c.drop_box.contains(s.objects[0]));
    }

    #[test]
    fn idle_trajectory_scores_zero() {
        let c = EnvConfig::default();
        let mut s = reset(&c, 3);
        let mut traj = vec![s.clone()];
        for _ in 0..20 {
            s = step(&c, &s, s.q());
            traj.push(s.clone());
        }
        let sc = score_subtasks(&c, &traj);
        assert_eq!(sc.completion(), 0.0);
        assert_eq!(sc.execution_steps, 20);
    }

    #[test]
    fn config_json_round_trip() {
        let c = EnvConfig {
            snr_db: None,
            bimodal: true,
            ..EnvConfig::default()
        };
        assert_eq!(EnvConfig::from_json(&c.to_json()).unwrap(), c);
        assert!(EnvConfig::from_json(r#"{"max_steps": 0}"#).is_err());
        assert!(EnvConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }
}
