//! Scripted demonstrator.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{dist, render_sensors, reset, step, EnvConfig, EnvError, WorldState};
use crate::dataset::{MasterEpisode, StreamData};
use crate::rng::{seeded, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DemoPhase {
    Approach,
    Grasp,
    Lift,
    Transport,
    Release,
    Settle,
}

const SETTLE_STEPS: usize = 3;
const APPROACH_JITTER: f64 = 0.02;
const LIFT_OFFSET: f64 = 0.15;

/// A recorded demonstration: `states[t]` produced frame `t` of `episode`,
/// and `actions[t]` is the target commanded from it.
#[derive(Debug, Clone)]
pub struct DemoRun {
    pub episode: MasterEpisode,
    pub states: Vec<WorldState>,
    pub actions: Vec<[f64; 4]>,
    /// Index of the drop box the demonstrator chose.
    pub target_box: usize,
}

fn append(dst: &mut MasterEpisode, src: MasterEpisode) {
    for (d, s) in dst.streams.iter_mut().zip(src.streams) {
        match (&mut d.data, s.data) {
            (StreamData::U8(a), StreamData::U8(b)) => a.extend(b),
            (StreamData::F32(a), StreamData::F32(b)) => a.extend(b),
            (StreamData::F64(a), StreamData::F64(b)) => a.extend(b),
            _ => unreachable!("frames share one schema"),
        }
    }
}

fn reached(s: &WorldState, p: [f64; 2]) -> bool {
    dist(s.end_effector, p) < 1e-9
}

/// Runs approach, grasp, lift, transport and release on object 0.
///
/// Waypoints are jittered per seed; commanded targets are rounded to `f32`
/// so replaying the stored action stream reproduces every state exactly.
pub fn run_demo(config: &EnvConfig, seed: u64) -> Result<DemoRun, EnvError> {
    config.validate()?;
    let mut rng = seeded(seed, streams::DEMO);
    let mut jitter = |a: f64| rng.random_range(-a..a);

    let mut s = reset(config, seed);
    let boxes = config.boxes();
    let target_box = if boxes.len() > 1 {
        (jitter(1.0) > 0.0) as usize
    } else {
        0
    };
    let b = boxes[target_box];
    let obj = s.objects[0];
    let grasp_pt = [obj[0] + jitter(APPROACH_JITTER), obj[1] + jitter(APPROACH_JITTER)];
    let drop_pt = [
        b.center[0] + jitter(0.3 * b.half),
        b.center[1] + jitter(0.3 * b.half),
    ];
    let toward = [drop_pt[0] - grasp_pt[0], drop_pt[1] - grasp_pt[1]];
    let n = toward[0].hypot(toward[1]);
    let lift_pt = [
        grasp_pt[0] + LIFT_OFFSET * toward[0] / n + jitter(APPROACH_JITTER),
        grasp_pt[1] + LIFT_OFFSET * toward[1] / n + jitter(APPROACH_JITTER),
    ];

    let mut phase = DemoPhase::Approach;
    let mut settled = 0;
    let mut states = vec![s.clone()];
    let mut actions = Vec::new();
    let mut episode: Option<MasterEpisode> = None;
    loop {
        let (p, grip) = match phase {
            DemoPhase::Approach => (grasp_pt, 1.0),
            DemoPhase::Grasp => (grasp_pt, 0.0),
            DemoPhase::Lift => (lift_pt, 0.0),
            DemoPhase::Transport => (drop_pt, 0.0),
            DemoPhase::Release | DemoPhase::Settle => (drop_pt, 1.0),
        };
        let target = [p[0], p[1], grip, config.pan_toward(p[0])].map(|v| v as f32 as f64);
        let frame = render_sensors(config, &s).to_episode(target);
        match &mut episode {
            None => episode = Some(frame),
            Some(e) => append(e, frame),
        }
        actions.push(target);
        if phase == DemoPhase::Settle && settled == SETTLE_STEPS {
            break;
        }
        if s.step >= config.max_steps {
            return Err(EnvError::OracleFailed { seed, phase });
        }
        s = step(config, &s, target);
        states.push(s.clone());
        let goal = [target[0], target[1]];
        phase = match phase {
            DemoPhase::Approach if reached(&s, goal) => DemoPhase::Grasp,
            DemoPhase::Grasp if s.is_holding() => DemoPhase::Lift,
            DemoPhase::Grasp if s.grip <= 0.0 => return Err(EnvError::OracleFailed { seed, phase }),
            DemoPhase::Lift if reached(&s, goal) => DemoPhase::Transport,
            DemoPhase::Transport if reached(&s, goal) => DemoPhase::Release,
            DemoPhase::Release if !s.is_holding() && s.grip >= 1.0 => DemoPhase::Settle,
            DemoPhase::Settle => {
                settled += 1;
                DemoPhase::Settle
            }
            other => other,
        };
    }
    let mut episode = episode.expect("at least one frame");
    episode.episode_id = 0;
    Ok(DemoRun {
        episode,
        states,
        actions,
        target_box,
    })
}

/// Demonstration episode for `seed`, ready for [`crate::dataset::Dataset::write_episode`].
pub fn scripted_demo(config: &EnvConfig, seed: u64) -> Result<MasterEpisode, EnvError> {
    run_demo(config, seed).map(|r| r.episode)
}

#[cfg(test)]
mod tests {
    use super::super::{score_subtasks, sensor_manifest};
    use super::*;

    #[test]
    fn demo_completes_every_subtask() {
        let c = EnvConfig::default();
        for seed in 0..10 {
            let run = run_demo(&c, seed).unwrap();
            let sc = score_subtasks(&c, &run.states);
            assert_eq!(sc.completion(), 1.0, "seed {seed}");
            assert_eq!(run.states.len(), run.actions.len());
            run.episode.validate(&sensor_manifest(&c, "d")).unwrap();
        }
    }

    #[test]
    fn bimodal_demos_use_both_boxes() {
        let c = EnvConfig {
            bimodal: true,
            ..EnvConfig::default()
        };
        let picks: Vec<usize> = (0..20).map(|s| run_demo(&c, s).unwrap().target_box).collect();
        assert!(picks.contains(&0) && picks.contains(&1));
    }
}
