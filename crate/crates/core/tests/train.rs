//! Training loop, checkpoints and rollouts on a tiny model.

use std::sync::OnceLock;

use uaf_core::dataset::Dataset;
use uaf_core::env::EnvConfig;
use uaf_core::mask::ChannelGroupMap;
use uaf_core::train::{
    generate_dataset, oracle_rollout, rollout, rollout_with, rollouts_csv, train_policy, Checkpoint, ChunkStrategy,
    ModelHyper, TrainConfig, Trainer,
};

fn tiny_env() -> EnvConfig {
    EnvConfig {
        image_size: 16,
        ..EnvConfig::default()
    }
}

fn tiny_config(steps: u64) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        batch_size: 4,
        warmup_steps: 0,
        eval_every: 10,
        model: ModelHyper {
            chunk_size: 4,
            latent_dim: 4,
            embed_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 32,
            cnn_channels: [4, 8],
            style_layers: 1,
        },
        ..TrainConfig::default()
    }
}

fn dataset() -> &'static Dataset {
    static DS: OnceLock<(tempfile::TempDir, Dataset)> = OnceLock::new();
    &DS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&tiny_env(), 6, 0, dir.path()).unwrap();
        (dir, ds)
    })
    .1
}

#[test]
fn rejects_invalid_configs() {
    let g = ChannelGroupMap::default();
    for cfg in [
        TrainConfig {
            total_steps: 0,
            ..tiny_config(1)
        },
        TrainConfig {
            batch_size: 0,
            ..tiny_config(1)
        },
        TrainConfig {
            lr: -1.0,
            ..tiny_config(1)
        },
        TrainConfig {
            lr_min: 1.0,
            ..tiny_config(1)
        },
    ] {
        assert!(train_policy(dataset(), "A", &cfg, &g).is_err(), "{cfg:?}");
    }
    assert!(train_policy(dataset(), "A-V_Z", &tiny_config(1), &g).is_err());
    assert!(train_policy(dataset(), "not a name", &tiny_config(1), &g).is_err());
}

#[test]
fn schedule_warms_up_then_decays_to_floor() {
    let c = TrainConfig {
        total_steps: 1000,
        lr: 1e-3,
        lr_min: 1e-5,
        warmup_steps: 100,
        ..TrainConfig::default()
    };
    assert_eq!(c.lr_at(50), 5e-4);
    assert_eq!(c.lr_at(100), 1e-3);
    assert!((c.lr_at(550) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
    assert!((c.lr_at(1000) - 1e-5).abs() < 1e-18);
    let flat = TrainConfig {
        lr_min: 1e-3,
        warmup_steps: 0,
        ..c
    };
    assert!((1..=1000).all(|s| flat.lr_at(s) == 1e-3));
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let g = ChannelGroupMap::default();
    let a = train_policy(dataset(), "A-P", &tiny_config(12), &g).unwrap();
    let b = train_policy(dataset(), "A-P", &tiny_config(12), &g).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.loss_log, b.loss_log);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.uafc");
    a.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), a.checkpoint.to_bytes());
    let env = tiny_env();
    let r1 = rollout(&a.checkpoint, &env, 2, 500).unwrap();
    let r2 = rollout(&loaded, &env, 2, 500).unwrap();
    assert_eq!(rollouts_csv(&r1), rollouts_csv(&r2));

    let mut bytes = a.checkpoint.to_bytes();
    bytes[0] ^= 1;
    assert!(Checkpoint::from_bytes(&bytes).is_err());
    let n = bytes.len();
    assert!(Checkpoint::from_bytes(&a.checkpoint.to_bytes()[..n - 3]).is_err());
}

#[test]
fn loss_goes_down() {
    let g = ChannelGroupMap::default();
    let cfg = TrainConfig {
        lr_min: 1e-3,
        kl_weight: 1.0,
        ..tiny_config(150)
    };
    let mut t = Trainer::new(dataset(), "A", &cfg, &g).unwrap();
    let mut first = 0.0;
    for _ in 0..10 {
        first += t.step().unwrap().1;
    }
    for _ in 10..140 {
        t.step().unwrap();
    }
    let mut last = 0.0;
    for _ in 140..150 {
        last += t.step().unwrap().1;
    }
    assert!(last < 0.7 * first, "recon L1 {first} -> {last}");
}

#[test]
fn rollout_contracts() {
    let g = ChannelGroupMap::default();
    let out = train_policy(dataset(), "A", &tiny_config(2), &g).unwrap();
    let env = tiny_env();
    assert!(rollout(&out.checkpoint, &env, 0, 0).is_err());
    let wrong = EnvConfig {
        image_size: 32,
        ..tiny_env()
    };
    assert!(rollout(&out.checkpoint, &wrong, 1, 0).is_err());

    let r = rollout_with(&out.checkpoint, &env, 3, 40, ChunkStrategy::OpenLoopChunk).unwrap();
    assert_eq!(r.trials.iter().map(|t| t.seed).collect::<Vec<_>>(), [40, 41, 42]);
    for t in &r.trials {
        let steps = t.score.execution_steps;
        assert_eq!(t.forward_calls, steps.div_ceil(4).max(1), "{t:?}");
    }
    let csv = rollouts_csv(&r);
    assert_eq!(csv.lines().count(), 4);

    let oracle = oracle_rollout(&env, 5, 40).unwrap();
    assert_eq!(oracle.success_rate_pct, 100.0);
}
