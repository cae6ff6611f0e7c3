//! Masking properties over randomized episodes and policy names.

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uaf_core::dataset::{Manifest, MasterEpisode, Stream, StreamData, StreamKind};
use uaf_core::env::{sensor_manifest, EnvConfig};
use uaf_core::mask::{
    apply_mask, assemble_state, format_policy_name, parse_policy_name, resolve_config, resolve_config_with,
    CameraKind, CameraToken, ChannelGroupMap, MaskMode, PolicyName, ProprioKind, ProprioToken, SensorConfig, Side,
};

fn small_manifest() -> Manifest {
    sensor_manifest(
        &EnvConfig {
            image_size: 4,
            ..EnvConfig::default()
        },
        "mask-prop",
    )
}

fn groups() -> ChannelGroupMap {
    ChannelGroupMap::from_json(r#"{"groups": {"A": [0, 1], "B": [3], "C": [1, 2, 3]}}"#).unwrap()
}

fn random_episode(m: &Manifest, rng: &mut ChaCha8Rng) -> MasterEpisode {
    let t = rng.random_range(2..6);
    let streams = m
        .streams
        .iter()
        .map(|d| {
            let n = t * d.frame_len();
            let data = match d.kind {
                StreamKind::Camera => StreamData::U8((0..n).map(|_| rng.random()).collect()),
                StreamKind::Timestamp => {
                    let mut acc = 0.0;
                    StreamData::F64(
                        (0..t)
                            .map(|_| {
                                acc += rng.random_range(0.01..0.1);
                                acc
                            })
                            .collect(),
                    )
                }
                _ => StreamData::F32((0..n).map(|_| f32::from_bits(rng.random())).collect()),
            };
            Stream::new(&d.name, &d.shape, data)
        })
        .collect();
    MasterEpisode {
        episode_id: rng.random_range(0..1000),
        streams,
    }
}

fn camera_token() -> impl Strategy<Value = CameraToken> {
    (0..3usize, 0..3usize).prop_map(|(k, s)| {
        CameraToken::new(
            [CameraKind::Static, CameraKind::Wrist, CameraKind::Active][k],
            [Side::Both, Side::Left, Side::Right][s],
        )
    })
}

fn proprio_token() -> impl Strategy<Value = ProprioToken> {
    (0..3usize, proptest::option::of(0..3usize)).prop_map(|(k, t)| {
        ProprioToken::new(
            [ProprioKind::Pressure, ProprioKind::Velocity, ProprioKind::Torque][k],
            t.map(|i| ['A', 'B', 'C'][i]),
        )
    })
}

/// Valid names: unique tokens, at least one camera, P untagged.
fn policy_name() -> impl Strategy<Value = PolicyName> {
    (
        proptest::collection::vec(camera_token(), 1..4),
        proptest::collection::vec(proprio_token(), 0..4),
    )
        .prop_map(|(c, p)| {
            let mut cameras: Vec<CameraToken> = Vec::new();
            for t in c {
                if !cameras.contains(&t) {
                    cameras.push(t);
                }
            }
            let mut proprio: Vec<ProprioToken> = Vec::new();
            for mut t in p {
                if t.kind == ProprioKind::Pressure {
                    t.tag = None;
                }
                if !proprio.contains(&t) {
                    proprio.push(t);
                }
            }
            PolicyName { cameras, proprio }
        })
}

fn resolve(name: &PolicyName, m: &Manifest) -> SensorConfig {
    resolve_config(name, &groups(), m).unwrap()
}

fn f32_bits(s: &Stream) -> Vec<u32> {
    match &s.data {
        StreamData::F32(v) => v.iter().map(|x| x.to_bits()).collect(),
        _ => panic!("not f32"),
    }
}

/// Every retained camera frame and proprio channel equals the master value.
fn check_against_master(ep: &MasterEpisode, cfg: &SensorConfig) -> Result<(), TestCaseError> {
    let masked = apply_mask(ep, cfg).unwrap();
    let t = ep.frames().unwrap();
    prop_assert_eq!(masked.frames(), t);
    let ts = match &ep.stream("timestamp").unwrap().data {
        StreamData::F64(v) => v.clone(),
        _ => unreachable!(),
    };
    prop_assert!(masked.timestamps.iter().zip(&ts).all(|(a, b)| a.to_bits() == b.to_bits()));
    prop_assert_eq!(masked.cameras.len(), cfg.cameras.len());
    for cam in &masked.cameras {
        prop_assert!(cfg.cameras.contains(&cam.name));
        prop_assert!(cam.data.bit_eq(&ep.stream(&cam.name).unwrap().data));
    }
    for block in &masked.blocks {
        let sel = cfg.block(&block.name).unwrap();
        let master = f32_bits(ep.stream(&block.name).unwrap());
        let got = f32_bits(block);
        prop_assert_eq!(got.len(), t * sel.channels.len());
        for f in 0..t {
            for (j, &c) in sel.channels.iter().enumerate() {
                prop_assert_eq!(got[f * sel.channels.len() + j], master[f * sel.width + c]);
            }
        }
    }
    prop_assert!(masked.actions.data.bit_eq(&ep.stream("action").unwrap().data));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn parse_format_roundtrip(name in policy_name()) {
        let text = format_policy_name(&name);
        let back = parse_policy_name(&text).unwrap();
        prop_assert_eq!(&back, &name.normalize());
        prop_assert_eq!(format_policy_name(&back), text);
    }

    #[test]
    fn state_dim_is_monotone(a in policy_name(), b in policy_name()) {
        let m = small_manifest();
        let union = PolicyName {
            cameras: a.cameras.iter().chain(&b.cameras).fold(Vec::new(), |mut v, t| {
                if !v.contains(t) { v.push(*t); }
                v
            }),
            proprio: a.proprio.iter().chain(&b.proprio).fold(Vec::new(), |mut v, t| {
                if !v.contains(t) { v.push(*t); }
                v
            }),
        };
        prop_assert!(a.is_subset_of(&union));
        prop_assert!(resolve(&a, &m).state_dim() <= resolve(&union, &m).state_dim());
        prop_assert!(resolve(&a, &m).cameras.len() <= resolve(&union, &m).cameras.len());
    }
}

#[test]
fn identical_demonstrations_guarantee() {
    let m = small_manifest();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let configs: Vec<SensorConfig> = (0..12)
        .map(|_| resolve(&policy_name().new_tree(&mut runner).unwrap().current(), &m))
        .collect();
    let mut violations = 0;
    for _ in 0..120 {
        let ep = random_episode(&m, &mut rng);
        for cfg in &configs {
            if check_against_master(&ep, cfg).is_err() {
                violations += 1;
            }
        }
        // pairwise agreement on shared streams follows from master agreement,
        // but is checked directly as well
        for (i, a) in configs.iter().enumerate() {
            for b in &configs[i + 1..] {
                let (ma, mb) = (apply_mask(&ep, a).unwrap(), apply_mask(&ep, b).unwrap());
                for ca in &ma.cameras {
                    if let Some(cb) = mb.cameras.iter().find(|c| c.name == ca.name) {
                        violations += usize::from(!ca.data.bit_eq(&cb.data));
                    }
                }
                violations += usize::from(ma.timestamps != mb.timestamps);
            }
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn masking_is_pure() {
    let m = small_manifest();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ep = random_episode(&m, &mut rng);
    let cfg = resolve(&parse_policy_name("S_LWA-PV_AT_A").unwrap(), &m);
    let a = apply_mask(&ep, &cfg).unwrap();
    let b = apply_mask(&ep, &cfg).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
}

#[test]
fn full_inclusion_keeps_everything() {
    let m = small_manifest();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ep = random_episode(&m, &mut rng);
    let cfg = resolve(&parse_policy_name("SWA-PVT").unwrap(), &m);
    assert_eq!(cfg.cameras.len(), 6);
    assert_eq!(cfg.state_dim(), 16);
    let masked = apply_mask(&ep, &cfg).unwrap();
    for s in masked.cameras.iter().chain(&masked.blocks) {
        assert!(s.data.bit_eq(&ep.stream(&s.name).unwrap().data), "{}", s.name);
    }
}

#[test]
fn config_a_keeps_two_cameras_and_q() {
    let m = small_manifest();
    let cfg = resolve(&parse_policy_name("A").unwrap(), &m);
    assert_eq!(cfg.cameras, ["cam_active_left", "cam_active_right"]);
    assert_eq!(cfg.state_dim(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let masked = apply_mask(&random_episode(&m, &mut rng), &cfg).unwrap();
    assert_eq!(masked.cameras.len(), 2);
    assert_eq!(masked.blocks.iter().map(|b| b.name.as_str()).collect::<Vec<_>>(), ["q"]);
}

#[test]
fn assemble_matches_scripted_concatenation() {
    let m = small_manifest();
    let g = ChannelGroupMap::from_json(r#"{"groups": {"X": [0], "Y": [1]}}"#).unwrap();
    let cfg = resolve_config(&parse_policy_name("A-PV_XT_Y").unwrap(), &g, &m).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ep = random_episode(&m, &mut rng);
    let masked = apply_mask(&ep, &cfg).unwrap();
    let row = |name: &str, t: usize| -> Vec<f64> {
        ep.stream(name).unwrap().f32_frame(t).unwrap().iter().map(|&x| x as f64).collect()
    };
    for t in 0..masked.frames() {
        let mut expect = row("q", t);
        expect.push(row("qd", t)[0]);
        expect.push(row("tau", t)[1]);
        expect.extend(row("f_pres", t));
        let got = assemble_state(&masked.frame(t), &cfg).unwrap();
        assert_eq!(got.len(), cfg.state_dim());
        assert!(got.iter().zip(&expect).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn zero_fill_mode_keeps_layout() {
    let m = small_manifest();
    let name = parse_policy_name("A-V_A").unwrap();
    let cfg = resolve_config_with(&name, &groups(), &m, MaskMode::ZeroFill).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ep = random_episode(&m, &mut rng);
    let masked = apply_mask(&ep, &cfg).unwrap();
    assert_eq!(masked.cameras.len(), 6);
    let s = assemble_state(&masked.frame(0), &cfg).unwrap();
    assert_eq!(s.len(), cfg.state_dim());
    assert_eq!(s.len(), 16);
    let qd = ep.stream("qd").unwrap().f32_frame(0).unwrap();
    assert_eq!(&s[4..8], &[qd[0] as f64, qd[1] as f64, 0.0, 0.0]);
    assert!(s[8..].iter().all(|&v| v == 0.0));
    for c in &masked.cameras {
        let kept = cfg.cameras.contains(&c.name);
        match &c.data {
            StreamData::U8(v) => assert_eq!(v.iter().all(|&p| p == 0), !kept && !v.is_empty()),
            _ => unreachable!(),
        }
    }
}

#[test]
fn resolution_errors() {
    let m = small_manifest();
    let no_tag = resolve_config(&parse_policy_name("A-V_Q").unwrap(), &groups(), &m);
    assert!(no_tag.is_err());
    let wide = ChannelGroupMap::from_json(r#"{"groups": {"A": [0, 9]}}"#).unwrap();
    assert!(resolve_config(&parse_policy_name("A-V_A").unwrap(), &wide, &m).is_err());
    let mut no_wrist = m.clone();
    no_wrist.streams.retain(|s| !s.name.starts_with("cam_wrist"));
    let err = resolve_config(&parse_policy_name("WA").unwrap(), &groups(), &no_wrist).unwrap_err();
    assert!(err.to_string().contains("cam_wrist_left"), "{err}");
}
