//! Scene rasterization and the simulated sensor suite.

use rand_distr::{Distribution, StandardNormal};

use super::{EnvConfig, WorldState};
use crate::dataset::{DType, Manifest, MasterEpisode, Stream, StreamData, StreamDescriptor, StreamKind};
use crate::mask::{camera_stream_name, CameraKind, F_PRES, Q, QD, TAU};
use crate::rng::{seeded, streams};

/// Pressure pads on the gripper.
pub const PRESSURE_CHANNELS: usize = 4;
/// Pad force at full closure on an object.
pub const CONTACT_FORCE: f64 = 1.0;
const KP: f64 = 1.0;
const KD: f64 = 0.05;
/// Horizontal pixel offset between the two views of a stereo pair.
const STEREO_PX: i64 = 2;
const EE_RADIUS: f64 = 0.025;

const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.12];
const BOX_COLOR: [f64; 3] = [0.15, 0.25, 0.65];
const OBJECT_COLOR: [f64; 3] = [0.9, 0.15, 0.15];
const DISTRACTOR_COLOR: [f64; 3] = [0.85, 0.75, 0.2];

/// RGB image in `[0, 1]`, rows top to bottom (row 0 is the top edge, `y` max).
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Pixels per workspace unit.
    pub ppu: f64,
    pub pixels: Vec<[f64; 3]>,
}

impl Raster {
    fn new(config: &EnvConfig) -> Self {
        let height = config.image_size;
        let ppu = height as f64 / config.workspace[1];
        let width = (config.workspace[0] * ppu).round() as usize;
        Self {
            width,
            height,
            ppu,
            pixels: vec![BACKGROUND; width * height],
        }
    }

    fn get(&self, row: i64, col: i64) -> [f64; 3] {
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            BACKGROUND
        } else {
            self.pixels[row as usize * self.width + col as usize]
        }
    }

    fn blend(&mut self, row: usize, col: usize, color: [f64; 3], alpha: f64) {
        let p = &mut self.pixels[row * self.width + col];
        for c in 0..3 {
            p[c] += (color[c] - p[c]) * alpha;
        }
    }

    /// Pixel-space coordinates (column, row) of a workspace point.
    fn to_px(&self, p: [f64; 2], ws_y: f64) -> (f64, f64) {
        (p[0] * self.ppu, (ws_y - p[1]) * self.ppu)
    }

    fn disc(&mut self, center: (f64, f64), radius: f64, color: [f64; 3]) {
        let (cx, cy) = center;
        let r = radius * self.ppu;
        let c0 = ((cx - r - 1.0).floor().max(0.0)) as usize;
        let c1 = ((cx + r + 1.0).ceil().max(0.0) as usize).min(self.width);
        let r0 = ((cy - r - 1.0).floor().max(0.0)) as usize;
        let r1 = ((cy + r + 1.0).ceil().max(0.0) as usize).min(self.height);
        for row in r0..r1 {
            for col in c0..c1 {
                let d = (col as f64 + 0.5 - cx).hypot(row as f64 + 0.5 - cy);
                let a = (r - d + 0.5).clamp(0.0, 1.0);
                if a > 0.0 {
                    self.blend(row, col, color, a);
                }
            }
        }
    }

    fn rect(&mut self, lo: (f64, f64), hi: (f64, f64), color: [f64; 3]) {
        let overlap = |a0: f64, a1: f64, p: usize| (a1.min(p as f64 + 1.0) - a0.max(p as f64)).max(0.0);
        let c0 = lo.0.floor().max(0.0) as usize;
        let c1 = (hi.0.ceil().max(0.0) as usize).min(self.width);
        let r0 = lo.1.floor().max(0.0) as usize;
        let r1 = (hi.1.ceil().max(0.0) as usize).min(self.height);
        for row in r0..r1 {
            for col in c0..c1 {
                let a = overlap(lo.0, hi.0, col) * overlap(lo.1, hi.1, row);
                if a > 0.0 {
                    self.blend(row, col, color, a);
                }
            }
        }
    }
}

/// Rasterizes the full workspace.
pub fn render_scene(config: &EnvConfig, state: &WorldState) -> Raster {
    let mut img = Raster::new(config);
    let ws_y = config.workspace[1];
    for b in &state.boxes {
        let lo = img.to_px([b.center[0] - b.half, b.center[1] + b.half], ws_y);
        let hi = img.to_px([b.center[0] + b.half, b.center[1] - b.half], ws_y);
        img.rect(lo, hi, BOX_COLOR);
    }
    for (i, o) in state.objects.iter().enumerate().rev() {
        let color = if i == 0 { OBJECT_COLOR } else { DISTRACTOR_COLOR };
        img.disc(img.to_px(*o, ws_y), config.object_radius, color);
    }
    let g = state.grip;
    img.disc(img.to_px(state.end_effector, ws_y), EE_RADIUS, [0.15, 0.45 + 0.5 * g, 0.25]);
    img
}

fn to_u8(pixels: impl Iterator<Item = [f64; 3]>, out: &mut Vec<u8>) {
    for p in pixels {
        out.extend(p.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
}

fn crop(img: &Raster, row0: i64, col0: i64, h: usize, w: usize, scale: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(h * w * scale * scale * 3);
    let px = (0..h * scale).flat_map(|r| {
        (0..w * scale).map(move |c| img.get(row0 + (r / scale) as i64, col0 + (c / scale) as i64))
    });
    to_u8(px, &mut out);
    out
}

fn downsample(img: &Raster, size: usize, shift: i64) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size * 3);
    let span = |i: usize, total: usize| {
        let a = i * total / size;
        let b = ((i + 1) * total / size).max(a + 1);
        (a as i64, b as i64)
    };
    let px = (0..size).flat_map(|r| {
        (0..size).map(move |c| {
            let (ra, rb) = span(r, img.height);
            let (ca, cb) = span(c, img.width);
            let mut acc = [0.0; 3];
            for rr in ra..rb {
                for cc in ca..cb {
                    let p = img.get(rr, cc + shift);
                    (0..3).for_each(|k| acc[k] += p[k]);
                }
            }
            let n = ((rb - ra) * (cb - ca)) as f64;
            acc.map(|v| v / n)
        })
    });
    to_u8(px, &mut out);
    out
}

/// All sensor readings for one state, one frame per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    /// Manifest order, without the action stream.
    pub streams: Vec<Stream>,
}

impl SensorFrame {
    pub fn stream(&self, name: &str) -> Option<&Stream> {
        self.streams.iter().find(|s| s.name == name)
    }

    /// Single-frame episode pairing these readings with `action`.
    pub fn to_episode(&self, action: [f64; 4]) -> MasterEpisode {
        let mut streams = self.streams.clone();
        let ts = streams.pop().expect("timestamp is last");
        streams.push(Stream::new("action", &[4], StreamData::F32(action.map(|v| v as f32).to_vec())));
        streams.push(ts);
        MasterEpisode { episode_id: 0, streams }
    }
}

/// Noise-free pad force for a state.
pub fn contact_force(state: &WorldState) -> f64 {
    if state.is_holding() {
        CONTACT_FORCE * (1.0 - state.grip)
    } else {
        0.0
    }
}

/// Standard deviation of the tactile noise at `snr_db`.
pub fn pressure_noise_std(snr_db: f64) -> f64 {
    CONTACT_FORCE / 10f64.powf(snr_db / 20.0)
}

pub fn render_sensors(config: &EnvConfig, state: &WorldState) -> SensorFrame {
    let img = render_scene(config, state);
    let s = config.image_size;
    let half = STEREO_PX / 2;
    let mut streams = Vec::with_capacity(11);
    let cam = |kind: CameraKind, left: bool, data: Vec<u8>| {
        Stream::new(&camera_stream_name(kind, left), &[s, s, 3], StreamData::U8(data))
    };

    let col0 = (config.pan_center(state.head_pan) * img.ppu - s as f64 / 2.0).round() as i64;
    streams.push(cam(CameraKind::Active, true, crop(&img, 0, col0 - half, s, s, 1)));
    streams.push(cam(CameraKind::Active, false, crop(&img, 0, col0 + half, s, s, 1)));

    streams.push(cam(CameraKind::Static, true, downsample(&img, s, 0)));
    streams.push(cam(CameraKind::Static, false, downsample(&img, s, 1)));

    let w = s / 2;
    let (cx, cy) = img.to_px(state.end_effector, config.workspace[1]);
    let wc = (cx - w as f64 / 2.0).round() as i64;
    let wr = (cy - w as f64 / 2.0).round() as i64;
    streams.push(cam(CameraKind::Wrist, true, crop(&img, wr, wc - half, w, w, 2)));
    streams.push(cam(CameraKind::Wrist, false, crop(&img, wr, wc + half, w, w, 2)));

    let q = state.q();
    let qd: [f64; 4] = std::array::from_fn(|i| (q[i] - state.prev_q[i]) * config.fps);
    let tau: [f64; 4] = std::array::from_fn(|i| KP * (state.command[i] - q[i]) - KD * qd[i]);
    let f0 = contact_force(state);
    let mut f = [f0; PRESSURE_CHANNELS];
    if let Some(snr) = config.snr_db {
        let sd = pressure_noise_std(snr);
        let mut rng = seeded(state.noise_seed, streams::TACTILE_BASE + state.step as u64);
        for v in &mut f {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += sd * n;
        }
    }
    let f32s = |v: &[f64]| StreamData::F32(v.iter().map(|&x| x as f32).collect());
    streams.push(Stream::new(Q, &[4], f32s(&q)));
    streams.push(Stream::new(QD, &[4], f32s(&qd)));
    streams.push(Stream::new(TAU, &[4], f32s(&tau)));
    streams.push(Stream::new(F_PRES, &[PRESSURE_CHANNELS], f32s(&f)));
    streams.push(Stream::new(
        "timestamp",
        &[],
        StreamData::F64(vec![state.step as f64 / config.fps]),
    ));
    SensorFrame { streams }
}

/// Manifest describing every stream the environment records.
pub fn sensor_manifest(config: &EnvConfig, dataset_name: &str) -> Manifest {
    let s = config.image_size;
    let mut v = Vec::new();
    for kind in [CameraKind::Active, CameraKind::Static, CameraKind::Wrist] {
        for left in [true, false] {
            v.push(StreamDescriptor::new(
                &camera_stream_name(kind, left),
                StreamKind::Camera,
                &[s, s, 3],
                DType::U8,
                "rgb8",
            ));
        }
    }
    v.push(StreamDescriptor::new(Q, StreamKind::Proprio, &[4], DType::F32, "x,y,grip,pan"));
    v.push(StreamDescriptor::new(QD, StreamKind::Proprio, &[4], DType::F32, "per second"));
    v.push(StreamDescriptor::new(TAU, StreamKind::Proprio, &[4], DType::F32, "force proxy"));
    v.push(StreamDescriptor::new(
        F_PRES,
        StreamKind::Proprio,
        &[PRESSURE_CHANNELS],
        DType::F32,
        "force proxy",
    ));
    v.push(StreamDescriptor::new("action", StreamKind::Action, &[4], DType::F32, "x,y,grip,pan"));
    v.push(StreamDescriptor::new("timestamp", StreamKind::Timestamp, &[], DType::F64, "s"));
    Manifest::new(dataset_name, config.fps, v)
}
