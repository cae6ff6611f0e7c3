//! Sensor masking: turn a policy name into a [`SensorConfig`] and cut each
//! master episode down to the streams and channels that configuration sees.

mod grammar;

pub use grammar::{
    format_policy_name, parse_policy_name, CameraKind, CameraToken, ParseError, ParseErrorKind, PolicyName,
    ProprioKind, ProprioToken, Side,
};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, MasterEpisode, Stream, StreamData, StreamKind};

/// Proprioceptive stream names, in state-vector order.
pub const Q: &str = "q";
pub const QD: &str = "qd";
pub const TAU: &str = "tau";
pub const F_PRES: &str = "f_pres";
pub const PROPRIO_ORDER: [&str; 4] = [Q, QD, TAU, F_PRES];

/// Stream name of one camera, e.g. `cam_active_left`.
pub fn camera_stream_name(kind: CameraKind, left: bool) -> String {
    format!("cam_{}_{}", kind.stream_infix(), if left { "left" } else { "right" })
}

fn proprio_stream(kind: ProprioKind) -> &'static str {
    match kind {
        ProprioKind::Pressure => F_PRES,
        ProprioKind::Velocity => QD,
        ProprioKind::Torque => TAU,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("stream {0:?} is not in the manifest")]
    MissingStream(String),
    #[error("unknown channel group tag {0:?}")]
    UnknownTag(char),
    #[error("channel group {tag:?}: index {index} out of range for stream {stream:?} with {width} channels")]
    ChannelOutOfRange {
        tag: char,
        stream: String,
        index: usize,
        width: usize,
    },
    #[error("invalid channel group map: {0}")]
    Groups(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("frame is missing block {0:?}")]
    MissingBlock(String),
}

/// Named proprio channel groups used by tagged tokens such as `V_A`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelGroupMap {
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl Default for ChannelGroupMap {
    /// Tag `A` covers the two positional channels of the synthetic arm.
    fn default() -> Self {
        Self {
            groups: BTreeMap::from([("A".to_string(), vec![0, 1])]),
        }
    }
}

impl ChannelGroupMap {
    pub fn from_json(text: &str) -> Result<Self, MaskError> {
        let map: Self = serde_json::from_str(text).map_err(|e| MaskError::Groups(e.to_string()))?;
        for key in map.groups.keys() {
            let mut chars = key.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_uppercase() => {}
                _ => return Err(MaskError::Groups(format!("tag {key:?} is not one uppercase letter"))),
            }
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, MaskError> {
        let text = std::fs::read_to_string(path).map_err(|e| MaskError::Groups(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("group map serializes")
    }

    /// Sorted, deduplicated channel set for `tag`.
    pub fn channels(&self, tag: char) -> Result<Vec<usize>, MaskError> {
        let mut v = self
            .groups
            .get(tag.encode_utf8(&mut [0; 4]) as &str)
            .cloned()
            .ok_or(MaskError::UnknownTag(tag))?;
        v.sort_unstable();
        v.dedup();
        Ok(v)
    }
}

/// How excluded streams are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Excluded streams and channels are removed.
    #[default]
    Omit,
    /// Every stream is kept; excluded values are replaced with zeros.
    ZeroFill,
}

/// Channels selected from one proprio stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProprioSelection {
    pub stream: String,
    /// Ascending channel indices.
    pub channels: Vec<usize>,
    /// Channel count of the stream in the manifest.
    pub width: usize,
}

/// Resolved view of the master dataset for one policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Canonical policy name.
    pub policy: String,
    pub mode: MaskMode,
    /// Camera streams fed to the model, in canonical order.
    pub cameras: Vec<String>,
    /// Every camera stream in the manifest, canonical order.
    pub all_cameras: Vec<String>,
    /// One entry per proprio stream present in the manifest, in state order.
    /// Unselected blocks carry an empty channel list; `q` is always complete.
    pub blocks: Vec<ProprioSelection>,
    pub action: String,
    pub timestamp: String,
}

impl SensorConfig {
    pub fn state_dim(&self) -> usize {
        match self.mode {
            MaskMode::Omit => self.blocks.iter().map(|b| b.channels.len()).sum(),
            MaskMode::ZeroFill => self.blocks.iter().map(|b| b.width).sum(),
        }
    }

    /// Camera streams present in a masked episode.
    pub fn masked_cameras(&self) -> &[String] {
        match self.mode {
            MaskMode::Omit => &self.cameras,
            MaskMode::ZeroFill => &self.all_cameras,
        }
    }

    pub fn block(&self, stream: &str) -> Option<&ProprioSelection> {
        self.blocks.iter().find(|b| b.stream == stream)
    }

    fn emitted_blocks(&self) -> impl Iterator<Item = &ProprioSelection> {
        let mode = self.mode;
        self.blocks
            .iter()
            .filter(move |b| mode == MaskMode::ZeroFill || !b.channels.is_empty())
    }
}

fn proprio_width(manifest: &Manifest, name: &str) -> Result<usize, MaskError> {
    let d = manifest
        .stream(name)
        .ok_or_else(|| MaskError::MissingStream(name.to_string()))?;
    if d.kind != StreamKind::Proprio || d.shape.len() != 1 {
        return Err(MaskError::Schema(format!("{name:?} is not a rank-1 proprio stream")));
    }
    Ok(d.shape[0])
}

fn camera_rank(name: &str) -> Option<(CameraKind, bool)> {
    [CameraKind::Static, CameraKind::Wrist, CameraKind::Active]
        .into_iter()
        .flat_map(|k| [(k, true), (k, false)])
        .find(|&(k, l)| camera_stream_name(k, l) == name)
}

pub fn resolve_config(name: &PolicyName, groups: &ChannelGroupMap, manifest: &Manifest) -> Result<SensorConfig, MaskError> {
    resolve_config_with(name, groups, manifest, MaskMode::Omit)
}

pub fn resolve_config_with(
    name: &PolicyName,
    groups: &ChannelGroupMap,
    manifest: &Manifest,
    mode: MaskMode,
) -> Result<SensorConfig, MaskError> {
    let name = name.normalize();
    if name.cameras.is_empty() {
        return Err(MaskError::Schema("policy selects no camera".into()));
    }

    let mut cameras: Vec<String> = Vec::new();
    for tok in &name.cameras {
        let sides: &[bool] = match tok.side {
            Side::Both => &[true, false],
            Side::Left => &[true],
            Side::Right => &[false],
        };
        for &left in sides {
            let s = camera_stream_name(tok.kind, left);
            match manifest.stream(&s) {
                Some(d) if d.kind == StreamKind::Camera => {}
                _ => return Err(MaskError::MissingStream(s)),
            }
            if !cameras.contains(&s) {
                cameras.push(s);
            }
        }
    }

    let mut all_cameras: Vec<(CameraKind, bool, String)> = manifest
        .streams
        .iter()
        .filter(|s| s.kind == StreamKind::Camera)
        .map(|s| {
            let (k, l) = camera_rank(&s.name).unwrap_or((CameraKind::Active, false));
            (k, !l, s.name.clone())
        })
        .collect();
    all_cameras.sort();

    let q_width = proprio_width(manifest, Q)?;
    let mut selected: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    selected.insert(Q, (0..q_width).collect());
    for tok in &name.proprio {
        let stream = proprio_stream(tok.kind);
        let width = proprio_width(manifest, stream)?;
        let chans = match tok.tag {
            None => (0..width).collect(),
            Some(tag) => {
                let c = groups.channels(tag)?;
                if let Some(&index) = c.iter().find(|&&i| i >= width) {
                    return Err(MaskError::ChannelOutOfRange {
                        tag,
                        stream: stream.to_string(),
                        index,
                        width,
                    });
                }
                c
            }
        };
        let entry = selected.entry(stream).or_default();
        entry.extend(chans);
        entry.sort_unstable();
        entry.dedup();
    }

    let mut blocks = Vec::new();
    for stream in PROPRIO_ORDER {
        if manifest.stream(stream).is_none() {
            continue;
        }
        let width = proprio_width(manifest, stream)?;
        blocks.push(ProprioSelection {
            stream: stream.to_string(),
            channels: selected.remove(stream).unwrap_or_default(),
            width,
        });
    }

    let action = manifest
        .action_stream()
        .ok_or_else(|| MaskError::Schema("manifest has no action stream".into()))?
        .name
        .clone();
    let timestamp = manifest
        .timestamp_stream()
        .ok_or_else(|| MaskError::Schema("manifest has no timestamp stream".into()))?
        .name
        .clone();

    Ok(SensorConfig {
        policy: format_policy_name(&name),
        mode,
        cameras,
        all_cameras: all_cameras.into_iter().map(|(_, _, n)| n).collect(),
        blocks,
        action,
        timestamp,
    })
}

/// Episode restricted to the streams and channels of one [`SensorConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedEpisode {
    pub episode_id: u32,
    pub timestamps: Vec<f64>,
    /// Camera streams in `config.masked_cameras()` order.
    pub cameras: Vec<Stream>,
    /// Proprio blocks in state order, holding only the selected channels
    /// (or every channel, zero-filled, in [`MaskMode::ZeroFill`]).
    pub blocks: Vec<Stream>,
    pub actions: Stream,
}

/// One time step of a masked episode.
#[derive(Debug, Clone, Copy)]
pub struct MaskedFrame<'a> {
    pub cameras: &'a [Stream],
    pub blocks: &'a [Stream],
    pub t: usize,
}

impl MaskedEpisode {
    pub fn frames(&self) -> usize {
        self.timestamps.len()
    }

    pub fn frame(&self, t: usize) -> MaskedFrame<'_> {
        MaskedFrame {
            cameras: &self.cameras,
            blocks: &self.blocks,
            t,
        }
    }

    pub fn action(&self, t: usize) -> Option<&[f32]> {
        self.actions.f32_frame(t)
    }
}

fn episode_stream<'a>(episode: &'a MasterEpisode, name: &str) -> Result<&'a Stream, MaskError> {
    episode
        .stream(name)
        .ok_or_else(|| MaskError::Schema(format!("episode {} lacks stream {name:?}", episode.episode_id)))
}

pub fn apply_mask(episode: &MasterEpisode, config: &SensorConfig) -> Result<MaskedEpisode, MaskError> {
    let ts = episode_stream(episode, &config.timestamp)?;
    let timestamps = match &ts.data {
        StreamData::F64(v) if ts.dims.is_empty() => v.clone(),
        _ => return Err(MaskError::Schema("timestamp stream is not scalar f64".into())),
    };
    let frames = timestamps.len();
    let check_len = |s: &Stream| -> Result<(), MaskError> {
        if s.frames() != frames || s.data.len() != frames * s.frame_len() {
            return Err(MaskError::Schema(format!(
                "stream {:?} has {} frames, timestamps have {frames}",
                s.name,
                s.frames()
            )));
        }
        Ok(())
    };

    let mut cameras = Vec::new();
    for name in config.masked_cameras() {
        let s = episode_stream(episode, name)?;
        if !matches!(s.data, StreamData::U8(_)) {
            return Err(MaskError::Schema(format!("camera {name:?} is not u8")));
        }
        check_len(s)?;
        if config.mode == MaskMode::ZeroFill && !config.cameras.contains(name) {
            cameras.push(Stream::new(name, &s.dims, StreamData::U8(vec![0; s.data.len()])));
        } else {
            cameras.push(s.clone());
        }
    }

    let mut blocks = Vec::new();
    for sel in config.emitted_blocks() {
        let s = episode_stream(episode, &sel.stream)?;
        check_len(s)?;
        let values = match &s.data {
            StreamData::F32(v) if s.dims == [sel.width] => v,
            _ => {
                return Err(MaskError::Schema(format!(
                    "stream {:?} is not f32 with {} channels",
                    sel.stream, sel.width
                )))
            }
        };
        let out: Vec<f32> = match config.mode {
            MaskMode::Omit => values
                .chunks_exact(sel.width)
                .flat_map(|row| sel.channels.iter().map(move |&c| row[c]))
                .collect(),
            MaskMode::ZeroFill => {
                let mut keep = vec![false; sel.width];
                sel.channels.iter().for_each(|&c| keep[c] = true);
                values
                    .chunks_exact(sel.width)
                    .flat_map(|row| row.iter().zip(&keep).map(|(&x, &k)| if k { x } else { 0.0 }))
                    .collect()
            }
        };
        let dim = out.len() / frames.max(1);
        blocks.push(Stream::new(&sel.stream, &[dim], StreamData::F32(out)));
    }

    let actions = episode_stream(episode, &config.action)?;
    check_len(actions)?;

    Ok(MaskedEpisode {
        episode_id: episode.episode_id,
        timestamps,
        cameras,
        blocks,
        actions: actions.clone(),
    })
}

/// Concatenates the state vector `[q, qd, tau, f_pres]` for one frame.
pub fn assemble_state(frame: &MaskedFrame<'_>, config: &SensorConfig) -> Result<Vec<f64>, MaskError> {
    let mut out = Vec::with_capacity(config.state_dim());
    for sel in config.emitted_blocks() {
        let block = frame
            .blocks
            .iter()
            .find(|b| b.name == sel.stream)
            .ok_or_else(|| MaskError::MissingBlock(sel.stream.clone()))?;
        let want = match config.mode {
            MaskMode::Omit => sel.channels.len(),
            MaskMode::ZeroFill => sel.width,
        };
        let row = block
            .f32_frame(frame.t)
            .filter(|r| r.len() == want)
            .ok_or_else(|| MaskError::MissingBlock(sel.stream.clone()))?;
        out.extend(row.iter().map(|&x| x as f64));
    }
    Ok(out)
}
