//! Master-dataset storage.
//!
//! A dataset is a directory holding `manifest.json` plus one binary file per
//! episode (`ep_00000.uafd`, ...). Every episode stores every stream listed
//! in the manifest, all sharing a common frame count `T`.
//!
//! Episode file layout (little-endian):
//!
//! ```text
//! "UAF1"  u32 stream_count
//! per stream, in manifest order:
//!   u16 name_len, name bytes, u8 dtype (0=u8, 1=f32, 2=f64), u8 rank,
//!   u32 dims[rank], u32 T, then T·prod(dims) packed values
//! ```

mod format;
mod store;

pub use format::{decode_blocks, encode_block, BlockReader, EPISODE_MAGIC};
pub use store::{episode_file_name, Dataset, MANIFEST_FILE, DatasetStats, EpisodeCheck, SyncIssue, ValidationReport};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

/// Datasets at or below this many episodes are flagged as data-limited.
pub const DATA_LIMITED_EPISODES: usize = 250;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("synchronization error: {0}")]
    Sync(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("episode {0} not found")]
    NotFound(u32),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DatasetError {
    let path = path.into();
    move |source| DatasetError::Io { path, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Camera,
    Proprio,
    Action,
    Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::U8),
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamDescriptor {
    pub name: String,
    pub kind: StreamKind,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub units: String,
}

impl StreamDescriptor {
    pub fn new(name: &str, kind: StreamKind, shape: &[usize], dtype: DType, units: &str) -> Self {
        Self {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
            dtype,
            units: units.to_string(),
        }
    }

    /// Values per frame.
    pub fn frame_len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dataset_name: String,
    pub fps: f64,
    pub streams: Vec<StreamDescriptor>,
    pub episode_count: u32,
}

impl Manifest {
    pub fn new(dataset_name: &str, fps: f64, streams: Vec<StreamDescriptor>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            dataset_name: dataset_name.to_string(),
            fps,
            streams,
            episode_count: 0,
        }
    }

    pub fn stream(&self, name: &str) -> Option<&StreamDescriptor> {
        self.streams.iter().find(|s| s.name == name)
    }

    pub fn timestamp_stream(&self) -> Option<&StreamDescriptor> {
        self.streams.iter().find(|s| s.kind == StreamKind::Timestamp)
    }

    pub fn action_stream(&self) -> Option<&StreamDescriptor> {
        self.streams.iter().find(|s| s.kind == StreamKind::Action)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::Schema(m));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format_version {}", self.format_version));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        for (i, s) in self.streams.iter().enumerate() {
            if self.streams[..i].iter().any(|o| o.name == s.name) {
                return bad(format!("duplicate stream name {:?}", s.name));
            }
            if s.name.is_empty() || s.name.len() > u16::MAX as usize {
                return bad(format!("invalid stream name {:?}", s.name));
            }
            if s.shape.contains(&0) {
                return bad(format!("stream {:?} has a zero dimension", s.name));
            }
            let conforms = match s.kind {
                StreamKind::Camera => s.dtype == DType::U8 && s.shape.len() == 3 && s.shape[2] == 3,
                StreamKind::Proprio | StreamKind::Action => s.dtype == DType::F32 && s.shape.len() == 1,
                StreamKind::Timestamp => s.dtype == DType::F64 && s.shape.is_empty(),
            };
            if !conforms {
                return bad(format!(
                    "stream {:?} of kind {:?} cannot have shape {:?} and dtype {:?}",
                    s.name, s.kind, s.shape, s.dtype
                ));
            }
        }
        for kind in [StreamKind::Timestamp, StreamKind::Action] {
            let n = self.streams.iter().filter(|s| s.kind == kind).count();
            if n != 1 {
                return bad(format!("expected exactly one {kind:?} stream, found {n}"));
            }
        }
        Ok(())
    }
}

/// Raw values of one stream across all frames.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl StreamData {
    pub fn dtype(&self) -> DType {
        match self {
            StreamData::U8(_) => DType::U8,
            StreamData::F32(_) => DType::F32,
            StreamData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            StreamData::U8(v) => v.len(),
            StreamData::F32(v) => v.len(),
            StreamData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bitwise equality (distinguishes NaN payloads and signed zeros).
    pub fn bit_eq(&self, other: &StreamData) -> bool {
        match (self, other) {
            (StreamData::U8(a), StreamData::U8(b)) => a == b,
            (StreamData::F32(a), StreamData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (StreamData::F64(a), StreamData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// One stream of an episode: per-frame dims plus `T` frames of values.
#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: StreamData,
}

impl Stream {
    pub fn new(name: &str, dims: &[usize], data: StreamData) -> Self {
        Self {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn frames(&self) -> usize {
        match self.frame_len() {
            0 => 0,
            n => self.data.len() / n,
        }
    }

    pub fn f32_frame(&self, t: usize) -> Option<&[f32]> {
        let n = self.frame_len();
        match &self.data {
            StreamData::F32(v) => v.get(t * n..(t + 1) * n),
            _ => None,
        }
    }

    pub fn u8_frame(&self, t: usize) -> Option<&[u8]> {
        let n = self.frame_len();
        match &self.data {
            StreamData::U8(v) => v.get(t * n..(t + 1) * n),
            _ => None,
        }
    }
}

/// One demonstration holding every stream of the master dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterEpisode {
    pub episode_id: u32,
    pub streams: Vec<Stream>,
}

impl MasterEpisode {
    pub fn stream(&self, name: &str) -> Option<&Stream> {
        self.streams.iter().find(|s| s.name == name)
    }

    /// Common frame count, if all streams agree.
    pub fn frames(&self) -> Option<usize> {
        let first = self.streams.first()?.frames();
        self.streams.iter().all(|s| s.frames() == first).then_some(first)
    }

    pub fn timestamps(&self, manifest: &Manifest) -> Option<&[f64]> {
        let ts = manifest.timestamp_stream()?;
        match &self.stream(&ts.name)?.data {
            StreamData::F64(v) => Some(v),
            _ => None,
        }
    }

    /// Checks stream roster, dtypes and dims against the manifest.
    pub fn check_schema(&self, manifest: &Manifest) -> Result<(), DatasetError> {
        if self.streams.len() != manifest.streams.len() {
            return Err(DatasetError::Schema(format!(
                "episode has {} streams, manifest lists {}",
                self.streams.len(),
                manifest.streams.len()
            )));
        }
        for (s, d) in self.streams.iter().zip(&manifest.streams) {
            if s.name != d.name {
                return Err(DatasetError::Schema(format!(
                    "stream {:?} where manifest expects {:?}",
                    s.name, d.name
                )));
            }
            if s.data.dtype() != d.dtype || s.dims != d.shape {
                return Err(DatasetError::Schema(format!(
                    "stream {:?}: {:?}{:?} vs manifest {:?}{:?}",
                    s.name,
                    s.data.dtype(),
                    s.dims,
                    d.dtype,
                    d.shape
                )));
            }
            if s.data.len() % s.frame_len() != 0 {
                return Err(DatasetError::Schema(format!(
                    "stream {:?} holds a partial frame",
                    s.name
                )));
            }
        }
        Ok(())
    }

    /// Full invariant check: schema, common length `T ≥ 2`, strictly
    /// increasing timestamps.
    pub fn validate(&self, manifest: &Manifest) -> Result<usize, DatasetError> {
        self.check_schema(manifest)?;
        let t = self.streams[0].frames();
        if let Some(s) = self.streams.iter().find(|s| s.frames() != t) {
            return Err(DatasetError::Sync(format!(
                "episode {}: stream {:?} has {} frames, {:?} has {t}",
                self.episode_id,
                s.name,
                s.frames(),
                self.streams[0].name
            )));
        }
        if t < 2 {
            return Err(DatasetError::Sync(format!(
                "episode {} has {t} frames, need at least 2",
                self.episode_id
            )));
        }
        let ts = self
            .timestamps(manifest)
            .ok_or_else(|| DatasetError::Schema("missing timestamp stream".into()))?;
        if let Some(i) = ts.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(DatasetError::Validation(format!(
                "episode {}: timestamp at frame {} is not after frame {i}",
                self.episode_id,
                i + 1
            )));
        }
        Ok(t)
    }
}
