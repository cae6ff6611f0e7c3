use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::format::{decode_episode, encode_episode};
use super::{io_err, DatasetError, Manifest, MasterEpisode, StreamData, DATA_LIMITED_EPISODES};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn episode_file_name(episode_id: u32) -> String {
    format!("ep_{episode_id:05}.uafd")
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    crate::fsutil::write_atomic(path, bytes).map_err(io_err(path))
}

/// A dataset directory: `manifest.json` plus one file per episode.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    /// Creates `root` (if needed) and writes an empty manifest.
    pub fn create(root: impl AsRef<Path>, mut manifest: Manifest) -> Result<Self, DatasetError> {
        manifest.validate()?;
        manifest.episode_count = 0;
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let ds = Self { root, manifest };
        ds.save_manifest()?;
        Ok(ds)
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.episode_count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn episode_path(&self, episode_id: u32) -> PathBuf {
        self.root.join(episode_file_name(episode_id))
    }

    fn save_manifest(&self) -> Result<(), DatasetError> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&self.root.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Validates and appends an episode. The stored id is the next free
    /// index, which is returned; `episode.episode_id` is ignored.
    pub fn write_episode(&mut self, episode: &MasterEpisode) -> Result<u32, DatasetError> {
        episode.validate(&self.manifest)?;
        let id = self.manifest.episode_count;
        let bytes = encode_episode(episode);
        write_atomic(&self.episode_path(id), &bytes)?;
        self.manifest.episode_count += 1;
        self.save_manifest()?;
        Ok(id)
    }

    fn read_raw(&self, episode_id: u32) -> Result<MasterEpisode, DatasetError> {
        if episode_id >= self.manifest.episode_count {
            return Err(DatasetError::NotFound(episode_id));
        }
        let path = self.episode_path(episode_id);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => DatasetError::NotFound(episode_id),
            _ => io_err(&path)(e),
        })?;
        decode_episode(&bytes, episode_id)
    }

    /// Decodes an episode and checks every invariant against the manifest.
    pub fn read_episode(&self, episode_id: u32) -> Result<MasterEpisode, DatasetError> {
        let ep = self.read_raw(episode_id)?;
        ep.validate(&self.manifest)?;
        Ok(ep)
    }

    pub fn episodes(&self) -> impl Iterator<Item = Result<MasterEpisode, DatasetError>> + '_ {
        (0..self.manifest.episode_count).map(move |i| self.read_episode(i))
    }

    /// Per-episode synchronization report. Unreadable files surface as I/O
    /// errors; malformed content is reported as issues.
    pub fn validate_sync(&self) -> Result<ValidationReport, DatasetError> {
        let mut episodes = Vec::with_capacity(self.len());
        for id in 0..self.manifest.episode_count {
            let ep = match self.read_raw(id) {
                Ok(ep) => ep,
                Err(e @ (DatasetError::Io { .. } | DatasetError::NotFound(_))) => return Err(e),
                Err(e) => {
                    episodes.push(EpisodeCheck::failed(id, e.to_string()));
                    continue;
                }
            };
            episodes.push(self.check_episode(&ep));
        }
        let ok = episodes.iter().all(EpisodeCheck::ok);
        Ok(ValidationReport { ok, episodes })
    }

    fn check_episode(&self, ep: &MasterEpisode) -> EpisodeCheck {
        let id = ep.episode_id;
        let mut check = EpisodeCheck {
            episode_id: id,
            frames: None,
            lengths_agree: true,
            timestamps_monotone: true,
            dtypes_conform: true,
            issues: Vec::new(),
        };
        if let Err(e) = ep.check_schema(&self.manifest) {
            check.dtypes_conform = false;
            check.issues.push(SyncIssue {
                episode_id: id,
                stream: None,
                frame: None,
                message: e.to_string(),
            });
            return check;
        }
        let t0 = ep.streams[0].frames();
        for s in &ep.streams {
            if s.frames() != t0 {
                check.lengths_agree = false;
                check.issues.push(SyncIssue {
                    episode_id: id,
                    stream: Some(s.name.clone()),
                    frame: None,
                    message: format!("{} frames, expected {t0}", s.frames()),
                });
            }
        }
        if check.lengths_agree {
            check.frames = Some(t0);
            if t0 < 2 {
                check.lengths_agree = false;
                check.issues.push(SyncIssue {
                    episode_id: id,
                    stream: None,
                    frame: None,
                    message: format!("{t0} frames, need at least 2"),
                });
            }
        }
        let ts_name = self.manifest.timestamp_stream().map(|d| d.name.clone());
        if let Some(StreamData::F64(ts)) = ts_name.as_deref().and_then(|n| ep.stream(n)).map(|s| &s.data) {
            for (i, w) in ts.windows(2).enumerate() {
                if !(w[1] > w[0]) {
                    check.timestamps_monotone = false;
                    check.issues.push(SyncIssue {
                        episode_id: id,
                        stream: ts_name.clone(),
                        frame: Some(i + 1),
                        message: format!("timestamp {} does not follow {}", w[1], w[0]),
                    });
                }
            }
        }
        check
    }

    /// Episode/frame counts, total duration and per-stream byte totals.
    pub fn stats(&self) -> Result<DatasetStats, DatasetError> {
        let mut stats = DatasetStats {
            episodes: self.len(),
            frames: 0,
            duration_seconds: 0.0,
            stream_bytes: self
                .manifest
                .streams
                .iter()
                .map(|s| (s.name.clone(), 0u64))
                .collect(),
            data_limited: self.len() <= DATA_LIMITED_EPISODES,
        };
        for ep in self.episodes() {
            let ep = ep?;
            let ts = ep
                .timestamps(&self.manifest)
                .expect("validated episode has timestamps");
            stats.frames += ts.len();
            stats.duration_seconds += ts[ts.len() - 1] - ts[0];
            for (slot, (s, d)) in stats
                .stream_bytes
                .iter_mut()
                .zip(ep.streams.iter().zip(&self.manifest.streams))
            {
                slot.1 += (s.data.len() * d.dtype.size()) as u64;
            }
        }
        Ok(stats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyncIssue {
    pub episode_id: u32,
    pub stream: Option<String>,
    pub frame: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeCheck {
    pub episode_id: u32,
    pub frames: Option<usize>,
    pub lengths_agree: bool,
    pub timestamps_monotone: bool,
    pub dtypes_conform: bool,
    pub issues: Vec<SyncIssue>,
}

impl EpisodeCheck {
    fn failed(episode_id: u32, message: String) -> Self {
        Self {
            episode_id,
            frames: None,
            lengths_agree: false,
            timestamps_monotone: false,
            dtypes_conform: false,
            issues: vec![SyncIssue {
                episode_id,
                stream: None,
                frame: None,
                message,
            }],
        }
    }

    pub fn ok(&self) -> bool {
        self.lengths_agree && self.timestamps_monotone && self.dtypes_conform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub episodes: Vec<EpisodeCheck>,
}

impl ValidationReport {
    pub fn issues(&self) -> impl Iterator<Item = &SyncIssue> {
        self.episodes.iter().flat_map(|e| e.issues.iter())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub episodes: usize,
    pub frames: usize,
    pub duration_seconds: f64,
    pub stream_bytes: Vec<(String, u64)>,
    pub data_limited: bool,
}
