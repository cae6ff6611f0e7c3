//! Checkpoint file: `"UAFC"`, u32 header length, JSON header, u32 block
//! count, then named f64 blocks in the episode block encoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, Normalizer, TrainConfig, TrainError};
use crate::dataset::{decode_blocks, encode_block, BlockReader, Stream, StreamData};
use crate::env::EnvConfig;
use crate::mask::{ChannelGroupMap, SensorConfig};
use crate::model::{ActParams, ModelConfig, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UAFC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub policy: String,
    pub sensor: SensorConfig,
    pub groups: ChannelGroupMap,
    pub train: TrainConfig,
    pub steps: u64,
    pub dataset_name: String,
    /// Environment that generated the training data, when known.
    pub env: Option<EnvConfig>,
    pub normalizer: Normalizer,
    pub model: ActParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    policy: String,
    steps: u64,
    dataset_name: String,
    model: ModelConfig,
    sensor: SensorConfig,
    groups: ChannelGroupMap,
    train: TrainConfig,
    env: Option<EnvConfig>,
}

const NORM_BLOCKS: [&str; 4] = ["norm.state_mean", "norm.state_std", "norm.action_mean", "norm.action_std"];

fn bad(m: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(m.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            policy: self.policy.clone(),
            steps: self.steps,
            dataset_name: self.dataset_name.clone(),
            model: self.model.config.clone(),
            sensor: self.sensor.clone(),
            groups: self.groups.clone(),
            train: self.train.clone(),
            env: self.env.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        let n = &self.normalizer;
        let norms = [&n.state_mean, &n.state_std, &n.action_mean, &n.action_std];
        buf.extend_from_slice(&((NORM_BLOCKS.len() + self.model.params.len()) as u32).to_le_bytes());
        for (name, v) in NORM_BLOCKS.iter().zip(norms) {
            encode_block(&mut buf, &Stream::new(name, &[v.len()], StreamData::F64(v.clone())));
        }
        for (name, t) in self.model.params.iter() {
            let block = Stream::new(&format!("param.{name}"), t.shape(), StreamData::F64(t.data().to_vec()));
            encode_block(&mut buf, &block);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = BlockReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", header.version)));
        }
        let count = r.u32()? as usize;
        let blocks = decode_blocks(&mut r, count)?;
        let mut it = blocks.into_iter();

        let mut norms: Vec<Vec<f64>> = Vec::new();
        for name in NORM_BLOCKS {
            match it.next() {
                Some(Stream {
                    name: n,
                    data: StreamData::F64(v),
                    ..
                }) if n == name => norms.push(v),
                _ => return Err(bad(format!("missing block {name}"))),
            }
        }
        let mut params = ParamSet::new();
        for s in it {
            let name = s
                .name
                .strip_prefix("param.")
                .ok_or_else(|| bad(format!("unexpected block {:?}", s.name)))?
                .to_string();
            let data = match s.data {
                StreamData::F64(v) => v,
                _ => return Err(bad(format!("parameter {name} is not f64"))),
            };
            if s.dims.iter().product::<usize>() != data.len() {
                return Err(bad(format!("parameter {name} has {} values for {:?}", data.len(), s.dims)));
            }
            if params.get(&name).is_some() {
                return Err(bad(format!("duplicate parameter {name}")));
            }
            params.insert(name, Tensor::new(s.dims, data).map_err(|e| bad(e.to_string()))?);
        }
        let reference = crate::model::init_model(&header.model)?;
        let layout_ok = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .zip(params.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !layout_ok {
            return Err(bad("parameter layout does not match the model config"));
        }
        let [state_mean, state_std, action_mean, action_std]: [Vec<f64>; 4] =
            norms.try_into().expect("four normalization blocks");
        if state_mean.len() != header.model.state_dim || action_mean.len() != header.model.action_dim {
            return Err(bad("normalization statistics do not match the model dims"));
        }
        Ok(Self {
            policy: header.policy,
            sensor: header.sensor,
            groups: header.groups,
            train: header.train,
            steps: header.steps,
            dataset_name: header.dataset_name,
            env: header.env,
            normalizer: Normalizer {
                state_mean,
                state_std,
                action_mean,
                action_std,
            },
            model: ActParams {
                config: header.model,
                params,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        crate::fsutil::write_atomic(path, &self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }
}
