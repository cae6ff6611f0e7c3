//! Little-endian block codec shared by episode files and checkpoints.

use super::{DType, DatasetError, MasterEpisode, Stream, StreamData};

pub const EPISODE_MAGIC: &[u8; 4] = b"UAF1";

/// Appends one named block: header, `T`, then packed values.
pub fn encode_block(buf: &mut Vec<u8>, stream: &Stream) {
    let name = stream.name.as_bytes();
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name);
    buf.push(stream.data.dtype().code());
    buf.push(stream.dims.len() as u8);
    for &d in &stream.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(stream.frames() as u32).to_le_bytes());
    match &stream.data {
        StreamData::U8(v) => buf.extend_from_slice(v),
        StreamData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        StreamData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
}

/// Cursor over an encoded buffer; every error carries its byte offset.
pub struct BlockReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BlockReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn err(&self, detail: impl Into<String>) -> DatasetError {
        DatasetError::Format {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        if self.remaining() < n {
            return Err(self.err(format!("need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn block(&mut self) -> Result<Stream, DatasetError> {
        let name_len = self.u16()? as usize;
        let start = self.pos;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| DatasetError::Format {
                offset: start,
                detail: "stream name is not UTF-8".into(),
            })?
            .to_string();
        let code = self.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| self.err(format!("unknown dtype code {code}")))?;
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = self.u32()? as usize;
            if d == 0 {
                return Err(self.err(format!("stream {name:?} has a zero dimension")));
            }
            dims.push(d);
        }
        let frames = self.u32()? as usize;
        let count = dims
            .iter()
            .try_fold(frames, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.err("value count overflows"))?;
        let nbytes = count
            .checked_mul(dtype.size())
            .ok_or_else(|| self.err("byte count overflows"))?;
        let raw = self.take(nbytes)?;
        let data = match dtype {
            DType::U8 => StreamData::U8(raw.to_vec()),
            DType::F32 => StreamData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => StreamData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Stream { name, dims, data })
    }
}

/// Reads `count` consecutive blocks and requires the buffer to end exactly.
pub fn decode_blocks(reader: &mut BlockReader<'_>, count: usize) -> Result<Vec<Stream>, DatasetError> {
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        out.push(reader.block()?);
    }
    if reader.remaining() != 0 {
        return Err(reader.err(format!("{} trailing bytes", reader.remaining())));
    }
    Ok(out)
}

pub(crate) fn encode_episode(ep: &MasterEpisode) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EPISODE_MAGIC);
    buf.extend_from_slice(&(ep.streams.len() as u32).to_le_bytes());
    for s in &ep.streams {
        encode_block(&mut buf, s);
    }
    buf
}

/// Structural decode only; manifest conformance is checked by the caller.
pub(crate) fn decode_episode(bytes: &[u8], episode_id: u32) -> Result<MasterEpisode, DatasetError> {
    let mut r = BlockReader::new(bytes);
    let magic = r.take(4)?;
    if magic != EPISODE_MAGIC {
        return Err(DatasetError::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}"),
        });
    }
    let count = r.u32()? as usize;
    let streams = decode_blocks(&mut r, count)?;
    Ok(MasterEpisode { episode_id, streams })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_buffer_reports_offset() {
        let ep = MasterEpisode {
            episode_id: 0,
            streams: vec![Stream::new("timestamp", &[], StreamData::F64(vec![0.0, 1.0]))],
        };
        let bytes = encode_episode(&ep);
        let err = decode_episode(&bytes[..bytes.len() - 3], 0).unwrap_err();
        assert!(matches!(err, DatasetError::Format { offset, .. } if offset > 8));
        assert_eq!(decode_episode(&bytes, 0).unwrap(), ep);
    }
}
