//! Wire messages exchanged between workers and servers.
//!
//! Frame layout, all little-endian:
//!
//! ```text
//! u32 length (of everything after this field)
//! u8  tag
//! u64 iteration
//! u32 sender
//! ... variant body
//! ```
//!
//! Bodies:
//!
//! | tag | variant         | body                                                  |
//! |-----|-----------------|-------------------------------------------------------|
//! | 1   | EmbedRequest    | u32 n, n × u32 image id                               |
//! | 2   | EmbedResponse   | u32 n, u32 dim, n × (u32 image id, dim × f64)         |
//! | 3   | EmbedGradPush   | same as EmbedResponse                                 |
//! | 4   | IdParamPull     | u32 n, n × u64 packed key                             |
//! | 5   | IdParamValues   | u32 n, u32 dim, n × (u64 packed key, dim × f64)       |
//! | 6   | IdParamPush     | same as IdParamValues                                 |
//! | 7   | ServerSync      | u32 tensors, per tensor (u32 len, len × f64)          |
//! | 8   | WorkerSync      | same as ServerSync                                    |
//! | 9   | Barrier         | empty                                                 |
//!
//! Values travel as `f64` so that distributed training stays bit-comparable
//! with a single process. Traffic is metered at 4 bytes per value, the size
//! of a 32-bit feature: see [`Message::metered_len`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::IdKey;

/// Metering category of a message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    ImageFeature,
    ImageEmbedding,
    IdParam,
    ModelSync,
    SampleData,
    Control,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::ImageFeature,
        Category::ImageEmbedding,
        Category::IdParam,
        Category::ModelSync,
        Category::SampleData,
        Category::Control,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::ImageFeature => "image-feature",
            Category::ImageEmbedding => "image-embedding",
            Category::IdParam => "id-param",
            Category::ModelSync => "model-sync",
            Category::SampleData => "sample-data",
            Category::Control => "control",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    EmbedRequest(Vec<u32>),
    EmbedResponse(BTreeMap<u32, Vec<f64>>),
    EmbedGradPush(BTreeMap<u32, Vec<f64>>),
    IdParamPull(Vec<IdKey>),
    IdParamValues(BTreeMap<IdKey, Vec<f64>>),
    IdParamPush(BTreeMap<IdKey, Vec<f64>>),
    ServerSync(Vec<Vec<f64>>),
    WorkerSync(Vec<Vec<f64>>),
    Barrier,
}

impl Body {
    pub fn tag(&self) -> u8 {
        match self {
            Body::EmbedRequest(_) => 1,
            Body::EmbedResponse(_) => 2,
            Body::EmbedGradPush(_) => 3,
            Body::IdParamPull(_) => 4,
            Body::IdParamValues(_) => 5,
            Body::IdParamPush(_) => 6,
            Body::ServerSync(_) => 7,
            Body::WorkerSync(_) => 8,
            Body::Barrier => 9,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Body::EmbedRequest(_) => "EmbedRequest",
            Body::EmbedResponse(_) => "EmbedResponse",
            Body::EmbedGradPush(_) => "EmbedGradPush",
            Body::IdParamPull(_) => "IdParamPull",
            Body::IdParamValues(_) => "IdParamValues",
            Body::IdParamPush(_) => "IdParamPush",
            Body::ServerSync(_) => "ServerSync",
            Body::WorkerSync(_) => "WorkerSync",
            Body::Barrier => "Barrier",
        }
    }

    pub fn category(&self) -> Category {
        match self {
            Body::EmbedRequest(_) | Body::EmbedResponse(_) | Body::EmbedGradPush(_) => {
                Category::ImageEmbedding
            }
            Body::IdParamPull(_) | Body::IdParamValues(_) | Body::IdParamPush(_) => {
                Category::IdParam
            }
            Body::ServerSync(_) | Body::WorkerSync(_) => Category::ModelSync,
            Body::Barrier => Category::Control,
        }
    }

    fn float_count(&self) -> usize {
        match self {
            Body::EmbedResponse(m) | Body::EmbedGradPush(m) => m.values().map(Vec::len).sum(),
            Body::IdParamValues(m) | Body::IdParamPush(m) => m.values().map(Vec::len).sum(),
            Body::ServerSync(t) | Body::WorkerSync(t) => t.iter().map(Vec::len).sum(),
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub iteration: u64,
    pub sender: u32,
    pub body: Body,
}

const HEADER: usize = 4 + 1 + 8 + 4;

impl Message {
    pub fn new(iteration: u64, sender: usize, body: Body) -> Self {
        Self {
            iteration,
            sender: sender as u32,
            body,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER + 8 * self.body.float_count() + 16);
        out.extend_from_slice(&[0; 4]);
        out.push(self.body.tag());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        match &self.body {
            Body::EmbedRequest(ids) => {
                put_u32(&mut out, ids.len());
                for id in ids {
                    out.extend_from_slice(&id.to_le_bytes());
                }
            }
            Body::EmbedResponse(m) | Body::EmbedGradPush(m) => {
                put_keyed(&mut out, m.iter().map(|(k, v)| (k.to_le_bytes(), v)))?;
            }
            Body::IdParamPull(keys) => {
                put_u32(&mut out, keys.len());
                for k in keys {
                    out.extend_from_slice(&k.pack().to_le_bytes());
                }
            }
            Body::IdParamValues(m) | Body::IdParamPush(m) => {
                put_keyed(&mut out, m.iter().map(|(k, v)| (k.pack().to_le_bytes(), v)))?;
            }
            Body::ServerSync(ts) | Body::WorkerSync(ts) => {
                put_u32(&mut out, ts.len());
                for t in ts {
                    put_u32(&mut out, t.len());
                    put_floats(&mut out, t);
                }
            }
            Body::Barrier => {}
        }
        let len = u32::try_from(out.len() - 4)
            .map_err(|_| Error::Protocol("frame longer than u32::MAX bytes".into()))?;
        out[..4].copy_from_slice(&len.to_le_bytes());
        Ok(out)
    }

    pub fn decode(frame: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: frame, pos: 0 };
        let len = r.u32()? as usize;
        if len != frame.len() - 4 {
            return Err(Error::format(
                "message frame",
                format!("length field {len} but {} bytes follow", frame.len() - 4),
            ));
        }
        let tag = r.u8()?;
        let iteration = r.u64()?;
        let sender = r.u32()?;
        let body = match tag {
            1 => {
                let n = r.u32()? as usize;
                Body::EmbedRequest((0..n).map(|_| r.u32()).collect::<Result<_>>()?)
            }
            2 | 3 => {
                let m = r.keyed(|r| r.u32())?;
                if tag == 2 {
                    Body::EmbedResponse(m)
                } else {
                    Body::EmbedGradPush(m)
                }
            }
            4 => {
                let n = r.u32()? as usize;
                Body::IdParamPull(
                    (0..n)
                        .map(|_| r.u64().map(IdKey::unpack))
                        .collect::<Result<_>>()?,
                )
            }
            5 | 6 => {
                let m = r.keyed(|r| r.u64().map(IdKey::unpack))?;
                if tag == 5 {
                    Body::IdParamValues(m)
                } else {
                    Body::IdParamPush(m)
                }
            }
            7 | 8 => {
                let n = r.u32()? as usize;
                let mut ts = Vec::with_capacity(n.min(1 << 16));
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    ts.push(r.floats(len)?);
                }
                if tag == 7 {
                    Body::ServerSync(ts)
                } else {
                    Body::WorkerSync(ts)
                }
            }
            9 => Body::Barrier,
            t => return Err(Error::format("message frame", format!("unknown tag {t}"))),
        };
        if r.pos != frame.len() {
            return Err(Error::format(
                "message frame",
                format!("{} trailing bytes", frame.len() - r.pos),
            ));
        }
        Ok(Self {
            iteration,
            sender,
            body,
        })
    }

    /// Frame size with every value counted at 4 bytes instead of 8.
    pub fn metered_len(frame_len: usize, body: &Body) -> u64 {
        (frame_len - 4 * body.float_count()) as u64
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_floats(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_keyed<'a, const K: usize>(
    out: &mut Vec<u8>,
    entries: impl ExactSizeIterator<Item = ([u8; K], &'a Vec<f64>)>,
) -> Result<()> {
    put_u32(out, entries.len());
    let dim_at = out.len();
    put_u32(out, 0);
    let mut dim = None;
    for (k, v) in entries {
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(Error::Protocol(format!(
                    "ragged vectors in one message: {d} and {}",
                    v.len()
                )))
            }
            Some(_) => {}
        }
        out.extend_from_slice(&k);
        put_floats(out, v);
    }
    out[dim_at..dim_at + 4].copy_from_slice(&(dim.unwrap_or(0) as u32).to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("message frame", "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::format("message frame", "vector length overflows")
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn keyed<K: Ord>(
        &mut self,
        mut key: impl FnMut(&mut Self) -> Result<K>,
    ) -> Result<BTreeMap<K, Vec<f64>>> {
        let n = self.u32()? as usize;
        let dim = self.u32()? as usize;
        let mut m = BTreeMap::new();
        for _ in 0..n {
            let k = key(self)?;
            let v = self.floats(dim)?;
            if m.insert(k, v).is_some() {
                return Err(Error::format("message frame", "duplicate key"));
            }
        }
        Ok(m)
    }
}
