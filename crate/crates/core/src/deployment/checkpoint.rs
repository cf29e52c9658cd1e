//! Checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! header   magic "DCKP" | u32 version (1) | u32 group count | u64 iteration | u32 crc32 of body
//! body     per group:
//!            u32 name length | name (UTF-8) | u32 tensor count
//!            per tensor: u32 name length | name | u8 dtype (1 = f64)
//!                        | u32 rank | rank × u64 dims | values
//!            u8 optimizer flag; when 1: u64 step, then m and v values for
//!            every tensor in order (same shapes)
//! ```

use std::path::Path;

use crate::ams::TrainState;
use crate::error::{Error, Result};
use crate::model::ParamGroup;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const HEADER_BYTES: usize = 4 + 4 + 4 + 8 + 4;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Adam moments for every tensor of a group.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSlots {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupData {
    pub name: String,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: Option<OptimizerSlots>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub groups: Vec<GroupData>,
}

impl Checkpoint {
    /// Snapshot of every parameter group and its optimizer state.
    pub fn capture(state: &TrainState) -> Self {
        let groups = ParamGroup::ALL
            .iter()
            .map(|&g| {
                let (names, values, m, v, step) = group_slots(state, g);
                GroupData {
                    name: g.name().to_string(),
                    tensors: names
                        .into_iter()
                        .zip(values)
                        .map(|(name, tensor)| NamedTensor { name, tensor })
                        .collect(),
                    optimizer: Some(OptimizerSlots { step, m, v }),
                }
            })
            .collect();
        Self {
            iteration: state.iteration,
            groups,
        }
    }

    pub fn group(&self, group: ParamGroup) -> Result<&GroupData> {
        self.groups
            .iter()
            .find(|g| g.name == group.name())
            .ok_or_else(|| Error::MissingGroup(group.name().to_string()))
    }

    /// Copies one group's values and optimizer state into `state`.
    pub fn restore_group(&self, state: &mut TrainState, group: ParamGroup) -> Result<()> {
        let data = self.group(group)?;
        let mismatch = |detail: String| Error::GroupMismatch {
            group: group.name().to_string(),
            detail,
        };
        let (names, values, _, _, _) = group_slots(state, group);
        if names.len() != data.tensors.len() {
            return Err(mismatch(format!(
                "model has {} tensors, checkpoint has {}",
                names.len(),
                data.tensors.len()
            )));
        }
        for ((n, t), saved) in names.iter().zip(&values).zip(&data.tensors) {
            if *n != saved.name {
                return Err(mismatch(format!("expected tensor `{n}`, found `{}`", saved.name)));
            }
            if t.shape() != saved.tensor.shape() {
                return Err(mismatch(format!(
                    "tensor `{n}` has shape {:?} in the model and {:?} in the checkpoint",
                    t.shape(),
                    saved.tensor.shape()
                )));
            }
        }
        if let Some(opt) = &data.optimizer {
            if opt.m.len() != names.len()
                || opt.v.len() != names.len()
                || opt
                    .m
                    .iter()
                    .chain(&opt.v)
                    .zip(values.iter().chain(&values))
                    .any(|(a, b)| a.shape() != b.shape())
            {
                return Err(mismatch("optimizer state does not match the tensors".into()));
            }
        }
        let saved: Vec<Tensor> = data.tensors.iter().map(|t| t.tensor.clone()).collect();
        write_group(state, group, saved, data.optimizer.clone());
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        for g in &self.groups {
            put_str(&mut body, &g.name);
            body.extend_from_slice(&(g.tensors.len() as u32).to_le_bytes());
            for t in &g.tensors {
                put_str(&mut body, &t.name);
                body.push(DTYPE_F64);
                let shape = t.tensor.shape();
                body.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for &d in shape {
                    body.extend_from_slice(&(d as u64).to_le_bytes());
                }
                put_values(&mut body, t.tensor.data());
            }
            match &g.optimizer {
                None => body.push(0),
                Some(o) => {
                    body.push(1);
                    body.extend_from_slice(&o.step.to_le_bytes());
                    for t in o.m.iter().chain(&o.v) {
                        put_values(&mut body, t.data());
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(HEADER_BYTES + body.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_string());
        if bytes.len() < HEADER_BYTES {
            return Err(bad("shorter than its header"));
        }
        if bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut r = Reader {
            buf: bytes,
            pos: 4,
        };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let iteration = r.u64()?;
        let crc = r.u32()?;
        if crc32fast::hash(&bytes[HEADER_BYTES..]) != crc {
            return Err(bad("checksum mismatch"));
        }
        let mut groups = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let name = r.string()?;
            let n = r.u32()? as usize;
            let mut tensors = Vec::with_capacity(n.min(1 << 12));
            for _ in 0..n {
                let tname = r.string()?;
                if r.u8()? != DTYPE_F64 {
                    return Err(bad("unsupported dtype"));
                }
                let rank = r.u32()? as usize;
                let shape = (0..rank)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let len = shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .ok_or_else(|| bad("shape overflows"))?;
                let data = r.values(len)?;
                tensors.push(NamedTensor {
                    name: tname,
                    tensor: Tensor::new(shape, data)?,
                });
            }
            let optimizer = match r.u8()? {
                0 => None,
                1 => {
                    let step = r.u64()?;
                    let mut read = || -> Result<Vec<Tensor>> {
                        tensors
                            .iter()
                            .map(|t| Tensor::new(t.tensor.shape().to_vec(), r.values(t.tensor.len())?))
                            .collect()
                    };
                    let m = read()?;
                    let v = read()?;
                    Some(OptimizerSlots { step, m, v })
                }
                _ => return Err(bad("bad optimizer flag")),
            };
            groups.push(GroupData {
                name,
                tensors,
                optimizer,
            });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { iteration, groups })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

type Slots = (Vec<String>, Vec<Tensor>, Vec<Tensor>, Vec<Tensor>, u64);

fn group_slots(state: &TrainState, group: ParamGroup) -> Slots {
    let model = &state.model;
    match group {
        ParamGroup::IdEmbeddings => (
            model.config.schema.fields.iter().map(|f| f.name.clone()).collect(),
            model.id_tables.tables.clone(),
            model.id_tables.m.clone(),
            model.id_tables.v.clone(),
            state.iteration,
        ),
        ParamGroup::ImageModel => {
            let p = &model.image.params;
            (
                p.names().to_vec(),
                p.tensors().to_vec(),
                state.image_opt.m.clone(),
                state.image_opt.v.clone(),
                state.image_opt.step,
            )
        }
        g => {
            let p = model.head.params();
            let idx: Vec<usize> = p.indices_in(g).collect();
            let pick = |ts: &[Tensor]| idx.iter().map(|&i| ts[i].clone()).collect();
            (
                idx.iter().map(|&i| p.names()[i].clone()).collect(),
                pick(p.tensors()),
                pick(&state.head_opt.m),
                pick(&state.head_opt.v),
                state.head_opt.step,
            )
        }
    }
}

/// Overwrites a group's values; with `optimizer = None` its moments are zeroed.
pub(crate) fn write_group(
    state: &mut TrainState,
    group: ParamGroup,
    values: Vec<Tensor>,
    optimizer: Option<OptimizerSlots>,
) {
    let zeros = |ts: &[Tensor]| ts.iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
    let (m, v) = match &optimizer {
        Some(o) => (o.m.clone(), o.v.clone()),
        None => (zeros(&values), zeros(&values)),
    };
    match group {
        ParamGroup::IdEmbeddings => {
            let t = &mut state.model.id_tables;
            t.tables = values;
            t.m = m;
            t.v = v;
        }
        ParamGroup::ImageModel => {
            for (dst, src) in state.model.image.params.tensors_mut().iter_mut().zip(values) {
                *dst = src;
            }
            state.image_opt.m = m;
            state.image_opt.v = v;
            state.image_opt.step = optimizer.map_or(0, |o| o.step);
        }
        g => {
            let idx: Vec<usize> = state.model.head.params().indices_in(g).collect();
            let params = state.model.head.params_mut().tensors_mut();
            for ((&i, val), (mm, vv)) in idx.iter().zip(values).zip(m.into_iter().zip(v)) {
                params[i] = val;
                state.head_opt.m[i] = mm;
                state.head_opt.v[i] = vv;
            }
            if let Some(o) = optimizer {
                state.head_opt.step = state.head_opt.step.max(o.step);
            }
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_values(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint", "truncated"));
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "name is not UTF-8"))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
