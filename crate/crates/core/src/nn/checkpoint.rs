//! Binary checkpoint files. Layout is documented in `docs/formats.md`.
//!
//! Files are written to a sibling temporary path and renamed into place, so
//! a reader never observes a half-written checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::network::{Network, NetworkConfig, TensorKind};
use super::optim::OptimizerState;
use super::tensor::Tensor;
use crate::error::CheckpointError;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LULCCKPT";
pub const END_MARKER: &[u8; 8] = b"LULCEND\0";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_VELOCITY: u8 = 2;
const DTYPE_F32: u8 = 1;

/// A model together with the optimizer state and epoch it was saved at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub optimizer: OptimizerState<f32>,
    pub epoch: usize,
}

fn push_record(buf: &mut Vec<u8>, name: &str, kind: u8, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(kind);
    buf.push(DTYPE_F32);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(net: &Network<f32>, state: &OptimizerState<f32>, epoch: usize) -> Result<Vec<u8>> {
    let config = toml::to_string(net.config()).map_err(|e| Error::invalid(format!("cannot encode network config: {e}")))?;
    let tensors = net.tensors();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(config.as_bytes());
    buf.extend_from_slice(&(epoch as u64).to_le_bytes());
    buf.extend_from_slice(&state.lr.to_le_bytes());
    buf.extend_from_slice(&state.momentum.to_le_bytes());
    buf.extend_from_slice(&((tensors.len() + state.velocity.len()) as u32).to_le_bytes());
    for (name, kind, t) in tensors {
        let tag = match kind {
            TensorKind::Param => KIND_PARAM,
            TensorKind::Buffer => KIND_BUFFER,
        };
        push_record(&mut buf, &name, tag, t);
    }
    for (name, v) in &state.velocity {
        push_record(&mut buf, name, KIND_VELOCITY, v);
    }
    buf.extend_from_slice(END_MARKER);
    Ok(buf)
}

pub fn save_checkpoint(net: &Network<f32>, state: &OptimizerState<f32>, epoch: usize, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(net, state, epoch)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        self.array().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        self.array().map(f64::from_le_bytes)
    }
}

/// Decodes a checkpoint. With `expected`, tensors are checked against that
/// configuration instead of the one stored in the file.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&NetworkConfig>) -> Result<Checkpoint, CheckpointError> {
    use CheckpointError::*;
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(bytes) { Truncated } else { BadMagic });
    }
    if r.take(8)? != MAGIC {
        return Err(BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let clen = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(clen)?).map_err(|_| Malformed("config is not UTF-8".into()))?;
    let stored: NetworkConfig = toml::from_str(text).map_err(|e| Malformed(format!("config: {e}")))?;
    let config = expected.unwrap_or(&stored);
    let epoch = r.u64()? as usize;
    let lr = r.f64()?;
    let momentum = r.f64()?;
    let count = r.u32()? as usize;

    let mut network = Network::<f32>::zeros(config).map_err(|e| Malformed(e.to_string()))?;
    let mut optimizer =
        OptimizerState::new(lr, momentum, &network.parameters()).map_err(|e| Malformed(e.to_string()))?;
    let mut slots: BTreeMap<(u8, String), &mut Tensor<f32>> = BTreeMap::new();
    for (name, kind, t) in network.tensors_mut() {
        let tag = if kind == TensorKind::Param { KIND_PARAM } else { KIND_BUFFER };
        slots.insert((tag, name), t);
    }
    for (name, v) in optimizer.velocity.iter_mut() {
        slots.insert((KIND_VELOCITY, name.clone()), v);
    }

    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Malformed("tensor name is not UTF-8".into()))?;
        let kind = r.u8()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Malformed(format!("tensor `{name}` has unknown dtype tag {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Malformed(format!("tensor `{name}` is too large")))?;
        let payload = r.take(n.checked_mul(4).ok_or(Truncated)?)?;
        let slot = slots.remove(&(kind, name.clone())).ok_or_else(|| UnexpectedTensor(name.clone()))?;
        if slot.shape() != shape.as_slice() {
            return Err(ShapeMismatch {
                name,
                found: shape,
                expected: slot.shape().to_vec(),
            });
        }
        for (dst, src) in slot.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
    }
    if r.take(END_MARKER.len())? != END_MARKER {
        return Err(Malformed("missing end marker".into()));
    }
    if r.pos != bytes.len() {
        return Err(Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if let Some(((_, name), _)) = slots.into_iter().next() {
        return Err(MissingTensor(name));
    }
    Ok(Checkpoint {
        network,
        optimizer,
        epoch,
    })
}

pub fn load_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected).map_err(|kind| Error::Checkpoint {
        path: path.to_path_buf(),
        kind,
    })
}
