//! Little-endian checkpoint format.
//!
//! ```text
//! magic      4 bytes  "OMNI"
//! version    u32      1
//! config     9 x u32  variant (0 dense, 1 switch, 2 omni), layers, embed_dim,
//!                     ffn_dim, heads, experts, vocab_size, frame_stack, feat_dim
//! count      u32      number of parameter records
//! record     name_len u32, name (UTF-8), ndim u32, ndim x u32 dims,
//!            prod(dims) x f32 values (row-major)
//! ```

use std::path::Path;

use super::{Model, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OMNI";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a model. Values are stored as f32.
pub fn write_checkpoint<S: Real>(model: &Model<S>) -> Result<Vec<u8>> {
    let c = &model.config;
    let mut buf = Vec::with_capacity(64 + model.params.num_scalars() * 4);
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        c.variant.code() as usize,
        c.layers,
        c.embed_dim,
        c.ffn_dim,
        c.heads,
        c.experts,
        c.vocab_size,
        c.frame_stack,
        c.feat_dim,
    ] {
        put_u32(&mut buf, v)?;
    }
    put_u32(&mut buf, model.params.len())?;
    for p in model.params.iter() {
        put_u32(&mut buf, p.name.len())?;
        buf.extend_from_slice(p.name.as_bytes());
        put_u32(&mut buf, p.value.shape().len())?;
        for &dim in p.value.shape() {
            put_u32(&mut buf, dim)?;
        }
        for &x in p.value.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save_checkpoint<S: Real>(model: &Model<S>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("checkpoint ({what})")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
}

/// Parses a checkpoint, checking every tensor against the architecture the
/// stored config describes.
pub fn read_checkpoint<S: Real>(bytes: &[u8]) -> Result<Model<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint".into(),
            expected: CHECKPOINT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint".into(),
            version,
        });
    }
    let code = r.u32("variant")?;
    let variant = Variant::from_code(code)
        .ok_or_else(|| Error::CheckpointMismatch(format!("unknown variant code {code}")))?;
    let config = ModelConfig {
        variant,
        layers: r.usize("layers")?,
        embed_dim: r.usize("embed_dim")?,
        ffn_dim: r.usize("ffn_dim")?,
        heads: r.usize("heads")?,
        experts: r.usize("experts")?,
        vocab_size: r.usize("vocab_size")?,
        frame_stack: r.usize("frame_stack")?,
        feat_dim: r.usize("feat_dim")?,
    };
    config
        .validate()
        .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
    let mut model = Model::<S>::build(config, 0)?;
    let count = r.usize("parameter count")?;
    if count != model.params.len() {
        return Err(Error::CheckpointMismatch(format!(
            "{count} tensors stored, architecture has {}",
            model.params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.usize("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::CheckpointMismatch("parameter name is not UTF-8".into()))?
            .to_owned();
        let ndim = r.usize("rank")?;
        let shape = (0..ndim)
            .map(|_| r.usize("dims"))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, &name)?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("unexpected tensor `{name}`")))?;
        if model.params.value(id).shape() != shape.as_slice() {
            return Err(Error::CheckpointMismatch(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                model.params.value(id).shape()
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|b| S::from_f64(f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))))
            .collect();
        *model.params.value_mut(id) = Tensor::new(shape, data)?;
        seen[id.0] = true;
    }
    if r.pos != bytes.len() {
        return Err(Error::CheckpointMismatch(
            "trailing bytes after last tensor".into(),
        ));
    }
    debug_assert!(seen.iter().all(|&s| s));
    Ok(model)
}

pub fn load_checkpoint<S: Real>(path: impl AsRef<Path>) -> Result<Model<S>> {
    read_checkpoint(&std::fs::read(path)?)
}
