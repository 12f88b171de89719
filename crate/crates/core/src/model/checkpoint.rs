//! Checkpoint file: `SSCK`, u16 version, u32 length + JSON model config, u32
//! entry count, then per entry a u16 length + UTF-8 name followed by one
//! tensor record in the container format of [`crate::data`].

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::data::{encode_tensor, read_tensor};
use crate::tensor::{AnyTensor, Float};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSCK";
const CHECKPOINT_VERSION: u16 = 1;

fn encode<T: Float>(model: &Model<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    let params = model.params();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for id in params.ids() {
        let name = params.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&encode_tensor(&AnyTensor::from_float(params.get(id).clone()))?);
    }
    Ok(out)
}

pub fn save_checkpoint<T: Float>(path: impl AsRef<Path>, model: &Model<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

fn take<'a>(cursor: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if cursor.len() < n {
        return Err(Error::Format(format!("truncated checkpoint: missing {what}")));
    }
    let (head, tail) = cursor.split_at(n);
    *cursor = tail;
    Ok(head)
}

fn decode<T: Float>(bytes: &[u8]) -> Result<Model<T>> {
    let mut cur = bytes;
    if take(&mut cur, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take(&mut cur, 2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(take(&mut cur, 4, "header length")?.try_into().unwrap()) as usize;
    let config: ModelConfig = serde_json::from_slice(take(&mut cur, len, "header")?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut model = Model::<T>::build(config)?;
    let count = u32::from_le_bytes(take(&mut cur, 4, "entry count")?.try_into().unwrap()) as usize;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} entries, the architecture has {}",
            model.params().len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let n = u16::from_le_bytes(take(&mut cur, 2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut cur, n, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let id = model.params().id(name).ok_or_else(|| Error::Format(format!("unknown parameter {name:?}")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Format(format!("duplicate parameter {name:?}")));
        }
        let value = read_tensor(&mut cur)?.to_float::<T>()?;
        model.params_mut().set(id, value)?;
    }
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after the last checkpoint entry".into()));
    }
    Ok(model)
}

/// Rebuilds the architecture from the stored config and restores every
/// parameter and buffer.
pub fn load_checkpoint<T: Float>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
