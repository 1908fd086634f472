//! Versioned binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "XPN2"
//! version    u32      currently 1
//! config     u32 byte length + that many bytes of ModelConfig JSON
//! count      u64      number of parameters
//! repeated:  name u32 length + UTF-8 bytes,
//!            rank u32, extents rank × u64,
//!            payload product(extents) × f64
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"XPN2";
pub const VERSION: u32 = 1;

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config = serde_json::to_vec(model.config())?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(&config)?;
    w.write_all(&(model.store.len() as u64).to_le_bytes())?;
    for (name, tensor) in model.store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &extent in shape {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| Error::Format("checkpoint truncated".into()))?;
    Ok(buf)
}

/// Rebuilds a model from a checkpoint, rejecting wrong magic bytes or an
/// unknown format version. Every parameter in the file must match a
/// registered parameter of the restored configuration, shape included.
pub fn load(path: &Path) -> Result<Model> {
    let file = fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let magic = read_bytes(&mut r, 4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("{path:?} is not a model checkpoint (bad magic)")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_len = read_u32(&mut r)? as usize;
    let config_bytes = read_bytes(&mut r, config_len)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;
    let mut model = Model::new(config, 0)?;

    let count = read_u64(&mut r)? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(|_| Error::Format("checkpoint truncated".into()))?;
            data.push(f64::from_le_bytes(buf));
        }
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {name:?} is unknown")))?;
        let target = model.store.get_mut(id);
        if target.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {name:?} has shape {:?} in the file but {:?} in the model",
                shape,
                target.shape()
            )));
        }
        *target = Tensor::new(shape, data)?.with_requires_grad();
    }
    Ok(model)
}
