//! Versioned binary checkpoint: config echo plus named parameter blocks.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, `u32` config length
//! and the config as TOML, `u32` block count, then per block `u32` name
//! length, name, `u32` rows, `u32` cols and `rows × cols` `f32` values.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::config::RunConfig;
use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::model::DenoiserModel;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DTADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(config: &RunConfig, model: &DenoiserModel) -> Vec<u8> {
    let mut buf = Vec::new();
    let put = |buf: &mut Vec<u8>, v: u32| buf.extend_from_slice(&v.to_le_bytes());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put(&mut buf, CHECKPOINT_VERSION);
    let text = config.to_toml();
    put(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    let store = &model.store;
    put(&mut buf, store.len() as u32);
    for id in store.ids() {
        let name = store.name(id);
        put(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        let v = store.value(id);
        put(&mut buf, v.nrows() as u32);
        put(&mut buf, v.ncols() as u32);
        for x in v.iter() {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    buf
}

pub fn save(path: &Path, config: &RunConfig, model: &DenoiserModel) -> Result<()> {
    write_atomic(path, &encode(config, model))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            path: self.path.into(),
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.path, "non-UTF-8 string"))
    }
}

/// Rebuilds the model from the echoed config and fills every parameter
/// block by name.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(RunConfig, DenoiserModel)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let config = RunConfig::from_toml(&r.string()?).map_err(|e| Error::format(path, e.to_string()))?;
    let mut model = DenoiserModel::new(config.model.clone(), config.seed)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::format(path, format!("{count} parameter blocks, model has {}", model.store.len())));
    }
    for _ in 0..count {
        let name = r.string()?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let id = model.store.find(&name).ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
        let target = model.store.value_mut(id);
        if target.dim() != (rows, cols) {
            return Err(Error::format(path, format!("parameter {name}: shape {rows}×{cols}, expected {:?}", target.dim())));
        }
        let raw = r.take(rows * cols * 4)?;
        let values: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(path, format!("parameter {name}: non-finite value")));
        }
        *target = Array2::from_shape_vec((rows, cols), values).expect("sized");
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok((config, model))
}

pub fn load(path: &Path) -> Result<(RunConfig, DenoiserModel)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Rounds every parameter to `f32`, matching what a save/load round trip
/// produces.
pub fn round_to_f32(model: &mut DenoiserModel) {
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model.store.value_mut(id).mapv_inplace(|x| x as f32 as f64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> (RunConfig, DenoiserModel) {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            model_dim: 8,
            decoder_layers: 1,
            ..cfg.model
        };
        let model = DenoiserModel::new(cfg.model.clone(), cfg.seed).unwrap();
        (cfg, model)
    }

    #[test]
    fn round_trip_is_stable() {
        let (cfg, mut model) = small();
        let bytes = encode(&cfg, &model);
        let (cfg2, model2) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(cfg2, cfg);
        round_to_f32(&mut model);
        assert_eq!(model2.store, model.store);
        assert_eq!(encode(&cfg2, &model2), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (cfg, model) = small();
        let bytes = encode(&cfg, &model);
        let p = Path::new("ck.bin");
        assert!(matches!(decode(&bytes[..bytes.len() - 1], p), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        assert!(matches!(decode(&bad, p), Err(Error::Format { .. })));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer, p).is_err());
    }
}
