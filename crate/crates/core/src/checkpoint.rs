//! Model checkpoints.
//!
//! Layout, all integers little-endian `u64` unless noted:
//!
//! ```text
//! magic      8 bytes  "DACSCKPT"
//! version    u32      1
//! config     length + UTF-8 JSON of the ModelConfig
//! count      number of tensors
//! tensor*    name length + UTF-8 name, rows, cols, rows*cols f64 (LE)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::Reader;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"DACSCKPT";
const VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let json = serde_json::to_vec(model.config()).expect("model config serializes");
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let params = model.params();
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for (name, m) in params.names().iter().zip(params.values()) {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })()
    .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(BufReader::new(file), path);
    r.magic(MAGIC, VERSION)?;
    let n = r.len(1 << 24, "config length")?;
    let config: ModelConfig =
        serde_json::from_slice(&r.bytes(n)?).map_err(|e| Error::format(path, format!("config: {e}")))?;
    let mut model = Model::new(config, 0).map_err(|e| Error::format(path, e.to_string()))?;
    let count = r.len(1 << 20, "tensor count")?;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.len(1 << 16, "name length")?;
        let name = String::from_utf8(r.bytes(len)?).map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let rows = r.len(1 << 32, "rows")?;
        let cols = r.len(1 << 32, "cols")?;
        let values = r.f64s(rows * cols)?;
        let m = Matrix::new(rows, cols, values).map_err(|e| Error::format(path, format!("tensor `{name}`: {e}")))?;
        named.push((name, m));
    }
    r.finish()?;
    model.load_params(named).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ToyTaskConfig;

    #[test]
    fn round_trip_and_shape_rejection() {
        let cfg = ModelConfig::desk(ToyTaskConfig::noiseless().vocab_size, 16);
        let model = Model::new(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.params(), model.params());

        // rewrite the config with a narrower d_ff; tensors no longer fit
        let bytes = std::fs::read(&path).unwrap();
        let old = serde_json::to_string(model.config()).unwrap();
        let new = old.replace("\"d_ff\":64", "\"d_ff\":48");
        assert_eq!(old.len(), new.len());
        let mut raw = bytes.clone();
        let at = bytes.windows(old.len()).position(|w| w == old.as_bytes()).unwrap();
        raw[at..at + new.len()].copy_from_slice(new.as_bytes());
        std::fs::write(&path, &raw).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }
}
