//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                  |
//! |-------|------------------------------------------|
//! | 8     | magic `SYSCLSF\0`                        |
//! | 4     | format version (u32)                     |
//! | 1     | element type: 1 = f32, 2 = f64           |
//! | 4     | config length `n` (u32)                  |
//! | n     | model config as JSON                     |
//! | 32    | SHA-256 of the vocabulary file           |
//! | 8     | parameter count (u64)                    |
//! | ...   | parameters in declaration order          |

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ClassifierModel, ModelConfig, ModelError};
use crate::real::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SYSCLSF\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<T: Real>(model: &ClassifierModel<T>, vocab_hash: &[u8; 32]) -> Vec<u8> {
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let mut out = Vec::with_capacity(64 + config.len() + model.num_params() * T::BYTES);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(vocab_hash);
    out.extend_from_slice(&(model.num_params() as u64).to_le_bytes());
    for &p in model.params() {
        p.write_le(&mut out);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            ModelError::BadCheckpoint(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn read_params<T: Real, S: Real>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(S::BYTES).map(|c| T::from_f64_lossy(S::read_le(c).to_f64_lossy())).collect()
}

/// Decodes a checkpoint, returning the model and the recorded vocabulary hash.
pub fn read_checkpoint<T: Real>(bytes: &[u8]) -> Result<(ClassifierModel<T>, [u8; 32]), ModelError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic bytes".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadCheckpoint(format!("unsupported format version {version}")));
    }
    let dtype = cur.take(1)?[0];
    let config_len = cur.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)
        .map_err(|e| ModelError::BadCheckpoint(format!("config: {e}")))?;
    let vocab_hash: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    let width = match dtype {
        1 => 4,
        2 => 8,
        other => return Err(ModelError::BadCheckpoint(format!("unknown element type {other}"))),
    };
    let raw = cur.take(count.checked_mul(width).ok_or_else(|| ModelError::BadCheckpoint("size overflow".into()))?)?;
    if cur.pos != bytes.len() {
        return Err(ModelError::BadCheckpoint("trailing bytes".into()));
    }
    let params = if dtype == 1 { read_params::<T, f32>(raw) } else { read_params::<T, f64>(raw) };
    if !params.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NumericalFault("checkpoint parameters".into()));
    }
    Ok((ClassifierModel::from_parts(config, params)?, vocab_hash))
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &ClassifierModel<T>, vocab_hash: &[u8; 32]) -> Result<(), ModelError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&write_checkpoint(model, vocab_hash))?;
    f.sync_all()?;
    Ok(())
}

/// Loads a checkpoint, rejecting it when it was trained against another
/// vocabulary or, if `expected_config` is given, another architecture.
pub fn load_checkpoint<T: Real>(
    path: &Path,
    vocab_hash: &[u8; 32],
    expected_config: Option<&ModelConfig>,
) -> Result<ClassifierModel<T>, ModelError> {
    let (model, stored) = read_checkpoint(&fs::read(path)?)?;
    if &stored != vocab_hash {
        return Err(ModelError::VocabMismatch);
    }
    if expected_config.is_some_and(|c| c != model.config()) {
        return Err(ModelError::ConfigMismatch);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionPattern;

    fn model() -> ClassifierModel<f32> {
        let mut cfg = ModelConfig::desk_default(8, 10, AttentionPattern::SlidingWindow { window: 2, global: 1 });
        cfg.d_model = 8;
        cfg.heads = 2;
        ClassifierModel::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let bytes = write_checkpoint(&m, &[7; 32]);
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        let (back, hash) = read_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(hash, [7; 32]);
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
        assert_eq!(write_checkpoint(&back, &hash), bytes);

        let wide: ClassifierModel<f64> = read_checkpoint(&bytes).unwrap().0;
        assert_eq!(wide.params()[5] as f32, m.params()[5]);
    }

    #[test]
    fn rejects_mismatch_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = model();
        save_checkpoint(&path, &m, &[1; 32]).unwrap();
        assert!(load_checkpoint::<f32>(&path, &[1; 32], Some(m.config())).is_ok());
        assert!(matches!(load_checkpoint::<f32>(&path, &[2; 32], None), Err(ModelError::VocabMismatch)));
        let mut other = m.config().clone();
        other.seed = 99;
        assert!(matches!(load_checkpoint::<f32>(&path, &[1; 32], Some(&other)), Err(ModelError::ConfigMismatch)));

        let bytes = write_checkpoint(&m, &[1; 32]);
        assert!(read_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f32>(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(read_checkpoint::<f32>(&bad).is_err());
    }
}
