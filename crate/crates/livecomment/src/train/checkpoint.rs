use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};

const MAGIC: &[u8; 8] = b"LIVECKPT";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    train: TrainConfig,
    vocab_hash: String,
    entries: Vec<ManifestEntry>,
}

/// Binary layout: `LIVECKPT` magic, u64-LE header length, JSON header
/// (config snapshot, vocabulary hash, tensor manifest), then one contiguous
/// little-endian f32 payload. Save→load→save round-trips byte-exactly.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    train: &TrainConfig,
    vocab_hash: u64,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.params.visit(&mut |_, name, t| {
        entries.push(ManifestEntry {
            name,
            shape: t.shape.clone(),
            offset: payload.len() as u64,
            count: t.numel() as u64,
        });
        for &x in &t.data {
            payload.extend_from_slice(&(x as f32).to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        model: model.config.clone(),
        train: train.clone(),
        vocab_hash: format!("{vocab_hash:016x}"),
        entries,
    };
    let header_json = serde_json::to_vec(&header).map_err(std::io::Error::from)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

/// Load and validate a checkpoint. Shapes are checked against the shapes
/// the config implies; when `expected_vocab_hash` is given it must match
/// the stored one.
pub fn load_checkpoint(
    path: &Path,
    expected_vocab_hash: Option<u64>,
) -> Result<(Model, TrainConfig)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let header_len =
        u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
    let header_start = MAGIC.len() + 8;
    if bytes.len() < header_start + header_len {
        return Err(Error::CheckpointTruncated {
            need: header_start + header_len,
            got: bytes.len(),
        });
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[header_start..header_start + header_len])
            .map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    header.model.validate()?;
    if let Some(expected) = expected_vocab_hash {
        let expected = format!("{expected:016x}");
        if header.vocab_hash != expected {
            return Err(Error::VocabHashMismatch {
                checkpoint: header.vocab_hash,
                current: expected,
            });
        }
    }
    let emb = header
        .entries
        .iter()
        .find(|e| e.name == "token_embedding")
        .ok_or_else(|| Error::CheckpointFormat("manifest lacks token_embedding".into()))?;
    if emb.shape.len() != 2 {
        return Err(Error::CheckpointFormat(
            "token_embedding manifest shape is not 2-D".into(),
        ));
    }
    let vocab_size = emb.shape[0];
    let mut params = ModelParams::zeros(&header.model, vocab_size);

    let payload = &bytes[header_start + header_len..];
    let by_name: HashMap<&str, &ManifestEntry> = header
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    if by_name.len() != header.entries.len() {
        return Err(Error::CheckpointFormat("duplicate manifest entry".into()));
    }
    let mut expected_names = 0usize;
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |_, name, tensor| {
        if failure.is_some() {
            return;
        }
        expected_names += 1;
        let entry = match by_name.get(name.as_str()) {
            Some(e) => e,
            None => {
                failure = Some(Error::CheckpointFormat(format!(
                    "manifest missing tensor {name}"
                )));
                return;
            }
        };
        if entry.shape != tensor.shape {
            failure = Some(Error::CheckpointShapeMismatch {
                name,
                manifest: entry.shape.clone(),
                expected: tensor.shape.clone(),
            });
            return;
        }
        let count = entry.count as usize;
        if count != tensor.numel() {
            failure = Some(Error::CheckpointShapeMismatch {
                name,
                manifest: vec![count],
                expected: vec![tensor.numel()],
            });
            return;
        }
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > payload.len() {
            failure = Some(Error::CheckpointTruncated {
                need: end,
                got: payload.len(),
            });
            return;
        }
        for (i, chunk) in payload[start..end].chunks_exact(4).enumerate() {
            tensor.data[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if expected_names != header.entries.len() {
        return Err(Error::CheckpointFormat(format!(
            "manifest has {} entries, model needs {}",
            header.entries.len(),
            expected_names
        )));
    }
    Ok((
        Model {
            config: header.model,
            params,
        },
        header.train,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            d_frame: 5,
            layers_encoder: 1,
            layers_decoder: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            p_audio: 6,
            p_comment: 5,
            p_response: 6,
            n_context: 2,
            t1: 3,
            t2: 5,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Model::init(cfg, 17, &mut rng).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = tiny_model(31);
        let train = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &model, &train, 0xabcd).unwrap();
        let (loaded, loaded_train) = load_checkpoint(&p1, Some(0xabcd)).unwrap();
        assert_eq!(loaded_train, train);
        save_checkpoint(&p2, &loaded, &loaded_train, 0xabcd).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // loaded values are bit-equal to the in-memory ones
        for ((_, _, a), (_, _, b)) in model.params.named().iter().zip(loaded.params.named().iter())
        {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn wrong_vocab_hash_is_a_distinct_error() {
        let model = tiny_model(32);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &model, &TrainConfig::default(), 7).unwrap();
        assert!(matches!(
            load_checkpoint(&p, Some(8)),
            Err(Error::VocabHashMismatch { .. })
        ));
        load_checkpoint(&p, Some(7)).unwrap();
        load_checkpoint(&p, None).unwrap();
    }

    #[test]
    fn edited_manifest_shape_is_rejected() {
        let model = tiny_model(33);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &model, &TrainConfig::default(), 7).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        let entry = header
            .entries
            .iter_mut()
            .find(|e| e.name == "pos_frames")
            .unwrap();
        entry.shape = vec![99, 99];
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut hacked = Vec::new();
        hacked.extend_from_slice(MAGIC);
        hacked.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        hacked.extend_from_slice(&new_header);
        hacked.extend_from_slice(&bytes[16 + header_len..]);
        std::fs::write(&p, hacked).unwrap();
        assert!(matches!(
            load_checkpoint(&p, None),
            Err(Error::CheckpointShapeMismatch { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let model = tiny_model(34);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &model, &TrainConfig::default(), 7).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(
            load_checkpoint(&p, None),
            Err(Error::CheckpointTruncated { .. })
        ));
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&p, None),
            Err(Error::CheckpointFormat(_))
        ));
    }
}
