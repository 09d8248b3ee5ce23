//! Binary checkpoint: `MAGIC | u32 version | u64 header length | JSON header
//! | f32 little-endian tensor data`, tensors in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, MoeState, ParamStore, Seq2SeqModel};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MOECECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Seq2SeqModel<f32>,
    pub vocab: Option<Vocabulary>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    model: ModelConfig,
    moe: Option<MoeState>,
    vocab: Option<Vocabulary>,
    tensors: Vec<TensorMeta>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(model: &Seq2SeqModel<f32>, vocab: Option<&Vocabulary>, path: &Path) -> Result<()> {
    model.check_layout()?;
    if let Some(v) = vocab {
        if v.len() != model.config.vocab_size {
            return Err(Error::ConfigMismatch {
                field: "vocab_size".into(),
                expected: model.config.vocab_size.to_string(),
                found: v.len().to_string(),
            });
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        model: model.config.clone(),
        moe: model.moe.clone(),
        vocab: vocab.cloned(),
        tensors: model
            .params
            .iter()
            .map(|(name, p)| TensorMeta {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, p) in model.params.iter() {
        for x in p.value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ckpt_err(path, "file too short"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ckpt_err(path, "not a checkpoint (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| ckpt_err(path, "truncated version"))?;
    let version = u32::from_le_bytes(b4);
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| ckpt_err(path, "truncated header length"))?;
    let hlen = u64::from_le_bytes(b8) as usize;
    if hlen > 1 << 30 {
        return Err(ckpt_err(path, "implausible header length"));
    }
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).map_err(|_| ckpt_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    if header.version != version {
        return Err(ckpt_err(path, "header version disagrees with preamble"));
    }
    header.model.validate()?;
    if let Some(m) = &header.moe {
        m.config.validate()?;
    }
    let mut params = ParamStore::new();
    for meta in header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| ckpt_err(path, format!("truncated data for `{}`", meta.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if params.contains(&meta.name) {
            return Err(ckpt_err(path, format!("duplicate tensor `{}`", meta.name)));
        }
        params.insert(meta.name, Tensor::from_vec(&meta.shape, data)?, meta.trainable);
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ckpt_err(path, format!("{} trailing bytes", rest.len())));
    }
    let model = Seq2SeqModel {
        config: header.model,
        moe: header.moe,
        params,
    };
    model
        .check_layout()
        .map_err(|e| ckpt_err(path, format!("layout: {e}")))?;
    if let Some(v) = &header.vocab {
        if v.len() != model.config.vocab_size {
            return Err(ckpt_err(path, "vocabulary size disagrees with the model"));
        }
    }
    Ok(Checkpoint {
        model,
        vocab: header.vocab,
    })
}

/// Loads and checks that the stored model config equals `expected`
/// (and the MoE state, when given). The first differing field is reported.
pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig, expected_moe: Option<&MoeState>) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    first_mismatch(&serde_json::to_value(expected)?, &serde_json::to_value(&ck.model.config)?, "model")?;
    if let Some(m) = expected_moe {
        first_mismatch(&serde_json::to_value(m)?, &serde_json::to_value(&ck.model.moe)?, "moe")?;
    }
    Ok(ck)
}

fn first_mismatch(expected: &serde_json::Value, found: &serde_json::Value, at: &str) -> Result<()> {
    use serde_json::Value;
    match (expected, found) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, va) in a {
                let key = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                first_mismatch(va, b.get(k).unwrap_or(&Value::Null), &key)?;
            }
            Ok(())
        }
        (a, b) if a == b => Ok(()),
        (a, b) => Err(Error::ConfigMismatch {
            field: if at.is_empty() { "<root>".into() } else { at.to_string() },
            expected: a.to_string(),
            found: b.to_string(),
        }),
    }
}
