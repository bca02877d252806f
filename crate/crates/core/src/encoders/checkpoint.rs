use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderError, QueryEncoder, SmqeConfig, SmqeParams, SsqeConfig, SsqeParams};
use crate::corpus::CharVocab;
use crate::numerics::Parameters;

const MAGIC: &[u8; 8] = b"EVSQENC\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const LSTM_VARIANT: &str = "no-peephole";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ssqe,
    Smqe,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ssqe(SsqeParams),
    Smqe(SmqeParams),
}

/// A trained encoder together with the vocabulary it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: CharVocab,
    /// Free-form provenance written into the header (seed, config hash, ...).
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        match self.model {
            Model::Ssqe(_) => ModelKind::Ssqe,
            Model::Smqe(_) => ModelKind::Smqe,
        }
    }

    pub fn ssqe(&self) -> &SsqeParams {
        match &self.model {
            Model::Ssqe(p) => p,
            Model::Smqe(p) => &p.ssqe,
        }
    }

    pub fn encoder(&self) -> QueryEncoder<'_> {
        match &self.model {
            Model::Ssqe(p) => QueryEncoder::single(p, &self.vocab),
            Model::Smqe(p) => QueryEncoder::multiple(p, &self.vocab),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: ModelKind,
    lstm_variant: String,
    vocab_hash: String,
    vocab_chars: String,
    ssqe_config: SsqeConfig,
    smqe_config: Option<SmqeConfig>,
    blocks: Vec<BlockInfo>,
    metadata: BTreeMap<String, String>,
}

fn blocks_of(model: &Model) -> Vec<(String, &crate::numerics::Tensor)> {
    match model {
        Model::Ssqe(p) => p.blocks(),
        Model::Smqe(p) => p.blocks(),
    }
}

/// Writes the checkpoint to `path` via a temporary file and rename.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), EncoderError> {
    let blocks = blocks_of(&ckpt.model);
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        kind: ckpt.kind(),
        lstm_variant: LSTM_VARIANT.into(),
        vocab_hash: ckpt.vocab.hash(),
        vocab_chars: ckpt.vocab.chars().iter().collect(),
        ssqe_config: ckpt.ssqe().config,
        smqe_config: match &ckpt.model {
            Model::Smqe(p) => Some(p.config),
            Model::Ssqe(_) => None,
        },
        blocks: blocks
            .iter()
            .map(|(name, t)| BlockInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata: ckpt.metadata.clone(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    let n_floats: usize = blocks.iter().map(|(_, t)| t.len()).sum();
    let mut buf = Vec::with_capacity(8 + 4 + 8 + header_bytes.len() + 8 * n_floats);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in &blocks {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8], EncoderError> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| EncoderError::Checkpoint("truncated file".into()))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

/// Reads a checkpoint. With `expected_vocab_hash`, a checkpoint trained on a
/// different vocabulary is rejected.
pub fn load_checkpoint(path: &Path, expected_vocab_hash: Option<&str>) -> Result<Checkpoint, EncoderError> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    if take(&bytes, &mut pos, 8)? != MAGIC {
        return Err(EncoderError::Checkpoint("not an encoder checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| EncoderError::Checkpoint("truncated file".into()))?;
    let header: Header = serde_json::from_slice(take(&bytes, &mut pos, header_len)?)
        .map_err(|e| EncoderError::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(EncoderError::Checkpoint("header and container versions differ".into()));
    }
    if header.lstm_variant != LSTM_VARIANT {
        return Err(EncoderError::Checkpoint(format!("unsupported LSTM variant {}", header.lstm_variant)));
    }
    let vocab = CharVocab::from_chars(header.vocab_chars.chars().collect());
    if vocab.hash() != header.vocab_hash {
        return Err(EncoderError::Checkpoint("stored vocabulary does not match its hash".into()));
    }
    if let Some(expected) = expected_vocab_hash {
        if expected != header.vocab_hash {
            return Err(EncoderError::VocabMismatch {
                expected: expected.to_string(),
                found: header.vocab_hash,
            });
        }
    }
    header.ssqe_config.validate()?;
    if header.ssqe_config.vocab_size != vocab.len() {
        return Err(EncoderError::Checkpoint("model vocabulary size differs from stored vocabulary".into()));
    }
    let mut model = match (header.kind, header.smqe_config) {
        (ModelKind::Ssqe, None) => Model::Ssqe(SsqeParams::zeros(header.ssqe_config)),
        (ModelKind::Smqe, Some(c)) => {
            if c.session_hidden == 0 || c.session_layers == 0 {
                return Err(EncoderError::Config(format!("degenerate SMQE config {c:?}")));
            }
            Model::Smqe(SmqeParams::zeros(header.ssqe_config, c))
        }
        _ => return Err(EncoderError::Checkpoint("model kind and configs disagree".into())),
    };
    {
        let mut targets = match &mut model {
            Model::Ssqe(p) => p.blocks_mut(),
            Model::Smqe(p) => p.blocks_mut(),
        };
        if targets.len() != header.blocks.len() {
            return Err(EncoderError::Checkpoint(format!(
                "expected {} parameter blocks, header lists {}",
                targets.len(),
                header.blocks.len()
            )));
        }
        for ((name, t), info) in targets.iter_mut().zip(&header.blocks) {
            if *name != info.name || t.shape() != info.shape.as_slice() {
                return Err(EncoderError::Checkpoint(format!(
                    "block {} has shape {:?}, config implies {name} {:?}",
                    info.name,
                    info.shape,
                    t.shape()
                )));
            }
            let raw = take(&bytes, &mut pos, 8 * t.len())?;
            for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
    }
    if pos != bytes.len() {
        return Err(EncoderError::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Checkpoint {
        model,
        vocab,
        metadata: header.metadata,
    })
}
