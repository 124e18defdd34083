//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `HRGNNCK1`, a little-endian `u64` header length,
//! a JSON header (configuration echo, vocabulary, tensor index), then every
//! tensor's values as little-endian `f64` in index order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_file, TextConfig};
use crate::error::{Error, Result};
use crate::model::{Ablation, Hrgnn, ModelConfig};
use crate::numerics::Tensor;
use crate::text::{EmbeddingTable, Vocabulary, PAD_ID};

const MAGIC: &[u8; 8] = b"HRGNNCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    ablation: Ablation,
    text: TextConfig,
    embedding_trainable: bool,
    vocabulary_sha256: String,
    vocabulary: Vec<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// A trained model together with the preprocessing it expects.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Hrgnn,
    pub vocab: Vocabulary,
    pub text: TextConfig,
}

fn mismatch(msg: impl Into<String>) -> Error {
    Error::CheckpointMismatch(msg.into())
}

/// Names of top-level fields whose values differ between two serializable
/// values.
fn differing_fields<T: Serialize>(a: &T, b: &T) -> Vec<String> {
    let (a, b) = (serde_json::to_value(a), serde_json::to_value(b));
    match (a, b) {
        (Ok(serde_json::Value::Object(a)), Ok(serde_json::Value::Object(b))) => a
            .iter()
            .filter(|(k, v)| b.get(*k) != Some(*v))
            .map(|(k, v)| format!("{k} (checkpoint {v}, requested {})", b.get(k).unwrap_or(&serde_json::Value::Null)))
            .collect(),
        _ => vec!["<unserializable>".into()],
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let embedding = self.model.network.embedding;
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.config().clone(),
            ablation: self.model.config().ablation.clone(),
            text: self.text.clone(),
            embedding_trainable: store.frozen_rows(embedding).len() <= 1,
            vocabulary_sha256: self.vocab.fingerprint(),
            vocabulary: self.vocab.tokens().to_vec(),
            tensors: store
                .iter()
                .map(|(_, name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * store.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in store.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(mismatch("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| mismatch("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| mismatch(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(mismatch(format!(
                "format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let vocab = Vocabulary::from_tokens(header.vocabulary);
        if vocab.fingerprint() != header.vocabulary_sha256 {
            return Err(mismatch("vocabulary hash does not match its tokens"));
        }
        let mut config = header.model;
        config.ablation = header.ablation;
        let table = EmbeddingTable {
            weights: Tensor::zeros(vocab.len(), config.embed_dim),
            trainable: header.embedding_trainable,
        };
        let mut model = Hrgnn::with_embeddings(config, table, 0).map_err(|e| mismatch(e.to_string()))?;
        let ids: Vec<_> = model.store.ids().collect();
        if ids.len() != header.tensors.len() {
            return Err(mismatch(format!(
                "{} tensors stored, configuration defines {}",
                header.tensors.len(),
                ids.len()
            )));
        }
        let mut data = bytes[16 + len..].chunks_exact(8);
        for (id, entry) in ids.into_iter().zip(&header.tensors) {
            let (name, shape) = (model.store.name(id).to_string(), model.store.get(id).shape().to_vec());
            if entry.name != name || entry.shape != shape {
                return Err(mismatch(format!(
                    "tensor {} {:?} where the configuration expects {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            for v in model.store.get_mut(id).data_mut() {
                let chunk = data.next().ok_or_else(|| mismatch("truncated tensor data"))?;
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        if data.next().is_some() || !data.remainder().is_empty() {
            return Err(mismatch("trailing bytes after tensor data"));
        }
        debug_assert!(model.store.frozen_rows(model.network.embedding).contains(&PAD_ID));
        Ok(Self {
            model,
            vocab,
            text: header.text,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rejects use of this checkpoint under a different configuration.
    pub fn ensure_compatible(&self, model: &ModelConfig, text: &TextConfig) -> Result<()> {
        let mut diffs = differing_fields(self.model.config(), model);
        diffs.extend(differing_fields(&self.model.config().ablation, &model.ablation));
        diffs.extend(differing_fields(&self.text, text));
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(mismatch(format!("configuration differs: {}", diffs.join(", "))))
        }
    }
}
