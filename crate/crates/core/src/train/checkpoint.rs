//! Checkpoint file layout:
//!
//! ```text
//! VQLOGITS-CHECKPOINT v1\n
//! header_bytes=<n>\n
//! <n bytes of TOML header>
//! <parameter blobs: little-endian f32, manifest order>
//! <mapping: little-endian u32 per token, VQ heads only>
//! ```
//!
//! Offsets in the header are relative to the first blob byte. Nothing
//! time- or host-dependent is written, so saving a loaded checkpoint
//! reproduces the file byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::heads::{HeadSpec, VocabMapping};
use crate::model::{LanguageModel, ModelConfig};
use crate::numerics::{Float, Tensor};
use crate::{bail, Error, Result};

pub const CHECKPOINT_MAGIC: &str = "VQLOGITS-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    vocab_size: usize,
    /// Embedded vocabulary file (`token<TAB>freq` lines), when known.
    vocabulary: Option<String>,
    model: ModelConfig,
    head: HeadSpec,
    mapping: Option<Blob>,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    offset: usize,
    bytes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

/// A model in storage precision together with the vocabulary it was
/// trained on.
#[derive(Clone, Debug)]
pub struct ModelCheckpoint {
    pub model: LanguageModel<f32>,
    pub vocab: Option<Vocabulary>,
}

impl ModelCheckpoint {
    pub fn from_model<T: Float>(model: &LanguageModel<T>, vocab: Option<Vocabulary>) -> Self {
        Self {
            model: model.cast::<f32>(),
            vocab,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let mut blob = Vec::with_capacity(model.params.numel() * 4);
        let mut params = Vec::with_capacity(model.params.len());
        for p in model.params.iter() {
            params.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: blob.len(),
                trainable: p.trainable,
            });
            for x in p.value.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let mapping = model.head.mapping().map(|m| {
            let offset = blob.len();
            for &c in m.codes() {
                blob.extend_from_slice(&(c as u32).to_le_bytes());
            }
            Blob {
                offset,
                bytes: blob.len() - offset,
            }
        });
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            vocab_size: model.config.vocab_size,
            vocabulary: self.vocab.as_ref().map(Vocabulary::to_file_string),
            model: model.config.clone(),
            head: model.head_spec(),
            mapping,
            params,
        };
        let text = toml::to_string(&header).expect("checkpoint header serializes");
        let mut out = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}\nheader_bytes={}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic, rest) = split_line(bytes)?;
        if magic != format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}").as_bytes() {
            bail!(Format, "not a version {CHECKPOINT_VERSION} checkpoint");
        }
        let (len_line, rest) = split_line(rest)?;
        let len: usize = std::str::from_utf8(len_line)
            .ok()
            .and_then(|l| l.strip_prefix("header_bytes="))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Format("missing header length".into()))?;
        if rest.len() < len {
            bail!(Format, "checkpoint truncated inside the header");
        }
        let text = std::str::from_utf8(&rest[..len]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let blob = &rest[len..];
        let header: Header = toml::from_str(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            bail!(Format, "unsupported checkpoint version {}", header.format_version);
        }
        if header.vocab_size != header.model.vocab_size {
            bail!(Format, "header vocab_size disagrees with the model config");
        }
        let vocab = header.vocabulary.as_deref().map(Vocabulary::parse).transpose()?;
        if let Some(v) = &vocab {
            if v.len() != header.vocab_size {
                bail!(Format, "embedded vocabulary has {} entries, model expects {}", v.len(), header.vocab_size);
            }
        }
        let mapping = match &header.mapping {
            Some(b) => {
                let raw = slice(blob, b.offset, b.bytes)?;
                if b.bytes != header.vocab_size * 4 {
                    bail!(Format, "mapping holds {} bytes for V = {}", b.bytes, header.vocab_size);
                }
                let k = match header.head {
                    HeadSpec::Vq { k, .. } => k,
                    _ => bail!(Format, "mapping present for a non-quantized head"),
                };
                let codes = raw
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                    .collect();
                Some(VocabMapping::new(codes, k)?)
            }
            None => None,
        };
        let mut model = LanguageModel::<f32>::new(header.model, &header.head, mapping, 0)?;
        if header.params.len() != model.params.len() {
            bail!(Format, "manifest lists {} tensors, model has {}", header.params.len(), model.params.len());
        }
        let mut seen = vec![false; model.params.len()];
        let mut spans = Vec::with_capacity(header.params.len());
        for entry in &header.params {
            let Some(id) = model.params.find(&entry.name) else {
                bail!(Format, "unknown tensor {} in manifest", entry.name);
            };
            if std::mem::replace(&mut seen[id.index()], true) {
                bail!(Format, "tensor {} listed twice", entry.name);
            }
            let n: usize = entry.shape.iter().product();
            let raw = slice(blob, entry.offset, n * 4)?;
            spans.push((entry.offset, entry.offset + n * 4));
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            model.params.set_value(id, Tensor::new(&entry.shape, data)?)?;
            model.params.get_mut(id).trainable = entry.trainable;
        }
        if let Some(b) = &header.mapping {
            spans.push((b.offset, b.offset + b.bytes));
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            bail!(Format, "overlapping tensors in manifest");
        }
        Ok(Self { model, vocab })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The stored model in working precision.
    pub fn model_as<T: Float>(&self) -> LanguageModel<T> {
        self.model.cast::<T>()
    }
}

fn split_line(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    match bytes.iter().position(|&b| b == b'\n') {
        Some(i) => Ok((&bytes[..i], &bytes[i + 1..])),
        None => bail!(Format, "checkpoint preamble is incomplete"),
    }
}

fn slice(blob: &[u8], offset: usize, len: usize) -> Result<&[u8]> {
    match offset.checked_add(len) {
        Some(end) if end <= blob.len() => Ok(&blob[offset..end]),
        _ => bail!(Format, "blob range {offset}+{len} exceeds {} bytes", blob.len()),
    }
}
