//! Single-file model container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "PSAINTCK"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen bytes
//! blobs   f64 values of every tensor listed in the header, in order
//! digest  32 bytes SHA-256 of everything above
//! ```
//!
//! Floats in the header are written with round-trip precision, so a
//! save/load cycle reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use probsaint_autodiff::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{EncodedBatch, FeatureSchema, FittedEncoders, RawRow, SplitBounds};
use crate::inference::Predictor;
use crate::model::{InputLayout, ModelConfig, ProbSaintModel};
use crate::train::{TrainConfig, TrainOutcome};

pub const MAGIC: &[u8; 8] = b"PSAINTCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

/// A trained model with everything needed to serve it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ProbSaintModel,
    pub encoders: FittedEncoders,
    pub schema: FeatureSchema,
    /// Raw training rows scored alongside each query under the
    /// fixed-context policy.
    pub context_rows: Vec<RawRow>,
    /// Seed the network was initialized and trained with.
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub split: Option<SplitBounds>,
    /// Digest of the training rows, see [`fingerprint_rows`].
    pub train_fingerprint: Option<String>,
}

/// Hex SHA-256 over the raw rows: each field followed by a unit separator,
/// missing fields as a lone record separator, each row closed by a newline.
pub fn fingerprint_rows(rows: &[RawRow]) -> String {
    let mut h = Sha256::new();
    for row in rows {
        for field in &row.0 {
            match field {
                Some(v) => {
                    h.update(v.as_bytes());
                    h.update([0x1f]);
                }
                None => h.update([0x1e]),
            }
        }
        h.update(b"\n");
    }
    to_hex(&h.finalize())
}

fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    layout: InputLayout,
    encoders: FittedEncoders,
    schema: FeatureSchema,
    context_rows: Vec<RawRow>,
    seed: u64,
    train_config: Option<TrainConfig>,
    split: Option<SplitBounds>,
    train_fingerprint: Option<String>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Packages a training run. `train_rows` and `train_batch` are the raw
    /// and encoded training split the run used; the context rows are looked
    /// up through the batch's source indices.
    pub fn from_training(
        outcome: TrainOutcome,
        train_rows: &[RawRow],
        train_batch: &EncodedBatch,
        encoders: FittedEncoders,
        schema: FeatureSchema,
        cfg: &TrainConfig,
        split: Option<SplitBounds>,
    ) -> Result<Self> {
        let context_rows = outcome
            .context_indices
            .iter()
            .map(|&i| {
                train_batch
                    .source_rows
                    .get(i)
                    .and_then(|&r| train_rows.get(r))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("context row {i} is not in the training split")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: outcome.model,
            encoders,
            schema,
            context_rows,
            seed: cfg.seed,
            train_config: Some(cfg.clone()),
            split,
            train_fingerprint: Some(fingerprint_rows(train_rows)),
        })
    }

    pub fn predictor(&self) -> Result<Predictor> {
        Predictor::new(self.model.clone(), self.encoders.clone(), self.schema.clone(), &self.context_rows)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<TensorEntry> = self
            .model
            .params
            .iter()
            .map(|(_, name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() })
            .collect();
        let header = Header {
            config: self.model.config.clone(),
            layout: self.model.layout.clone(),
            encoders: self.encoders.clone(),
            schema: self.schema.clone(),
            context_rows: self.context_rows.clone(),
            seed: self.seed,
            train_config: self.train_config.clone(),
            split: self.split,
            train_fingerprint: self.train_fingerprint.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + 8 * self.model.num_parameters() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN + DIGEST_LEN {
            return Err(Error::Integrity(format!("file is only {} bytes long", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic bytes)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch (file truncated or corrupted)".into()));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes"));
        let hlen = usize::try_from(hlen).map_err(|_| Error::Integrity("header length overflows".into()))?;
        let header_end = PREAMBLE_LEN
            .checked_add(hlen)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| Error::Integrity("header extends past the end of the file".into()))?;
        let header: Header = serde_json::from_slice(&body[PREAMBLE_LEN..header_end])?;

        let mut model = ProbSaintModel::new(header.config, header.layout, header.seed)?;
        let expected = model.params.iter().count();
        if header.tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, the configured model has {expected}",
                header.tensors.len()
            )));
        }
        let mut blobs = body[header_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let blob_len = body.len() - header_end;
        let numel: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if blob_len != 8 * numel {
            return Err(Error::Integrity(format!("expected {} bytes of tensor data, found {blob_len}", 8 * numel)));
        }
        let mut seen = std::collections::HashSet::new();
        for entry in &header.tensors {
            if !seen.insert(entry.name.as_str()) {
                return Err(Error::Checkpoint(format!("parameter `{}` appears twice", entry.name)));
            }
            let n = entry.shape.iter().product();
            let tensor = Tensor::new(entry.shape.clone(), blobs.by_ref().take(n).collect())?;
            let slot = model
                .params
                .by_name_mut(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", entry.name)))?;
            if slot.shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, the model expects {:?}",
                    entry.name,
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(Self {
            model,
            encoders: header.encoders,
            schema: header.schema,
            context_rows: header.context_rows,
            seed: header.seed,
            train_config: header.train_config,
            split: header.split,
            train_fingerprint: header.train_fingerprint,
        })
    }

    /// Short identifier derived from the serialized checkpoint; equal
    /// checkpoints share it.
    pub fn version_id(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(to_hex(&bytes[bytes.len() - DIGEST_LEN..][..8]))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
