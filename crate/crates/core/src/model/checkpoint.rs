//! Binary container: magic, format version, a length-prefixed JSON header
//! naming every tensor, then the tensors as raw little-endian f64.
//!
//! Float values never pass through text, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use lhuc_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::{ConformerModel, ModelConfig, SpeakerParams};
use crate::error::{Error, Result};
use crate::objectives::VariationalPosterior;

const MAGIC: &[u8; 8] = b"LHUCBNDL";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus free-form metadata, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Bundle {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model bundle".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bundle version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(Self { kind: header.kind, meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} bundle, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<f64>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        Ok(self.tensors.remove(i).1)
    }
}

/// Per-speaker state kept in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub enum SpeakerState<T> {
    Deterministic(SpeakerParams<T>),
    Variational(VariationalPosterior<T>),
}

impl<T: Scalar> SpeakerState<T> {
    /// Parameters used at decode time: `r`, or the posterior mean.
    pub fn decode_params(&self, speaker_id: &str) -> SpeakerParams<T> {
        match self {
            SpeakerState::Deterministic(p) => p.clone(),
            SpeakerState::Variational(q) => q.mean_params(speaker_id),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    blank: usize,
    sos: usize,
    eos: usize,
    /// speaker id → "deterministic" | "variational"
    speakers: BTreeMap<String, String>,
}

const KIND: &str = "conformer-checkpoint";

/// Model weights plus the speaker map.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: ConformerModel<T>,
    pub speakers: BTreeMap<String, SpeakerState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(model: ConformerModel<T>) -> Self {
        Self { model, speakers: BTreeMap::new() }
    }

    pub fn to_bundle(&self) -> Bundle {
        let c = &self.model.config;
        let mut tensors: Vec<(String, Tensor<f64>)> =
            self.model.params.iter().map(|(n, t)| (n.to_string(), t.cast())).collect();
        let mut kinds = BTreeMap::new();
        for (id, s) in &self.speakers {
            match s {
                SpeakerState::Deterministic(p) => {
                    kinds.insert(id.clone(), "deterministic".to_string());
                    tensors.push((format!("speaker/{id}/r"), p.r.cast()));
                }
                SpeakerState::Variational(q) => {
                    kinds.insert(id.clone(), "variational".to_string());
                    tensors.push((format!("speaker/{id}/mu"), q.mu.cast()));
                    tensors.push((format!("speaker/{id}/log_sigma"), q.log_sigma.cast()));
                }
            }
        }
        let meta = CheckpointMeta { config: c.clone(), blank: c.blank(), sos: c.sos(), eos: c.eos(), speakers: kinds };
        Bundle { kind: KIND.into(), meta: serde_json::to_value(meta).expect("serializable meta"), tensors }
    }

    pub fn from_bundle(mut b: Bundle) -> Result<Self> {
        b.expect_kind(KIND)?;
        let meta: CheckpointMeta = serde_json::from_value(b.meta.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let c = &meta.config;
        if (meta.blank, meta.sos, meta.eos) != (c.blank(), c.sos(), c.eos()) {
            return Err(Error::Format("special-token indices disagree with the config".into()));
        }
        // Shapes and names come from a fresh build; values are then overwritten.
        let mut model = ConformerModel::<T>::new(meta.config.clone(), 0)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let t = b.take(name)?;
            let slot = &mut model.params.tensors_mut()[i];
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.cast();
        }
        let mut speakers = BTreeMap::new();
        for (id, kind) in &meta.speakers {
            let state = match kind.as_str() {
                "deterministic" => {
                    SpeakerState::Deterministic(SpeakerParams { speaker_id: id.clone(), r: b.take(&format!("speaker/{id}/r"))?.cast() })
                }
                "variational" => SpeakerState::Variational(VariationalPosterior {
                    mu: b.take(&format!("speaker/{id}/mu"))?.cast(),
                    log_sigma: b.take(&format!("speaker/{id}/log_sigma"))?.cast(),
                }),
                other => return Err(Error::Format(format!("unknown speaker state {other}"))),
            };
            speakers.insert(id.clone(), state);
        }
        if let Some((name, _)) = b.tensors.first() {
            return Err(Error::Format(format!("unexpected tensor {name}")));
        }
        Ok(Self { model, speakers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(Bundle::load(path)?)
    }

    /// Decode-time parameters for a speaker; `None` for unknown speakers (SI).
    pub fn speaker_params(&self, speaker_id: &str) -> Option<SpeakerParams<T>> {
        self.speakers.get(speaker_id).map(|s| s.decode_params(speaker_id))
    }
}
