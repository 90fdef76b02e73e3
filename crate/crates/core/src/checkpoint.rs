//! Checkpoint container: a magic line, a one-line JSON header with the
//! tensor directory, then little-endian f32 payloads.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraSpec;
use crate::numerics::optim::Moments;
use crate::numerics::{OptimizerState, Tensor};
use crate::prompt::{SpeechPlacement, Tokenizer};
use crate::speech::SpeechConfig;
use crate::system::{SpeechLlm, SystemSpec};
use crate::training::TrainingMode;
use crate::transformer::ModelConfig;

pub const MAGIC: &str = "cotst-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub speech: Option<SpeechConfig>,
    pub lora: Option<LoraSpec>,
    pub placement: SpeechPlacement,
    pub mode: TrainingMode,
    pub step: u64,
    /// Only adapter and speech-encoder tensors are stored.
    pub adapters_only: bool,
    pub vocab: Vec<String>,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: SystemSpec,
    pub mode: TrainingMode,
    pub step: u64,
    pub adapters_only: bool,
    pub vocab: Vec<String>,
    pub optimizer: Option<OptimizerMeta>,
    /// Model tensors followed by optimizer moments, in store order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of `sys`. With `adapters_only`, base text-model tensors are
    /// left out.
    pub fn from_system(
        sys: &SpeechLlm,
        mode: TrainingMode,
        step: u64,
        adapters_only: bool,
        optimizer: Option<&OptimizerState>,
    ) -> Result<Self> {
        if adapters_only && !sys.model.has_lora() {
            return Err(Error::State("adapter-only checkpoint of a model without adapters".into()));
        }
        let keep = |name: &str| !adapters_only || SpeechLlm::is_adapter_param(name);
        let mut tensors: Vec<(String, Tensor)> = sys
            .store
            .iter()
            .filter(|(_, n, _)| keep(n))
            .map(|(_, n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("valid shape")))
            .collect();
        let meta = optimizer.map(|opt| {
            for (id, n, t) in sys.store.iter() {
                if let Some(m) = opt.moments(id).filter(|_| keep(n)) {
                    tensors.push((format!("{ADAM_M}{n}"), Tensor::new(t.shape(), m.first.clone()).expect("moment shape")));
                    tensors.push((format!("{ADAM_V}{n}"), Tensor::new(t.shape(), m.second.clone()).expect("moment shape")));
                }
            }
            OptimizerMeta {
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                step: opt.step(),
            }
        });
        Ok(Self {
            spec: sys.spec.clone(),
            mode,
            step,
            adapters_only,
            vocab: sys.tokenizer.tokens().to_vec(),
            optimizer: meta,
            tensors,
        })
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::from_tokens(self.vocab.clone())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Model tensors without optimizer moments.
    pub fn model_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(ADAM_M) && !n.starts_with(ADAM_V))
            .map(|(n, t)| (n.as_str(), t))
    }

    /// Rebuilds the full system a non-partial checkpoint describes.
    pub fn to_system(&self) -> Result<SpeechLlm> {
        if self.adapters_only {
            return Err(Error::State("adapter-only checkpoint needs a base system; use load_into".into()));
        }
        let mut sys = SpeechLlm::new(self.spec.clone(), self.tokenizer()?, 0)?;
        let expected = sys.store.len();
        let found = self.model_tensors().count();
        if expected != found {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {found} model tensors, configuration implies {expected}"
            )));
        }
        self.load_into(&mut sys)?;
        Ok(sys)
    }

    /// Copies every stored model tensor into `sys` by name. Shapes, configs
    /// and vocabularies must agree exactly.
    pub fn load_into(&self, sys: &mut SpeechLlm) -> Result<()> {
        if sys.tokenizer.tokens() != self.vocab.as_slice() {
            return Err(Error::Compatibility("checkpoint vocabulary differs from the system's".into()));
        }
        if sys.spec.model != self.spec.model || sys.spec.speech != self.spec.speech {
            return Err(Error::ConfigMismatch("checkpoint architecture differs from the system's".into()));
        }
        if self.spec.lora.is_some() && sys.spec.lora != self.spec.lora {
            return Err(Error::ConfigMismatch("checkpoint adapters differ from the system's".into()));
        }
        for (name, t) in self.model_tensors() {
            let id = sys
                .store
                .id(name)
                .ok_or_else(|| Error::ConfigMismatch(format!("system has no parameter {name}")))?;
            if sys.store.get(id).shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: checkpoint shape {:?}, system shape {:?}",
                    t.shape(),
                    sys.store.get(id).shape()
                )));
            }
            sys.store.set_data(id, t.data().to_vec())?;
        }
        Ok(())
    }

    /// Optimizer state for `sys`, if the checkpoint carries one.
    pub fn optimizer_state(&self, sys: &SpeechLlm) -> Result<Option<OptimizerState>> {
        let Some(meta) = &self.optimizer else {
            return Ok(None);
        };
        let moments = sys
            .store
            .iter()
            .map(|(_, n, _)| {
                match (self.tensor(&format!("{ADAM_M}{n}")), self.tensor(&format!("{ADAM_V}{n}"))) {
                    (Some(m), Some(v)) => Some(Moments {
                        first: m.data().to_vec(),
                        second: v.data().to_vec(),
                    }),
                    _ => None,
                }
            })
            .collect();
        Ok(Some(OptimizerState::from_parts(meta.beta1, meta.beta2, meta.eps, meta.step, moments)))
    }

    fn header(&self) -> CheckpointHeader {
        let mut offset = 0u64;
        let tensors = self
            .tensors
            .iter()
            .map(|(n, t)| {
                let e = TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        CheckpointHeader {
            version: FORMAT_VERSION,
            model: self.spec.model.clone(),
            speech: self.spec.speech.clone(),
            lora: self.spec.lora.clone(),
            placement: self.spec.placement,
            mode: self.mode,
            step: self.step,
            adapters_only: self.adapters_only,
            vocab: self.vocab.clone(),
            optimizer: self.optimizer.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header()).map_err(|e| Error::Corruption(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(header.len() + payload + 32);
        out.extend_from_slice(format!("{MAGIC} {FORMAT_VERSION}\n").as_bytes());
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = bytes;
        let header = read_header_from(&mut reader)?;
        let total: u64 = header.tensors.iter().map(|e| 4 * e.shape.iter().product::<usize>() as u64).sum();
        if reader.len() as u64 != total {
            return Err(Error::Corruption(format!(
                "payload is {} bytes, header describes {total}",
                reader.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let chunk = reader
                .get(start..start + 4 * n)
                .ok_or_else(|| Error::Corruption(format!("tensor {} lies outside the payload", e.name)))?;
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data).map_err(|err| Error::Corruption(err.to_string()))?));
        }
        Ok(Self {
            spec: SystemSpec {
                model: header.model,
                speech: header.speech,
                lora: header.lora,
                placement: header.placement,
            },
            mode: header.mode,
            step: header.step,
            adapters_only: header.adapters_only,
            vocab: header.vocab,
            optimizer: header.optimizer,
            tensors,
        })
    }
}

fn read_header_from(reader: &mut impl BufRead) -> Result<CheckpointHeader> {
    let mut magic = String::new();
    reader
        .read_line(&mut magic)
        .map_err(|e| Error::Corruption(format!("unreadable magic line: {e}")))?;
    let version = magic
        .trim_end_matches('\n')
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| Error::Corruption("not a checkpoint file".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::Corruption(format!("unreadable header: {e}")))?;
    if !line.ends_with('\n') {
        return Err(Error::Corruption("header line is truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| Error::Corruption(format!("bad header: {e}")))?;
    if header.version != version {
        return Err(Error::Corruption("header version disagrees with magic line".into()));
    }
    Ok(header)
}

/// Reads only the header, leaving the payload untouched.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let file = std::fs::File::open(path).map_err(|e| Error::storage(path, e))?;
    read_header_from(&mut BufReader::new(file))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::storage(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::storage(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
