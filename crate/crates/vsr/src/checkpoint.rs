//! Versioned checkpoint archive.
//!
//! Layout: the 8-byte magic `VSRCKPT\0`, a `u32` LE format version, a `u64`
//! LE header length, the JSON header, then every tensor as `f64` LE values
//! back to back. The header names each tensor, its shape and its offset (in
//! values) into that blob, grouped into sections per network.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vsr_core::losses::LossTerms;
use vsr_core::trainer::{AdamState, Models, TrainConfig, TrainState, Trainer};
use vsr_core::Tensor;

use crate::error::{IoContext, Result, VsrError};

pub const MAGIC: &[u8; 8] = b"VSRCKPT\0";
pub const VERSION: u32 = 1;
pub const FORMAT_TAG: &str = "vsr-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSteps {
    pub generator: u64,
    pub flow: Option<u64>,
    pub discriminator: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub code_version: String,
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
    pub rng_word_pos: [u64; 2],
    pub running: LossTerms,
    pub adam_steps: AdamSteps,
    pub sections: Vec<Section>,
    pub blob_values: u64,
}

/// A training configuration together with the full resumable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

struct Blob {
    values: Vec<f64>,
    sections: Vec<Section>,
}

impl Blob {
    fn push(&mut self, name: &str, tensors: &[(String, Tensor)]) {
        let mut entries = Vec::with_capacity(tensors.len());
        for (n, t) in tensors {
            entries.push(TensorEntry { name: n.clone(), shape: t.shape().to_vec(), offset: self.values.len() as u64 });
            self.values.extend_from_slice(t.data());
        }
        self.sections.push(Section { name: name.into(), tensors: entries });
    }
}

fn name_like(names: &[(String, Tensor)], values: &[Tensor]) -> Vec<(String, Tensor)> {
    names.iter().zip(values).map(|((n, _), v)| (n.clone(), v.clone())).collect()
}

impl Checkpoint {
    pub fn of(trainer: &Trainer) -> Self {
        Checkpoint { config: trainer.config().clone(), state: trainer.export_state() }
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let mut blob = Blob { values: Vec::new(), sections: Vec::new() };
        blob.push("generator", &s.generator);
        blob.push("flow", &s.flow);
        blob.push("discriminator", &s.discriminator);
        blob.push("adam.generator.m", &name_like(&s.generator, &s.adam_generator.m));
        blob.push("adam.generator.v", &name_like(&s.generator, &s.adam_generator.v));
        if let Some(a) = &s.adam_flow {
            blob.push("adam.flow.m", &name_like(&s.flow, &a.m));
            blob.push("adam.flow.v", &name_like(&s.flow, &a.v));
        }
        blob.push("adam.discriminator.m", &name_like(&s.discriminator, &s.adam_discriminator.m));
        blob.push("adam.discriminator.v", &name_like(&s.discriminator, &s.adam_discriminator.v));
        let header = Header {
            format: FORMAT_TAG.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            step: s.step,
            seed: self.config.seed,
            config: self.config.clone(),
            rng_word_pos: [s.rng_word_pos_hi, s.rng_word_pos_lo],
            running: s.running,
            adam_steps: AdamSteps {
                generator: s.adam_generator.step,
                flow: s.adam_flow.as_ref().map(|a| a.step),
                discriminator: s.adam_discriminator.step,
            },
            sections: blob.sections,
            blob_values: blob.values.len() as u64,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + json.len() + blob.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &blob.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read_header(bytes: &[u8]) -> std::result::Result<(Header, &[u8]), String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let end = usize::try_from(len).ok().and_then(|l| l.checked_add(20)).filter(|&e| e <= bytes.len());
        let end = end.ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(&bytes[20..end]).map_err(|e| format!("bad header: {e}"))?;
        if header.format != FORMAT_TAG {
            return Err(format!("unknown format tag {:?}", header.format));
        }
        Ok((header, &bytes[end..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (h, raw) = Self::read_header(bytes)?;
        if raw.len() as u64 != h.blob_values * 8 {
            return Err(format!("expected {} tensor bytes, found {}", h.blob_values * 8, raw.len()));
        }
        let value = |i: usize| f64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap());
        let section = |name: &str| -> std::result::Result<Vec<(String, Tensor)>, String> {
            let Some(s) = h.sections.iter().find(|s| s.name == name) else {
                return Ok(Vec::new());
            };
            s.tensors
                .iter()
                .map(|e| {
                    let n: usize = e.shape.iter().product();
                    let start = e.offset as usize;
                    if start + n > h.blob_values as usize {
                        return Err(format!("tensor {name}/{} out of range", e.name));
                    }
                    let data = (start..start + n).map(value).collect();
                    let t = Tensor::from_vec(&e.shape, data).map_err(|e| e.to_string())?;
                    Ok((e.name.clone(), t))
                })
                .collect()
        };
        let values = |name: &str| section(name).map(|v| v.into_iter().map(|(_, t)| t).collect::<Vec<_>>());
        let adam = |name: &str, step: u64| -> std::result::Result<AdamState, String> {
            Ok(AdamState { step, m: values(&format!("adam.{name}.m"))?, v: values(&format!("adam.{name}.v"))? })
        };
        let state = TrainState {
            step: h.step,
            rng_word_pos_hi: h.rng_word_pos[0],
            rng_word_pos_lo: h.rng_word_pos[1],
            generator: section("generator")?,
            flow: section("flow")?,
            discriminator: section("discriminator")?,
            adam_generator: adam("generator", h.adam_steps.generator)?,
            adam_flow: h.adam_steps.flow.map(|s| adam("flow", s)).transpose()?,
            adam_discriminator: adam("discriminator", h.adam_steps.discriminator)?,
            running: h.running,
        };
        Ok(Checkpoint { config: h.config, state })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let mut f = File::create(&tmp).at(&tmp)?;
        f.write_all(&self.to_bytes()).at(&tmp)?;
        f.sync_all().at(&tmp)?;
        drop(f);
        fs::rename(&tmp, path).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|m| VsrError::format(path, m))
    }

    /// Continues training exactly where the checkpoint stopped.
    pub fn into_trainer(self) -> Result<Trainer> {
        Ok(Trainer::from_state(self.config, self.state)?)
    }

    /// The saved networks, without optimiser state.
    pub fn models(&self) -> Result<Models> {
        let mut m = Models::new(&self.config)?;
        m.generator.params_mut().load_named(&self.state.generator)?;
        m.discriminator.params_mut().load_named(&self.state.discriminator)?;
        if let Some(p) = m.flow_params_mut() {
            p.load_named(&self.state.flow)?;
        } else if !self.state.flow.is_empty() {
            return Err(VsrError::Data("checkpoint holds flow weights but its config has no learned flow".into()));
        }
        Ok(m)
    }
}
