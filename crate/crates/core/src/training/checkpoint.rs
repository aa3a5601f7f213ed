//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RVLA" | u32 version | u32 meta_len | meta_len bytes of UTF-8 JSON
//! then, until end of file, one record per tensor:
//! u16 name_len | name | u8 ndim | ndim × u32 dims | prod(dims) × f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::retriever::Encoder;
use crate::transformer::{ModelConfig, TransformerWeights};

pub const MAGIC: &[u8; 4] = b"RVLA";
pub const VERSION: u32 = 1;

/// Named tensors plus JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let meta = serde_json::to_vec(&self.metadata)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too large".into()))?.to_le_bytes())?;
        w.write_all(&meta)?;
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Format("too many dimensions".into()))?;
            w.write_all(&[ndim])?;
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Format("dimension too large".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("missing RVLA magic".into()));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = cur.u32()? as usize;
        let metadata = serde_json::from_slice(cur.take(meta_len)?)?;
        let mut tensors = Vec::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = cur.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            if shape.contains(&0) {
                return Err(Error::Format(format!("zero extent in {name}")));
            }
            tensors.push((name, Tensor::new(&shape, data)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Rounds every value to the nearest `f32`, the checkpoint's storage
/// precision.
pub fn round_to_storage(w: &mut TransformerWeights<Tensor>) {
    w.visit_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32)));
}

/// Typed metadata for model checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"revela"` or `"replug"`.
    pub kind: String,
    pub step: u64,
    pub seed: u64,
    pub rng: String,
    pub lm: ModelConfig,
    pub retriever: ModelConfig,
    /// Fully resolved run configuration.
    pub config: serde_json::Value,
}

/// Language model and retriever parameters together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub lm_config: ModelConfig,
    pub lm: TransformerWeights<Tensor>,
    pub retriever: Encoder,
}

/// Optimizer state for whichever groups are being trained.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerStates {
    pub lm: Option<AdamState>,
    pub retriever: Option<AdamState>,
}

fn push_group(out: &mut Vec<(String, Tensor)>, prefix: &str, w: &TransformerWeights<Tensor>) {
    w.visit(|n, t| out.push((format!("{prefix}.{n}"), t.detached())));
}

fn push_opt(out: &mut Vec<(String, Tensor)>, prefix: &str, template: &TransformerWeights<Tensor>, s: &AdamState) {
    let mut names = Vec::new();
    template.visit(|n, _| names.push(n.to_string()));
    for ((n, m), v) in names.iter().zip(&s.first).zip(&s.second) {
        out.push((format!("opt.{prefix}.m.{n}"), m.clone()));
        out.push((format!("opt.{prefix}.v.{n}"), v.clone()));
    }
    out.push((format!("opt.{prefix}.step"), Tensor::new(&[1], vec![s.step as f64])));
}

fn fill_group(ck: &Checkpoint, prefix: &str, template: &TransformerWeights<Tensor>) -> Result<TransformerWeights<Tensor>> {
    let mut missing = None;
    let out = template.map(|n, t| {
        let key = format!("{prefix}.{n}");
        match ck.get(&key) {
            Some(found) if found.shape() == t.shape() => found.detached().with_grad(),
            _ => {
                missing.get_or_insert(key);
                t.clone()
            }
        }
    });
    match missing {
        Some(k) => Err(Error::Format(format!("checkpoint lacks tensor {k} of the configured shape"))),
        None => Ok(out),
    }
}

fn fill_opt(ck: &Checkpoint, prefix: &str, template: &TransformerWeights<Tensor>) -> Option<AdamState> {
    let step = ck.get(&format!("opt.{prefix}.step"))?.data()[0] as u64;
    let mut first = Vec::new();
    let mut second = Vec::new();
    let mut ok = true;
    template.visit(|n, _| {
        match (ck.get(&format!("opt.{prefix}.m.{n}")), ck.get(&format!("opt.{prefix}.v.{n}"))) {
            (Some(m), Some(v)) => {
                first.push(m.clone());
                second.push(v.clone());
            }
            _ => ok = false,
        }
    });
    ok.then_some(AdamState { first, second, step })
}

impl ModelPair {
    pub fn to_checkpoint(&self, meta: &CheckpointMeta, opt: &OptimizerStates) -> Result<Checkpoint> {
        let mut tensors = Vec::new();
        push_group(&mut tensors, "lm", &self.lm);
        push_group(&mut tensors, "retriever", &self.retriever.weights);
        if let Some(s) = &opt.lm {
            push_opt(&mut tensors, "lm", &self.lm, s);
        }
        if let Some(s) = &opt.retriever {
            push_opt(&mut tensors, "retriever", &self.retriever.weights, s);
        }
        Ok(Checkpoint {
            metadata: serde_json::to_value(meta)?,
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, CheckpointMeta, OptimizerStates)> {
        let meta: CheckpointMeta = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        meta.lm.validate()?;
        meta.retriever.validate()?;
        // Shapes only; values are overwritten.
        let mut rng = crate::rng::seeded(0);
        let lm_t = TransformerWeights::init(&meta.lm, &mut rng);
        let ret_t = TransformerWeights::init(&meta.retriever, &mut rng);
        let lm = fill_group(ck, "lm", &lm_t)?;
        let retriever = fill_group(ck, "retriever", &ret_t)?;
        let opt = OptimizerStates {
            lm: fill_opt(ck, "lm", &lm_t),
            retriever: fill_opt(ck, "retriever", &ret_t),
        };
        Ok((
            Self {
                lm_config: meta.lm.clone(),
                lm,
                retriever: Encoder {
                    config: meta.retriever.clone(),
                    weights: retriever,
                },
            },
            meta,
            opt,
        ))
    }

    /// Rounds both parameter groups to checkpoint precision, so a saved and
    /// reloaded copy is bitwise identical to this one.
    pub fn round_to_storage(&mut self) {
        round_to_storage(&mut self.lm);
        round_to_storage(&mut self.retriever.weights);
    }
}
