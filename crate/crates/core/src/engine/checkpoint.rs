//! Binary checkpoint: `TFCK`, version, iteration, tensor records, then the
//! training config as JSON.

use std::fs;
use std::path::Path;

use diffcore::{ParamStore, Tensor};

use super::optim::AdamW;
use super::train::TrainConfig;
use crate::error::{io_err, Error, Result};
use crate::model::TextFormer;

pub const MAGIC: &[u8; 4] = b"TFCK";
pub const FORMAT_VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        let mut records: Vec<(String, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), &p.tensor))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (p, (m, v)) in self.params.iter().zip(opt.m.iter().zip(&opt.v)) {
                records.push((format!("{M_PREFIX}{}", p.name), m));
                records.push((format!("{V_PREFIX}{}", p.name), v));
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let json =
            serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Checkpoint("record too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        let len = r.u32()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }

        let (_, mut params) = TextFormer::new::<f32>(config.model.clone(), 0)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut seen = 0;
        for (name, t) in records {
            if let Some(base) = name.strip_prefix(M_PREFIX) {
                m.push((base.to_string(), t));
            } else if let Some(base) = name.strip_prefix(V_PREFIX) {
                v.push((base.to_string(), t));
            } else {
                params.set(&name, t)?;
                seen += 1;
            }
        }
        if seen != params.len() {
            return Err(Error::Checkpoint(format!(
                "{seen} of {} parameters present",
                params.len()
            )));
        }
        let optimizer = if m.is_empty() && v.is_empty() {
            None
        } else {
            let mut opt = AdamW::new(&params, config.weight_decay);
            opt.steps = iteration;
            for (list, slot) in [(m, &mut opt.m), (v, &mut opt.v)] {
                if list.len() != params.len() {
                    return Err(Error::Checkpoint("incomplete optimizer moments".into()));
                }
                for (name, t) in list {
                    let id = params
                        .id(&name)
                        .ok_or(Error::Checkpoint(format!("moment for unknown {name}")))?;
                    if t.shape() != params.get(id).tensor.shape() {
                        return Err(Error::Checkpoint(format!(
                            "moment shape mismatch for {name}"
                        )));
                    }
                    slot[id.index()] = t;
                }
            }
            Some(opt)
        };
        Ok(Self {
            iteration,
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// The network layout matching the stored parameters.
    pub fn model(&self) -> Result<TextFormer> {
        Ok(TextFormer::new::<f32>(self.config.model.clone(), 0)?.0)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
