//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic  b"M2NETCKPT"
//! version u16
//! count  u32
//! count x record:
//!   name_len u32, name (utf-8)
//!   dtype u8, rank u8, dims [u64; rank]
//!   payload_len u64, payload
//! ```
//!
//! Records are sorted by name. Parameters are stored as f32, optimizer
//! moments and power-iteration vectors as f64, the config snapshot as
//! `key=value` text and the counters as u64.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 9] = b"M2NETCKPT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
enum Dtype {
    F32 = 0,
    Text = 1,
    U64 = 2,
    F64 = 3,
}

impl Dtype {
    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Dtype::F32,
            1 => Dtype::Text,
            2 => Dtype::U64,
            3 => Dtype::F64,
            other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::Text => 1,
            Dtype::U64 | Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Record {
    dtype: Dtype,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

impl Record {
    fn floats(t: &Tensor, dtype: Dtype) -> Self {
        let payload = match dtype {
            Dtype::F32 => t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect(),
            _ => t.data().iter().flat_map(|&v| v.to_le_bytes()).collect(),
        };
        Self {
            dtype,
            dims: t.shape().to_vec(),
            payload,
        }
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let data = match self.dtype {
            Dtype::F32 => self
                .payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => self
                .payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(Error::Checkpoint(format!("{name}: expected a float record, got {other:?}"))),
        };
        Tensor::from_vec(&self.dims, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))
    }

    fn u64s(&self) -> Vec<u64> {
        self.payload
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect()
    }
}

/// Config snapshot plus full training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

fn model_stores(m: &Model) -> [&ParamStore; 3] {
    [&m.hfe.store, &m.generator.store, &m.discriminator.store]
}

fn model_stores_mut(m: &mut Model) -> [&mut ParamStore; 3] {
    [&mut m.hfe.store, &mut m.generator.store, &mut m.discriminator.store]
}

impl Checkpoint {
    pub fn new(config: TrainConfig, state: TrainState) -> Self {
        Self { config, state }
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    fn records(&self) -> BTreeMap<String, Record> {
        let mut r = BTreeMap::new();
        let text = self.config.to_text().into_bytes();
        r.insert(
            "meta.config".to_string(),
            Record {
                dtype: Dtype::Text,
                dims: vec![text.len()],
                payload: text,
            },
        );
        let s = &self.state;
        let counters = [s.epoch as u64, s.step as u64, s.opt_g.t, s.opt_d.t];
        r.insert(
            "meta.counters".to_string(),
            Record {
                dtype: Dtype::U64,
                dims: vec![counters.len()],
                payload: counters.iter().flat_map(|c| c.to_le_bytes()).collect(),
            },
        );
        for store in model_stores(&s.model) {
            for (name, t) in store.params() {
                r.insert(format!("param.{name}"), Record::floats(t, Dtype::F32));
            }
            for (name, t) in store.buffers() {
                r.insert(format!("buffer.{name}"), Record::floats(t, Dtype::F64));
            }
        }
        for (tag, opt) in [("g", &s.opt_g), ("d", &s.opt_d)] {
            for (name, t) in &opt.m {
                r.insert(format!("adam.{tag}.m.{name}"), Record::floats(t, Dtype::F64));
            }
            for (name, t) in &opt.v {
                r.insert(format!("adam.{tag}.v.{name}"), Record::floats(t, Dtype::F64));
            }
        }
        r
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let records = self.records();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, rec) in &records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rec.dtype as u8);
            out.push(rec.dims.len() as u8);
            for &d in &rec.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(rec.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&rec.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(rd.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let count = u32::from_le_bytes(rd.array()?) as usize;
        let mut records = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(rd.array()?) as usize;
            let name = String::from_utf8(rd.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("record name is not utf-8".into()))?;
            let dtype = Dtype::from_code(rd.take(1)?[0])?;
            let rank = rd.take(1)?[0] as usize;
            let dims = (0..rank)
                .map(|_| rd.array().map(|b| u64::from_le_bytes(b) as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = u64::from_le_bytes(rd.array()?) as usize;
            let expected = dims.iter().product::<usize>().checked_mul(dtype.width());
            if expected != Some(len) {
                return Err(Error::Checkpoint(format!("{name}: payload of {len} bytes does not match dims {dims:?}")));
            }
            let payload = rd.take(len)?.to_vec();
            if records.insert(name.clone(), Record { dtype, dims, payload }).is_some() {
                return Err(Error::Checkpoint(format!("duplicate record {name}")));
            }
        }
        if rd.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after the last record".into()));
        }
        Self::from_records(records)
    }

    fn from_records(mut records: BTreeMap<String, Record>) -> Result<Self> {
        let mut take = |name: &str| {
            records
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
        };
        let cfg = take("meta.config")?;
        let text = String::from_utf8(cfg.payload).map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
        let config = TrainConfig::from_text(&text).map_err(|e| Error::Checkpoint(format!("config snapshot: {e}")))?;
        let counters = take("meta.counters")?.u64s();
        let [epoch, step, tg, td] = counters[..] else {
            return Err(Error::Checkpoint("counters record must hold 4 values".into()));
        };
        let mut model = Model::new(config.model.clone(), 0);
        for store in model_stores_mut(&mut model) {
            let names: Vec<String> = store.params().map(|(n, _)| n.to_string()).collect();
            for name in names {
                let key = format!("param.{name}");
                let t = take(&key)?.tensor(&key)?;
                let slot = store.get_mut(&name)?;
                if slot.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: stored shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
            let names: Vec<String> = store.buffers().map(|(n, _)| n.to_string()).collect();
            for name in names {
                let key = format!("buffer.{name}");
                let t = take(&key)?.tensor(&key)?;
                let slot = store.buffer_mut(&name)?;
                if slot.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("{name}: buffer shape mismatch")));
                }
                *slot = t;
            }
        }
        let mut opt_g = Adam::new(config.beta1, config.beta2);
        let mut opt_d = Adam::new(config.beta1, config.beta2);
        opt_g.t = tg;
        opt_d.t = td;
        for (name, rec) in records {
            let parts: Vec<&str> = name.splitn(4, '.').collect();
            let (opt, slot) = match parts[..] {
                ["adam", "g", "m", p] => (&mut opt_g.m, p),
                ["adam", "g", "v", p] => (&mut opt_g.v, p),
                ["adam", "d", "m", p] => (&mut opt_d.m, p),
                ["adam", "d", "v", p] => (&mut opt_d.v, p),
                _ => return Err(Error::Checkpoint(format!("unexpected record {name}"))),
            };
            opt.insert(slot.to_string(), rec.tensor(&name)?);
        }
        Ok(Self {
            config,
            state: TrainState {
                model,
                opt_g,
                opt_d,
                epoch: epoch as usize,
                step: step as usize,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{ModelConfig, Toggles};

    fn small() -> Checkpoint {
        let config = TrainConfig {
            model: ModelConfig {
                hfe_widths: [4, 4, 4, 4],
                gen_widths: [4, 8],
                disc_widths: [4, 4, 4, 4],
                toggles: Toggles::default(),
            },
            ..TrainConfig::default()
        };
        let state = TrainState::new(&config);
        Checkpoint::new(config, state)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = small().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = small().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[9] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
    }
}
