//! Single-file model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic | `b"INSCK"` |
//! | format version | u32 ([`FORMAT_VERSION`]) |
//! | config length, config | u64, UTF-8 TOML of the resolved [`RunConfig`] |
//! | cursor | u64 cycle, u8 stage code, u64 epoch |
//! | tensor count | u32 |
//! | per tensor | u32 rank, u64 per dim, f64 per value |
//! | prototype count `m` | u64 |
//! | labels | `m` f64 |
//! | `d_max` | f64 |
//! | provenance, per prototype | u8 present flag, then u64 sample, row, col if present |
//! | optimizer state flag | u8, always 0 (moments are not stored) |
//!
//! Tensors are the backbone blocks (weight, bias each), the final block,
//! the prototype matrix and the head weights, in that order.

use std::path::Path;

use insightr_tensor::Tensor;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::config::RunConfig;
use crate::error::Result;
use crate::model::ProtoModel;
use crate::prototype::{PrototypeBank, Provenance};
use crate::trainer::{Stage, StageState};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"INSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub cursor: StageState,
    pub model: ProtoModel,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(FORMAT_VERSION);
        let text = self.config.to_toml();
        w.u64(text.len() as u64);
        w.bytes(text.as_bytes());
        w.u64(self.cursor.cycle as u64);
        w.u8(self.cursor.stage.code());
        w.u64(self.cursor.epoch as u64);
        let tensors = self.model.all_tensors();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        let bank = &self.model.bank;
        w.u64(bank.len() as u64);
        w.f64s(bank.labels());
        w.f64(bank.d_max);
        for p in &bank.provenance {
            match p {
                Some(p) => {
                    w.u8(1);
                    w.u64(p.sample as u64);
                    w.u64(p.row as u64);
                    w.u64(p.col as u64);
                }
                None => w.u8(0),
            }
        }
        w.u8(0);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.err("config is not UTF-8"))?;
        let config = RunConfig::from_toml_str(text).map_err(|e| r.err(format!("embedded config: {e}")))?;
        let cycle = r.u64()? as usize;
        let stage = Stage::from_code(r.u8()?).ok_or_else(|| r.err("unknown stage code"))?;
        let epoch = r.u64()? as usize;
        let mut model = ProtoModel::new(config.backbone.clone(), &config.prototypes, config.seed)?;
        let count = r.u32()? as usize;
        let expected = model.all_tensors().len();
        if count != expected {
            return Err(r.err(format!("{count} tensors stored, architecture has {expected}")));
        }
        for slot in model.all_tensors_mut() {
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(r.err(format!("tensor shape {shape:?} does not match {:?}", slot.shape())));
            }
            let n = shape.iter().product();
            *slot = Tensor::new(shape, r.f64s(n)?)?;
        }
        let m = r.u64()? as usize;
        if m != model.bank.len() {
            return Err(r.err(format!("{m} prototype labels stored, config has {}", model.bank.len())));
        }
        let labels = r.f64s(m)?;
        let d_max = r.f64()?;
        let mut provenance = Vec::with_capacity(m);
        for _ in 0..m {
            provenance.push(match r.u8()? {
                0 => None,
                1 => Some(Provenance {
                    sample: r.u64()? as usize,
                    row: r.u64()? as usize,
                    col: r.u64()? as usize,
                }),
                f => return Err(r.err(format!("bad provenance flag {f}"))),
            });
        }
        if r.u8()? != 0 {
            return Err(r.err("optimizer state is not supported"));
        }
        r.finish()?;
        let mut bank = PrototypeBank::new(model.bank.vectors.clone(), labels)?;
        bank.d_max = d_max;
        bank.provenance = provenance;
        model.bank = bank;
        Ok(Checkpoint {
            config,
            cursor: StageState { cycle, stage, epoch },
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}
