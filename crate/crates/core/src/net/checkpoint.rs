//! Versioned checkpoint container.
//!
//! Layout: magic `AXCP`, format version, taxonomy hash, training counters,
//! then per-tensor records `(section, name length, name, rank, dims,
//! little-endian 32-bit values)`. Sections hold the live parameters, the
//! optimizer moments, and the best-validation parameter stash used for
//! resumable early stopping.

use std::io::{self, Read, Write};
use std::path::Path;

use super::optim::{OptimizerKind, OptState};
use super::{NetError, Network};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AXCP";
const VERSION: u32 = 1;

const SECTION_PARAM: u8 = 0;
const SECTION_OPT_M: u8 = 1;
const SECTION_OPT_V: u8 = 2;
const SECTION_BEST: u8 = 3;

/// Optimizer moments in checkpoint form.
#[derive(Debug, Clone, PartialEq)]
pub struct OptSnapshot {
    /// 0 = adam, 1 = momentum.
    pub kind: u8,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

/// Best-validation parameters seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct BestStash {
    pub params: Vec<(String, Tensor<f32>)>,
    pub val_loss: f64,
    pub epoch: u32,
}

/// A parameter snapshot plus everything needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub taxonomy_hash: u64,
    /// Epochs completed so far.
    pub epoch: u32,
    /// Master seed; every RNG stream is derived from (seed, epoch, index).
    pub seed: u64,
    pub params: Vec<(String, Tensor<f32>)>,
    pub opt: Option<OptSnapshot>,
    pub best: Option<BestStash>,
    pub epochs_since_improve: u32,
}

impl Checkpoint {
    /// Parameters-only snapshot (inference form).
    pub fn from_network(net: &Network<f32>, taxonomy_hash: u64, epoch: u32, seed: u64) -> Self {
        Self {
            taxonomy_hash,
            epoch,
            seed,
            params: net.snapshot(),
            opt: None,
            best: None,
            epochs_since_improve: 0,
        }
    }

    pub fn opt_snapshot(kind: &OptimizerKind, state: &OptState<f32>) -> OptSnapshot {
        let kind_byte = match kind {
            OptimizerKind::Adam { .. } => 0,
            OptimizerKind::SgdMomentum { .. } => 1,
        };
        match state {
            OptState::Adam { t, m, v } => OptSnapshot {
                kind: kind_byte,
                t: *t,
                m: m.clone(),
                v: v.clone(),
            },
            OptState::Momentum { v } => OptSnapshot {
                kind: kind_byte,
                t: 0,
                m: Vec::new(),
                v: v.clone(),
            },
        }
    }

    pub fn restore_opt_state(&self) -> Option<OptState<f32>> {
        let snap = self.opt.as_ref()?;
        Some(match snap.kind {
            0 => OptState::Adam {
                t: snap.t,
                m: snap.m.clone(),
                v: snap.v.clone(),
            },
            _ => OptState::Momentum { v: snap.v.clone() },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut buf = Vec::new();
        self.encode(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = std::fs::read(path)?;
        Self::decode(&mut bytes.as_slice())
    }

    pub fn encode(&self, w: &mut impl Write) -> Result<(), NetError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.taxonomy_hash.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.epochs_since_improve.to_le_bytes())?;
        let (opt_kind, opt_t) = self.opt.as_ref().map_or((u8::MAX, 0), |o| (o.kind, o.t));
        w.write_all(&[opt_kind])?;
        w.write_all(&opt_t.to_le_bytes())?;
        match &self.best {
            None => {
                w.write_all(&[0u8])?;
                w.write_all(&0f64.to_le_bytes())?;
                w.write_all(&0u32.to_le_bytes())?;
            }
            Some(b) => {
                w.write_all(&[1u8])?;
                w.write_all(&b.val_loss.to_le_bytes())?;
                w.write_all(&b.epoch.to_le_bytes())?;
            }
        }
        let mut records: Vec<(u8, &str, &Tensor<f32>)> = Vec::new();
        for (n, t) in &self.params {
            records.push((SECTION_PARAM, n, t));
        }
        if let Some(o) = &self.opt {
            for (i, t) in o.m.iter().enumerate() {
                records.push((SECTION_OPT_M, &self.params[i].0, t));
            }
            for (i, t) in o.v.iter().enumerate() {
                records.push((SECTION_OPT_V, &self.params[i].0, t));
            }
        }
        if let Some(b) = &self.best {
            for (n, t) in &b.params {
                records.push((SECTION_BEST, n, t));
            }
        }
        w.write_all(&(records.len() as u32).to_le_bytes())?;
        for (section, name, tensor) in records {
            w.write_all(&[section])?;
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[tensor.shape().len() as u8])?;
            for &d in tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn decode(r: &mut impl Read) -> Result<Self, NetError> {
        let bad = |msg: &str| NetError::CheckpointFormat(msg.into());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        if read_u32(r)? != VERSION {
            return Err(bad("unsupported format version"));
        }
        let taxonomy_hash = read_u64(r)?;
        let epoch = read_u32(r)?;
        let seed = read_u64(r)?;
        let epochs_since_improve = read_u32(r)?;
        let opt_kind = read_u8(r)?;
        let opt_t = read_u64(r)?;
        let has_best = read_u8(r)? == 1;
        let best_val = f64::from_le_bytes(read_n(r)?);
        let best_epoch = read_u32(r)?;

        let n = read_u32(r)? as usize;
        let mut params = Vec::new();
        let mut opt_m = Vec::new();
        let mut opt_v = Vec::new();
        let mut best_params = Vec::new();
        for _ in 0..n {
            let section = read_u8(r)?;
            let name_len = u16::from_le_bytes(read_n(r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-utf8 tensor name"))?;
            let rank = read_u8(r)? as usize;
            if rank > 8 {
                return Err(bad("tensor rank too large"));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(r)? as usize);
            }
            let volume: usize = dims.iter().product();
            if volume > 64 << 20 {
                return Err(bad("tensor too large"));
            }
            let mut data = vec![0f32; volume];
            for v in &mut data {
                *v = f32::from_le_bytes(read_n(r)?);
            }
            let tensor = Tensor::from_vec(&dims, data);
            match section {
                SECTION_PARAM => params.push((name, tensor)),
                SECTION_OPT_M => opt_m.push(tensor),
                SECTION_OPT_V => opt_v.push(tensor),
                SECTION_BEST => best_params.push((name, tensor)),
                _ => return Err(bad("unknown tensor section")),
            }
        }
        let opt = (opt_kind != u8::MAX).then_some(OptSnapshot {
            kind: opt_kind,
            t: opt_t,
            m: opt_m,
            v: opt_v,
        });
        let best = has_best.then_some(BestStash {
            params: best_params,
            val_loss: best_val,
            epoch: best_epoch,
        });
        Ok(Self {
            taxonomy_hash,
            epoch,
            seed,
            params,
            opt,
            best,
            epochs_since_improve,
        })
    }

    /// Build a network from this checkpoint, validating the taxonomy hash and
    /// every parameter name/shape.
    pub fn instantiate(
        &self,
        spec: &super::NetworkSpec,
        expected_taxonomy_hash: u64,
    ) -> Result<Network<f32>, NetError> {
        if self.taxonomy_hash != expected_taxonomy_hash {
            return Err(NetError::TaxonomyHashMismatch {
                expected: expected_taxonomy_hash,
                got: self.taxonomy_hash,
            });
        }
        let mut rng = crate::seeded::rng_for(self.seed, &[0]);
        let mut net = Network::init(spec, &mut rng)?;
        net.load_params(&self.params)?;
        Ok(net)
    }
}

fn read_n<const N: usize>(r: &mut impl Read) -> io::Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    Ok(read_n::<1>(r)?[0])
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    Ok(u32::from_le_bytes(read_n(r)?))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    Ok(u64::from_le_bytes(read_n(r)?))
}
