//! Versioned binary checkpoints of a [`Trainer`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "BNNCKPT\0"
//! version  u32      1
//! hlen     u32      length of the JSON header
//! header   hlen bytes of JSON (variant, dims, priors, train config, counters)
//! payload  f64 LE arrays, in order:
//!            per layer: weight mu, weight rho, bias mu, bias rho
//!            per hidden layer (threshold variant only): thresholds
//!            adam first moments, adam second moments
//! ```
//!
//! Floats are stored bit-exactly, so a reloaded model reproduces the original
//! forward outputs exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::{TrainConfig, Trainer};
use crate::model::{BayesLinear, BayesMlp, ThresholdActivation, Variant};
use crate::vicore::{Adam, PriorSpec, Trainable, VariationalParam};

pub const MAGIC: &[u8; 8] = b"BNNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint payload has {found} values, header implies {expected}")]
    Payload { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    variant: Variant,
    dims: Vec<usize>,
    priors: Vec<PriorSpec>,
    train: TrainConfig,
    adam_t: u64,
    step: u64,
    epoch: u64,
}

impl Header {
    fn payload_len(&self) -> usize {
        let variational: usize = self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let thresholds: usize = match self.variant {
            Variant::Generic => 0,
            Variant::LearnableActivation => self.dims[1..self.dims.len() - 1].iter().sum(),
        };
        let scalars = 2 * variational + thresholds;
        scalars + 2 * scalars
    }
}

pub fn write_checkpoint<W: Write>(trainer: &Trainer, mut w: W) -> Result<(), CheckpointError> {
    let model = &trainer.model;
    let header = Header {
        variant: model.variant,
        dims: model.dims(),
        priors: model.layers.iter().map(|l| l.prior).collect(),
        train: trainer.config,
        adam_t: trainer.adam.t,
        step: trainer.step,
        epoch: trainer.epoch,
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;

    let mut payload: Vec<f64> = Vec::with_capacity(header.payload_len());
    for l in &model.layers {
        payload.extend(l.weights.iter().map(|p| p.mu));
        payload.extend(l.weights.iter().map(|p| p.rho));
        payload.extend(l.biases.iter().map(|p| p.mu));
        payload.extend(l.biases.iter().map(|p| p.rho));
    }
    for t in &model.thresholds {
        payload.extend_from_slice(&t.thresholds);
    }
    payload.extend_from_slice(&trainer.adam.m);
    payload.extend_from_slice(&trainer.adam.v);
    let mut bytes = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Trainer, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    r.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.dims.len() < 2 || header.priors.len() != header.dims.len() - 1 {
        return Err(CheckpointError::Header("dims and priors disagree".into()));
    }

    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let expected = header.payload_len();
    if rest.len() != expected * 8 {
        return Err(CheckpointError::Payload {
            expected,
            found: rest.len() / 8,
        });
    }
    let mut values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };

    let mut layers = Vec::with_capacity(header.dims.len() - 1);
    for (w, prior) in header.dims.windows(2).zip(&header.priors) {
        let (n_in, n_out) = (w[0], w[1]);
        let pair = |mu: Vec<f64>, rho: Vec<f64>| -> Vec<VariationalParam> {
            mu.into_iter()
                .zip(rho)
                .map(|(m, r)| VariationalParam::new(m, r))
                .collect()
        };
        let wm = take(n_in * n_out);
        let wr = take(n_in * n_out);
        let bm = take(n_out);
        let br = take(n_out);
        layers.push(BayesLinear {
            in_dim: n_in,
            out_dim: n_out,
            weights: pair(wm, wr),
            biases: pair(bm, br),
            prior: *prior,
        });
    }
    let thresholds = match header.variant {
        Variant::Generic => Vec::new(),
        Variant::LearnableActivation => header.dims[1..header.dims.len() - 1]
            .iter()
            .map(|&n| ThresholdActivation {
                thresholds: take(n),
                grad: vec![0.0; n],
            })
            .collect(),
    };
    let model = BayesMlp {
        variant: header.variant,
        layers,
        thresholds,
    };
    let n = model.num_scalars();
    let adam = Adam {
        config: header.train.adam,
        m: take(n),
        v: take(n),
        t: header.adam_t,
    };
    Ok(Trainer {
        model,
        adam,
        config: header.train,
        step: header.step,
        epoch: header.epoch,
    })
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(trainer, std::io::BufWriter::new(file))
}

pub fn load(path: &Path) -> Result<Trainer, CheckpointError> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
