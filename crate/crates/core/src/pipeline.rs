//! End-to-end encode: size the network, train, quantize, serialize.

use std::time::Instant;

use serde::Serialize;

use crate::codec::{compression_ratio, reconstruct_volume, serialize};
use crate::error::{Error, Result};
use crate::field_net::{derive_layer_width, NetworkArch, DEFAULT_BLOCKS, DEFAULT_OMEGA0};
use crate::metrics::{psnr, Psnr};
use crate::quantizer::{quantize_model, QuantizedModel, DEFAULT_BITS};
use crate::trainer::{train_on, EpochRecord, TrainConfig, TrainLog, TrainingSet};
use crate::volume::{Precision, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    /// Target ratio `R`; the pre-quantization weight budget is `C / R`.
    Ratio(f64),
    Weights(u64),
}

impl Budget {
    pub fn weights(self, samples: usize) -> Result<u64> {
        match self {
            Budget::Ratio(r) if r > 0.0 && r.is_finite() => Ok((samples as f64 / r).floor() as u64),
            Budget::Ratio(r) => Err(Error::Config(format!("ratio must be > 0, got {r}"))),
            Budget::Weights(m) => Ok(m),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncodeOptions {
    pub budget: Budget,
    pub n_blocks: usize,
    pub bits: u8,
    pub omega0: f32,
    pub train: TrainConfig,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            budget: Budget::Ratio(50.0),
            n_blocks: DEFAULT_BLOCKS,
            bits: DEFAULT_BITS,
            omega0: DEFAULT_OMEGA0,
            train: TrainConfig::default(),
        }
    }
}

/// Summary printed by the encoder.
#[derive(Clone, Debug, Serialize)]
pub struct EncodeReport {
    pub ratio: f64,
    pub psnr: Psnr,
    pub seconds: f64,
    pub bytes: usize,
    pub weight_budget: u64,
    pub params: usize,
    pub k: usize,
    pub n_blocks: usize,
    pub bits: u8,
    pub final_loss: f64,
}

pub struct Encoded {
    pub bytes: Vec<u8>,
    pub model: QuantizedModel,
    pub log: TrainLog,
    pub report: EncodeReport,
}

pub fn architecture_for(volume: &Volume, opts: &EncodeOptions) -> Result<(NetworkArch, u64)> {
    let budget = opts.budget.weights(volume.len())?;
    let k = derive_layer_width(budget, volume.dims(), opts.n_blocks)?;
    let arch = NetworkArch::new(volume.dims(), k, opts.n_blocks)?.with_omega0(opts.omega0);
    Ok((arch, budget))
}

pub fn encode(
    volume: &Volume,
    precision: Precision,
    opts: &EncodeOptions,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Encoded> {
    let started = Instant::now();
    let (arch, budget) = architecture_for(volume, opts)?;
    let set = TrainingSet::from_volume(volume, opts.train.lambda > 0.0)?;
    let (params, log) = train_on(&set, arch, &opts.train, on_epoch)?;
    let range = volume.value_range();
    let model = quantize_model(&params, opts.bits, range, volume.resolution())?;
    let bytes = serialize(&model);
    let recon = reconstruct_volume(&model, volume.resolution())?;
    let report = EncodeReport {
        ratio: compression_ratio(volume.len(), precision, bytes.len()),
        psnr: psnr(volume, &recon)?,
        seconds: started.elapsed().as_secs_f64(),
        bytes: bytes.len(),
        weight_budget: budget,
        params: arch.param_count(),
        k: arch.k,
        n_blocks: arch.n_blocks,
        bits: opts.bits,
        final_loss: log.records.last().map(|r| r.loss).unwrap_or(f64::NAN),
    };
    Ok(Encoded {
        bytes,
        model,
        log,
        report,
    })
}
