//! Reconstruction quality: PSNR of the field and of its gradient.

use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::codec::reconstruct_from_params;
use crate::error::{Error, Result};
use crate::field_net::{Evaluator, Parameters};
use crate::quantizer::{dequantize_model, QuantizedModel};
use crate::volume::{axis_coord, gradient_field, unravel_into, ValueRange, Volume};

/// Peak signal-to-noise ratio in dB. A perfect match is reported as
/// [`Psnr::Infinite`] rather than an overflowed float.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn as_f64(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.3} dB"),
            Psnr::Infinite => f.write_str("inf dB"),
        }
    }
}

// JSON has no infinity, so non-finite values become strings.
impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Psnr::Infinite => s.serialize_str("inf"),
            Psnr::Finite(v) if v.is_finite() => s.serialize_f64(v),
            Psnr::Finite(v) if v < 0.0 => s.serialize_str("-inf"),
            Psnr::Finite(_) => s.serialize_str("nan"),
        }
    }
}

/// `10 log10(range^2 / mse)`.
pub fn psnr_from_mse(range: f64, mse: f64) -> Psnr {
    if mse == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(10.0 * (range * range / mse).log10())
    }
}

pub fn mse<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let e = x.into() - y.into();
            e * e
        })
        .sum();
    sum / a.len() as f64
}

/// PSNR of `candidate` against `reference`, using the reference's value range.
pub fn psnr(reference: &Volume, candidate: &Volume) -> Result<Psnr> {
    if reference.resolution() != candidate.resolution() {
        return Err(Error::Logic(format!(
            "resolution mismatch: {:?} vs {:?}",
            reference.resolution(),
            candidate.resolution()
        )));
    }
    let range = reference.vmax() as f64 - reference.vmin() as f64;
    Ok(psnr_from_mse(range, mse(reference.values(), candidate.values())))
}

/// PSNR over all `N x d` gradient components; the range is the joint
/// min/max of the reference components.
pub fn gradient_psnr(reference: &[f64], candidate: &[f64]) -> Result<Psnr> {
    if reference.len() != candidate.len() || reference.is_empty() {
        return Err(Error::Logic(format!(
            "gradient shape mismatch: {} vs {} components",
            reference.len(),
            candidate.len()
        )));
    }
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    Ok(psnr_from_mse(hi - lo, mse(reference, candidate)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr: Psnr,
    pub fd_grad_psnr: Psnr,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub net_grad_psnr: Option<Psnr>,
    pub mse: f64,
    pub data_range: f64,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Analytic network gradients at every grid vertex, in raw value units per
/// normalized coordinate.
pub fn network_gradient_field(params: &Parameters, range: ValueRange, resolution: &[usize]) -> Vec<f64> {
    let ev = Evaluator::new(params);
    let d = resolution.len();
    let scale = 0.5 * range.span();
    let count: usize = resolution.iter().product();
    let mut out = vec![0.0; count * d];
    out.par_chunks_mut(d).enumerate().for_each(|(flat, g)| {
        let mut idx = [0usize; 4];
        unravel_into(flat, resolution, &mut idx[..d]);
        let x: Vec<f64> = idx[..d]
            .iter()
            .zip(resolution)
            .map(|(&i, &s)| axis_coord(i, s))
            .collect();
        for (o, v) in g.iter_mut().zip(ev.input_gradient(&x)) {
            *o = v * scale;
        }
    });
    out
}

/// Scores an unquantized network against a reference volume.
pub fn evaluate_params(
    params: &Parameters,
    range: ValueRange,
    reference: &Volume,
    with_net_grad: bool,
) -> Result<MetricReport> {
    if params.arch().d != reference.dims() {
        return Err(Error::Logic(format!(
            "model is {}D, reference is {}D",
            params.arch().d,
            reference.dims()
        )));
    }
    let recon = reconstruct_from_params(params, range, reference.resolution())?;
    let res = reference.resolution();
    let reference_grads = gradient_field(reference.values(), res);
    let fd_grads = gradient_field(recon.values(), res);
    let net_grad_psnr = if with_net_grad {
        let net = network_gradient_field(params, range, res);
        Some(gradient_psnr(&reference_grads, &net)?)
    } else {
        None
    };
    Ok(MetricReport {
        psnr: psnr(reference, &recon)?,
        fd_grad_psnr: gradient_psnr(&reference_grads, &fd_grads)?,
        net_grad_psnr,
        mse: mse(reference.values(), recon.values()),
        data_range: reference.vmax() as f64 - reference.vmin() as f64,
    })
}

/// Reconstructs the quantized model at the reference resolution and scores it.
pub fn evaluate_model(qm: &QuantizedModel, reference: &Volume, with_net_grad: bool) -> Result<MetricReport> {
    let params = dequantize_model(qm)?;
    evaluate_params(&params, qm.range, reference, with_net_grad)
}
