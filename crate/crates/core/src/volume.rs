//! Regular-grid scalar fields.
//!
//! Values are stored row-major with the last index varying fastest. Grid
//! indices map onto the normalized domain `[-1, 1]^d`, and field values are
//! normalized onto `[-1, 1]` for training.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample encoding of a headerless raw file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Float32,
    Uint8,
}

impl Precision {
    pub fn bytes_per_sample(self) -> usize {
        match self {
            Precision::Float32 => 4,
            Precision::Uint8 => 1,
        }
    }

    pub fn bits_per_sample(self) -> u32 {
        self.bytes_per_sample() as u32 * 8
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "float32" | "f32" => Ok(Precision::Float32),
            "uint8" | "u8" => Ok(Precision::Uint8),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// A sampled scalar field in 3 or 4 dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    resolution: Vec<usize>,
    values: Vec<f32>,
    vmin: f32,
    vmax: f32,
}

impl Volume {
    /// Builds a volume, validating the shape and rejecting non-finite values.
    pub fn new(resolution: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        check_resolution(&resolution)?;
        let count = sample_count(&resolution);
        if values.len() != count {
            return Err(Error::format(
                0,
                format!(
                    "expected {count} samples for resolution {resolution:?}, got {}",
                    values.len()
                ),
            ));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {bad}",
                values[bad]
            )));
        }
        let (vmin, vmax) = values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Ok(Volume {
            resolution,
            values,
            vmin,
            vmax,
        })
    }

    /// Samples `f` at every grid vertex, passing normalized coordinates.
    pub fn from_fn(resolution: Vec<usize>, mut f: impl FnMut(&[f64]) -> f32) -> Result<Self> {
        check_resolution(&resolution)?;
        let mut values = Vec::with_capacity(sample_count(&resolution));
        let mut coord = vec![0.0; resolution.len()];
        for idx in GridIter::new(&resolution) {
            for (j, (&i, &s)) in idx.iter().zip(&resolution).enumerate() {
                coord[j] = axis_coord(i, s);
            }
            values.push(f(&coord));
        }
        Volume::new(resolution, values)
    }

    /// Decodes a headerless little-endian buffer.
    pub fn from_bytes(bytes: &[u8], resolution: Vec<usize>, precision: Precision) -> Result<Self> {
        check_resolution(&resolution)?;
        let expected = sample_count(&resolution) * precision.bytes_per_sample();
        if bytes.len() != expected {
            return Err(Error::format(
                bytes.len().min(expected),
                format!(
                    "raw size mismatch: resolution {resolution:?} as {precision:?} needs {expected} bytes, got {}",
                    bytes.len()
                ),
            ));
        }
        let values = match precision {
            Precision::Float32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Precision::Uint8 => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        };
        Volume::new(resolution, values)
    }

    pub fn dims(&self) -> usize {
        self.resolution.len()
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Total sample count `C`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn vmin(&self) -> f32 {
        self.vmin
    }

    pub fn vmax(&self) -> f32 {
        self.vmax
    }

    pub fn value_range(&self) -> ValueRange {
        ValueRange {
            vmin: self.vmin,
            vmax: self.vmax,
        }
    }

    pub fn get(&self, idx: &[usize]) -> Result<f32> {
        Ok(self.values[flat_index(idx, &self.resolution)?])
    }

    /// Little-endian float32 bytes in row-major order.
    pub fn to_f32_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Extracts the 3D slab at time index `t` of a 4D volume.
    pub fn time_slice(&self, t: usize) -> Result<Volume> {
        if self.dims() != 4 {
            return Err(Error::Logic("time_slice needs a 4D volume".into()));
        }
        let steps = self.resolution[3];
        if t >= steps {
            return Err(Error::Logic(format!("time index {t} out of {steps}")));
        }
        let values = self.values.iter().skip(t).step_by(steps).copied().collect();
        Volume::new(self.resolution[..3].to_vec(), values)
    }

    /// Trilinear interpolation at a normalized 3D position; `None` outside `[-1, 1]^3`.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> Option<f64> {
        debug_assert_eq!(self.dims(), 3);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for j in 0..3 {
            if !(-1.0..=1.0).contains(&p[j]) {
                return None;
            }
            let s = self.resolution[j];
            if s == 1 {
                continue;
            }
            let g = (p[j] + 1.0) * 0.5 * (s - 1) as f64;
            let i = (g.floor() as usize).min(s - 2);
            base[j] = i;
            frac[j] = g - i as f64;
        }
        let [s0, s1, s2] = [self.resolution[0], self.resolution[1], self.resolution[2]];
        let at = |i: usize, j: usize, k: usize| {
            self.values[(i.min(s0 - 1) * s1 + j.min(s1 - 1)) * s2 + k.min(s2 - 1)] as f64
        };
        let [i, j, k] = base;
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(at(i, j, k), at(i + 1, j, k), fx);
        let c01 = lerp(at(i, j, k + 1), at(i + 1, j, k + 1), fx);
        let c10 = lerp(at(i, j + 1, k), at(i + 1, j + 1, k), fx);
        let c11 = lerp(at(i, j + 1, k + 1), at(i + 1, j + 1, k + 1), fx);
        Some(lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz))
    }
}

/// Reads a headerless raw file. Resolution and precision are never inferred.
pub fn load_raw(path: impl AsRef<Path>, resolution: &[usize], precision: Precision) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes, resolution.to_vec(), precision)
}

/// Writes the volume as headerless little-endian float32.
pub fn write_raw_f32(volume: &Volume, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(&volume.to_f32_bytes())?;
    out.flush()
}

fn check_resolution(resolution: &[usize]) -> Result<()> {
    if !(3..=4).contains(&resolution.len()) {
        return Err(Error::Config(format!(
            "volumes must have 3 or 4 dimensions, got {}",
            resolution.len()
        )));
    }
    if resolution.iter().any(|&s| s == 0) {
        return Err(Error::Config(format!(
            "resolution entries must be >= 1: {resolution:?}"
        )));
    }
    Ok(())
}

pub fn sample_count(resolution: &[usize]) -> usize {
    resolution.iter().product()
}

/// Row-major flat offset of a grid index.
pub fn flat_index(idx: &[usize], resolution: &[usize]) -> Result<usize> {
    if idx.len() != resolution.len() {
        return Err(Error::Logic(format!(
            "index {idx:?} has wrong arity for resolution {resolution:?}"
        )));
    }
    let mut flat = 0;
    for (&i, &s) in idx.iter().zip(resolution) {
        if i >= s {
            return Err(Error::Logic(format!(
                "index {idx:?} out of bounds for resolution {resolution:?}"
            )));
        }
        flat = flat * s + i;
    }
    Ok(flat)
}

/// Inverse of [`flat_index`]; writes into `idx`.
pub fn unravel_into(mut flat: usize, resolution: &[usize], idx: &mut [usize]) {
    for j in (0..resolution.len()).rev() {
        idx[j] = flat % resolution[j];
        flat /= resolution[j];
    }
}

#[inline]
pub(crate) fn axis_coord(i: usize, s: usize) -> f64 {
    if s == 1 {
        0.0
    } else {
        (2.0 * i as f64 - (s - 1) as f64) / (s - 1) as f64
    }
}

/// Maps a grid index to its point in `[-1, 1]^d`.
pub fn grid_to_coord(idx: &[usize], resolution: &[usize]) -> Result<Vec<f64>> {
    flat_index(idx, resolution)?;
    Ok(idx
        .iter()
        .zip(resolution)
        .map(|(&i, &s)| axis_coord(i, s))
        .collect())
}

/// Grid spacing along one axis in normalized coordinates.
pub fn axis_spacing(s: usize) -> f64 {
    if s <= 1 {
        0.0
    } else {
        2.0 / (s - 1) as f64
    }
}

/// Iterates every grid index in row-major order.
pub struct GridIter<'a> {
    resolution: &'a [usize],
    next: Option<Vec<usize>>,
}

impl<'a> GridIter<'a> {
    pub fn new(resolution: &'a [usize]) -> Self {
        let next = if resolution.iter().all(|&s| s > 0) {
            Some(vec![0; resolution.len()])
        } else {
            None
        };
        GridIter { resolution, next }
    }
}

impl Iterator for GridIter<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        for j in (0..succ.len()).rev() {
            succ[j] += 1;
            if succ[j] < self.resolution[j] {
                self.next = Some(succ);
                break;
            }
            succ[j] = 0;
        }
        Some(current)
    }
}

/// Stored value range used to map between raw and normalized values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub vmin: f32,
    pub vmax: f32,
}

impl ValueRange {
    pub fn span(&self) -> f64 {
        self.vmax as f64 - self.vmin as f64
    }

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        2.0 * (x - self.vmin as f64) / self.span() - 1.0
    }

    #[inline]
    pub fn denormalize(&self, y: f64) -> f64 {
        (y + 1.0) * 0.5 * self.span() + self.vmin as f64
    }
}

/// Normalized field values together with the range that produced them.
#[derive(Clone, Debug)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub range: ValueRange,
}

/// Maps every value onto `[-1, 1]`. Constant volumes are rejected.
pub fn normalize_values(volume: &Volume) -> Result<Normalized> {
    let range = volume.value_range();
    if !(range.vmin < range.vmax) {
        return Err(Error::Degenerate(format!(
            "constant volume (all values {}) has nothing to learn",
            range.vmin
        )));
    }
    let values = volume
        .values
        .iter()
        .map(|&v| range.normalize(v as f64).clamp(-1.0, 1.0))
        .collect();
    Ok(Normalized { values, range })
}

/// Central-difference gradient of `values` at `idx`, in value units per
/// normalized-coordinate unit. Boundaries fall back to one-sided differences
/// and singleton axes yield 0.
pub fn central_diff_at<T: Copy + Into<f64>>(
    values: &[T],
    resolution: &[usize],
    idx: &[usize],
    out: &mut [f64],
) {
    let d = resolution.len();
    let mut stride = 1;
    let mut strides = [0usize; 4];
    for j in (0..d).rev() {
        strides[j] = stride;
        stride *= resolution[j];
    }
    let flat: usize = idx.iter().zip(&strides[..d]).map(|(&i, &s)| i * s).sum();
    for j in 0..d {
        let s = resolution[j];
        if s < 2 {
            out[j] = 0.0;
            continue;
        }
        let h = axis_spacing(s);
        let i = idx[j];
        let at = |f: usize| -> f64 { values[f].into() };
        out[j] = if i == 0 {
            (at(flat + strides[j]) - at(flat)) / h
        } else if i == s - 1 {
            (at(flat) - at(flat - strides[j])) / h
        } else {
            (at(flat + strides[j]) - at(flat - strides[j])) / (2.0 * h)
        };
    }
}

/// Finite-difference gradient of the raw field at one grid index.
pub fn central_diff_gradient(volume: &Volume, idx: &[usize]) -> Result<Vec<f64>> {
    flat_index(idx, &volume.resolution)?;
    let mut out = vec![0.0; volume.dims()];
    central_diff_at(&volume.values, &volume.resolution, idx, &mut out);
    Ok(out)
}

/// Finite-difference gradients at every grid vertex, `C x d` row-major.
pub fn gradient_field<T: Copy + Into<f64> + Sync>(values: &[T], resolution: &[usize]) -> Vec<f64> {
    use rayon::prelude::*;
    let d = resolution.len();
    let mut out = vec![0.0; values.len() * d];
    out.par_chunks_mut(d).enumerate().for_each(|(flat, g)| {
        let mut idx = [0usize; 4];
        unravel_into(flat, resolution, &mut idx[..d]);
        central_diff_at(values, resolution, &idx[..d], g);
    });
    out
}

/// A minibatch of normalized training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub dims: usize,
    /// `N x d` coordinates, row-major.
    pub coords: Vec<f64>,
    pub targets: Vec<f64>,
    /// `N x d` gradient targets in normalized units.
    pub grad_targets: Option<Vec<f64>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn coord(&self, n: usize) -> &[f64] {
        &self.coords[n * self.dims..(n + 1) * self.dims]
    }
}

/// Draws `n` grid samples uniformly with replacement.
pub fn sample_batch(volume: &Volume, n: usize, rng_seed: u64, with_gradients: bool) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::Logic("sample_batch needs n >= 1".into()));
    }
    let normalized = normalize_values(volume)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let d = volume.dims();
    let mut batch = SampleBatch {
        dims: d,
        coords: Vec::with_capacity(n * d),
        targets: Vec::with_capacity(n),
        grad_targets: with_gradients.then(|| Vec::with_capacity(n * d)),
    };
    let mut idx = vec![0; d];
    let mut g = vec![0.0; d];
    for _ in 0..n {
        let flat = rng.gen_range(0..volume.len());
        unravel_into(flat, &volume.resolution, &mut idx);
        batch
            .coords
            .extend(idx.iter().zip(&volume.resolution).map(|(&i, &s)| axis_coord(i, s)));
        batch.targets.push(normalized.values[flat]);
        if let Some(grads) = batch.grad_targets.as_mut() {
            central_diff_at(&normalized.values, &volume.resolution, &idx, &mut g);
            grads.extend_from_slice(&g);
        }
    }
    Ok(batch)
}
