//! Per-layer k-means weight quantization.
//!
//! Each intermediary `k x k` matrix is clustered independently into `2^b`
//! centers and stored as b-bit codes. The first and last layers and every
//! bias stay at full precision.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field_net::{NetworkArch, Parameters};
use crate::volume::ValueRange;

pub const DEFAULT_BITS: u8 = 9;
pub const MAX_BITS: u8 = 16;
pub const DEFAULT_LLOYD_ITERS: usize = 50;
/// Largest `values * clusters` for which the exact clustering is computed.
pub const EXACT_LIMIT: usize = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// Ascending.
    pub centers: Vec<f64>,
    pub assignments: Vec<u32>,
    /// Objective (sum of squared distances) after the initial assignment and
    /// after every Lloyd iteration.
    pub objective: Vec<f64>,
}

/// Lloyd's algorithm in one dimension.
///
/// Centers start at the `(j + 0.5) / k` quantiles. Empty clusters are moved to
/// the value farthest from its current center. Stops after `iters` updates or
/// once assignments no longer change.
///
/// A second run starts from `k` evenly spaced levels over the value range, so
/// the result is never worse than uniform quantization. When `n * k` is at
/// most [`EXACT_LIMIT`] the optimal clustering is also computed by dynamic
/// programming. The lowest final objective wins.
pub fn kmeans_1d(values: &[f64], k: usize, iters: usize) -> KMeans {
    assert!(!values.is_empty() && k >= 1, "kmeans_1d needs values and k >= 1");
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let quantile: Vec<f64> = (0..k)
        .map(|j| {
            let q = (j as f64 + 0.5) / k as f64;
            sorted[((q * n as f64) as usize).min(n - 1)]
        })
        .collect();
    let (lo, hi) = (sorted[0], sorted[n - 1]);
    let uniform: Vec<f64> = (0..k)
        .map(|j| match k {
            1 => 0.5 * (lo + hi),
            _ => lo + (hi - lo) * j as f64 / (k - 1) as f64,
        })
        .collect();

    let a = lloyd(&sorted, quantile, iters);
    let b = lloyd(&sorted, uniform, iters);
    let (centers, sorted_assign, mut objective) = if b.2.last() < a.2.last() { b } else { a };
    let (centers, sorted_assign) = match (n * k <= EXACT_LIMIT).then(|| exact_sorted(&sorted, k)) {
        Some((c, asg)) => {
            let obj = objective_of(&sorted, &c, &asg);
            if obj < *objective.last().unwrap() {
                objective.push(obj);
                (c, asg)
            } else {
                (centers, sorted_assign)
            }
        }
        None => (centers, sorted_assign),
    };

    let mut assignments = vec![0u32; n];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = sorted_assign[pos];
    }
    KMeans {
        centers,
        assignments,
        objective,
    }
}

fn lloyd(sorted: &[f64], mut centers: Vec<f64>, iters: usize) -> (Vec<f64>, Vec<u32>, Vec<f64>) {
    let n = sorted.len();
    // Assignments are kept in sorted-value order.
    let mut assign = vec![0u32; n];
    assign_sorted(sorted, &centers, &mut assign);
    let mut objective = vec![objective_of(sorted, &centers, &assign)];
    let mut next = assign.clone();
    for _ in 0..iters {
        update_centers(sorted, &assign, &mut centers);
        assign_sorted(sorted, &centers, &mut next);
        objective.push(objective_of(sorted, &centers, &next));
        if next == assign {
            break;
        }
        std::mem::swap(&mut assign, &mut next);
    }
    (centers, assign, objective)
}

/// Optimal contiguous partition of ascending `sorted` into at most `k`
/// groups. Split points are monotone in the prefix length, so each layer of
/// the table is filled by divide and conquer.
fn exact_sorted(sorted: &[f64], k: usize) -> (Vec<f64>, Vec<u32>) {
    let n = sorted.len();
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, v) in sorted.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    let cost = |i: usize, j: usize| {
        if j <= i {
            return 0.0;
        }
        let s = s1[j] - s1[i];
        (s2[j] - s2[i] - s * s / (j - i) as f64).max(0.0)
    };
    let groups = k.min(n);
    // prev[j]: best cost of the first j values in m groups.
    let mut prev: Vec<f64> = (0..=n).map(|j| cost(0, j)).collect();
    let mut splits = vec![vec![0u32; n + 1]; groups];
    for m in 1..groups {
        let mut cur = vec![0.0; n + 1];
        let mut arg = vec![0u32; n + 1];
        fill_layer(&prev, &cost, 0, n, 0, n, &mut cur, &mut arg);
        prev = cur;
        splits[m] = arg;
    }
    let mut bounds = vec![n; groups + 1];
    bounds[0] = 0;
    let mut j = n;
    for m in (1..groups).rev() {
        j = splits[m][j] as usize;
        bounds[m] = j;
    }
    let mut centers = Vec::with_capacity(k);
    let mut assign = vec![0u32; n];
    for g in 0..groups {
        let (lo, hi) = (bounds[g], bounds[g + 1]);
        let c = if hi > lo {
            (s1[hi] - s1[lo]) / (hi - lo) as f64
        } else {
            centers.last().copied().unwrap_or(sorted[0])
        };
        centers.push(c);
        for a in &mut assign[lo..hi] {
            *a = g as u32;
        }
    }
    // Surplus clusters duplicate the largest center.
    centers.resize(k, *centers.last().unwrap());
    (centers, assign)
}

#[allow(clippy::too_many_arguments)]
fn fill_layer(
    prev: &[f64],
    cost: &impl Fn(usize, usize) -> f64,
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
    cur: &mut [f64],
    arg: &mut [u32],
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let (mut best, mut best_i) = (f64::INFINITY, opt_lo);
    for i in opt_lo..=opt_hi.min(mid) {
        let c = prev[i] + cost(i, mid);
        if c < best {
            best = c;
            best_i = i;
        }
    }
    cur[mid] = best;
    arg[mid] = best_i as u32;
    if mid > lo {
        fill_layer(prev, cost, lo, mid - 1, opt_lo, best_i, cur, arg);
    }
    fill_layer(prev, cost, mid + 1, hi, best_i, opt_hi, cur, arg);
}

/// Nearest-center assignment of ascending `sorted` to ascending `centers`;
/// ties go to the lower center.
fn assign_sorted(sorted: &[f64], centers: &[f64], out: &mut [u32]) {
    let mut j = 0;
    for (v, a) in sorted.iter().zip(out.iter_mut()) {
        while j + 1 < centers.len() && centers[j + 1] - v < v - centers[j] {
            j += 1;
        }
        *a = j as u32;
    }
}

fn objective_of(sorted: &[f64], centers: &[f64], assign: &[u32]) -> f64 {
    sorted
        .iter()
        .zip(assign)
        .map(|(v, &a)| {
            let e = v - centers[a as usize];
            e * e
        })
        .sum()
}

fn update_centers(sorted: &[f64], assign: &[u32], centers: &mut [f64]) {
    let k = centers.len();
    let mut sum = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (v, &a) in sorted.iter().zip(assign) {
        sum[a as usize] += v;
        count[a as usize] += 1;
    }
    let mut empty = Vec::new();
    for j in 0..k {
        if count[j] > 0 {
            centers[j] = sum[j] / count[j] as f64;
        } else {
            empty.push(j);
        }
    }
    if !empty.is_empty() {
        // Farthest values first; each value reseeds at most one cluster.
        let mut far: Vec<(f64, usize)> = sorted
            .iter()
            .zip(assign)
            .enumerate()
            .map(|(i, (v, &a))| ((v - centers[a as usize]).abs(), i))
            .filter(|&(dist, _)| dist > 0.0)
            .collect();
        far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (j, (_, i)) in empty.into_iter().zip(far) {
            centers[j] = sorted[i];
        }
    }
    centers.sort_by(f64::total_cmp);
}

/// One intermediary matrix as `2^bits` centers plus a code per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLayer {
    pub rows: usize,
    pub cols: usize,
    /// `2^bits` ascending centers.
    pub centers: Vec<f32>,
    /// Row-major entry codes, each `< 2^bits`.
    pub codes: Vec<u16>,
}

impl QuantizedLayer {
    pub fn dequantize(&self) -> Result<Vec<f32>> {
        self.codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                self.centers.get(c as usize).copied().ok_or_else(|| {
                    Error::format(
                        0,
                        format!(
                            "code {c} at entry {i} exceeds {} centers",
                            self.centers.len()
                        ),
                    )
                })
            })
            .collect()
    }
}

pub fn check_bits(bits: u8) -> Result<()> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::Config(format!("bits must be in 1..=16, got {bits}")));
    }
    Ok(())
}

pub fn quantize_layer(matrix: &[f32], rows: usize, cols: usize, bits: u8) -> Result<QuantizedLayer> {
    check_bits(bits)?;
    if matrix.len() != rows * cols || matrix.is_empty() {
        return Err(Error::Logic(format!(
            "matrix has {} entries, shape {rows}x{cols}",
            matrix.len()
        )));
    }
    let values: Vec<f64> = matrix.iter().map(|&v| v as f64).collect();
    let km = kmeans_1d(&values, 1usize << bits, DEFAULT_LLOYD_ITERS);
    Ok(QuantizedLayer {
        rows,
        cols,
        centers: km.centers.iter().map(|&c| c as f32).collect(),
        codes: km.assignments.iter().map(|&a| a as u16).collect(),
    })
}

/// Network with quantized intermediary matrices plus the metadata needed to
/// decode it.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub arch: NetworkArch,
    pub bits: u8,
    /// Resolution of the source grid.
    pub resolution: Vec<usize>,
    pub range: ValueRange,
    pub w_first: Vec<f32>,
    pub b_first: Vec<f32>,
    /// `(b1, b2)` per block.
    pub block_biases: Vec<(Vec<f32>, Vec<f32>)>,
    pub w_last: Vec<f32>,
    pub b_last: f32,
    /// `M1, M2` of block 0, then block 1, ...
    pub layers: Vec<QuantizedLayer>,
}

impl QuantizedModel {
    /// Count of full-precision scalars.
    pub fn unquantized_count(&self) -> usize {
        unquantized_count(&self.arch)
    }
}

pub fn unquantized_count(arch: &NetworkArch) -> usize {
    let (k, d) = (arch.k, arch.d);
    k * d + k + 2 * k * arch.n_blocks + k + 1
}

pub fn quantize_model(
    params: &Parameters,
    bits: u8,
    range: ValueRange,
    resolution: &[usize],
) -> Result<QuantizedModel> {
    check_bits(bits)?;
    let arch = *params.arch();
    let k = arch.k;
    let flat = params.as_flat();
    let layers = (0..2 * arch.n_blocks)
        .into_par_iter()
        .map(|l| {
            let r = Parameters::block_matrix_range(&arch, l / 2, l % 2);
            quantize_layer(&flat[r], k, k, bits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        arch,
        bits,
        resolution: resolution.to_vec(),
        range,
        w_first: params.w_first().to_vec(),
        b_first: params.b_first().to_vec(),
        block_biases: (0..arch.n_blocks)
            .map(|i| {
                let b = params.block(i);
                (b.b1.to_vec(), b.b2.to_vec())
            })
            .collect(),
        w_last: params.w_last().to_vec(),
        b_last: params.b_last(),
        layers,
    })
}

/// Rebuilds full parameters, replacing every quantized entry by its center.
pub fn dequantize_model(qm: &QuantizedModel) -> Result<Parameters> {
    let arch = qm.arch;
    arch.validate()?;
    let k = arch.k;
    if qm.layers.len() != 2 * arch.n_blocks || qm.block_biases.len() != arch.n_blocks {
        return Err(Error::format(
            0,
            format!(
                "model has {} quantized layers for {} blocks",
                qm.layers.len(),
                arch.n_blocks
            ),
        ));
    }
    let mut data = Vec::with_capacity(arch.param_count());
    data.extend_from_slice(&qm.w_first);
    data.extend_from_slice(&qm.b_first);
    for (i, (b1, b2)) in qm.block_biases.iter().enumerate() {
        for (layer, bias) in [(&qm.layers[2 * i], b1), (&qm.layers[2 * i + 1], b2)] {
            if layer.centers.len() != 1usize << qm.bits || layer.codes.len() != k * k {
                return Err(Error::format(0, format!("layer shape mismatch in block {i}")));
            }
            data.extend(layer.dequantize()?);
            data.extend_from_slice(bias);
        }
    }
    data.extend_from_slice(&qm.w_last);
    data.push(qm.b_last);
    Parameters::from_flat(arch, data).map_err(|e| Error::format(0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_net::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr_free::normal;

    // Box-Muller so the test needs no extra crate.
    mod rand_distr_free {
        use rand::Rng;
        pub fn normal(rng: &mut impl Rng) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }

    fn range() -> ValueRange {
        ValueRange { vmin: 0.0, vmax: 1.0 }
    }

    #[test]
    fn two_clusters_exact() {
        let km = kmeans_1d(&[1.0, 1.0, 2.0, 2.0], 2, 50);
        assert_eq!(km.centers, vec![1.0, 2.0]);
        assert_eq!(km.assignments, vec![0, 0, 1, 1]);
        assert_eq!(*km.objective.last().unwrap(), 0.0);
    }

    #[test]
    fn surplus_centers_give_zero_error() {
        let vals = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -3.5, 2.25];
        for k in [4, 5, 16] {
            let km = kmeans_1d(&vals, k, 50);
            assert_eq!(*km.objective.last().unwrap(), 0.0, "k={k}");
            assert!(km.centers.windows(2).all(|w| w[0] <= w[1]));
        }
        let same = kmeans_1d(&[0.5; 7], 3, 50);
        assert!(same.assignments.iter().all(|&a| same.centers[a as usize] == 0.5));
    }

    #[test]
    fn one_bit_layer_has_two_values() {
        let p = init_params(NetworkArch::new(3, 8, 1).unwrap(), 2).unwrap();
        let r = Parameters::block_matrix_range(p.arch(), 0, 0);
        let q = quantize_layer(&p.as_flat()[r], 8, 8, 1).unwrap();
        let deq = q.dequantize().unwrap();
        let mut distinct = deq.clone();
        distinct.sort_by(f32::total_cmp);
        distinct.dedup();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn beats_uniform_quantizer_on_normal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m: Vec<f32> = (0..64 * 64).map(|_| normal(&mut rng) as f32 * 0.1).collect();
        for bits in [3u8, 6, 9] {
            let q = quantize_layer(&m, 64, 64, bits).unwrap();
            let deq = q.dequantize().unwrap();
            let kmse = crate::metrics::mse(&m, &deq);
            let (lo, hi) = m.iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            let levels = (1u32 << bits) as f64;
            let step = (hi - lo) as f64 / (levels - 1.0);
            let uniform: Vec<f64> = m
                .iter()
                .map(|&v| lo as f64 + ((v - lo) as f64 / step).round() * step)
                .collect();
            let m64: Vec<f64> = m.iter().map(|&v| v as f64).collect();
            let umse = crate::metrics::mse(&m64, &uniform);
            assert!(kmse < umse, "bits={bits}: kmeans {kmse} vs uniform {umse}");
        }
    }

    #[test]
    fn model_quantization_structure() {
        let arch = NetworkArch::new(3, 6, 8).unwrap();
        let p = init_params(arch, 4).unwrap();
        let qm = quantize_model(&p, 9, range(), &[8, 8, 8]).unwrap();
        assert_eq!(qm.layers.len(), 16);
        let codes: usize = qm.layers.iter().map(|l| l.codes.len()).sum();
        assert_eq!(codes, 2 * 8 * 36);
        assert!(qm.layers.iter().all(|l| l.centers.windows(2).all(|w| w[0] <= w[1])));

        let back = dequantize_model(&qm).unwrap();
        assert_eq!(back.w_first(), p.w_first());
        assert_eq!(back.b_first(), p.b_first());
        assert_eq!(back.w_last(), p.w_last());
        assert_eq!(back.b_last().to_bits(), p.b_last().to_bits());
        for i in 0..8 {
            assert_eq!(back.block(i).b1, p.block(i).b1);
            assert_eq!(back.block(i).b2, p.block(i).b2);
        }
        // 36 entries < 512 centers: exact.
        assert_eq!(back, p);
    }

    #[test]
    fn idempotent_after_one_cycle() {
        let arch = NetworkArch::new(3, 24, 2).unwrap();
        let p = init_params(arch, 5).unwrap();
        let once = dequantize_model(&quantize_model(&p, 4, range(), &[4, 4, 4]).unwrap()).unwrap();
        let twice = dequantize_model(&quantize_model(&once, 4, range(), &[4, 4, 4]).unwrap()).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.as_flat().len(), p.as_flat().len());
    }

    #[test]
    fn corrupt_code_is_format_error() {
        let p = init_params(NetworkArch::new(3, 4, 1).unwrap(), 5).unwrap();
        let mut qm = quantize_model(&p, 2, range(), &[4, 4, 4]).unwrap();
        qm.layers[1].codes[3] = 4;
        assert!(matches!(dequantize_model(&qm), Err(Error::Format { .. })));
        assert!(quantize_model(&p, 0, range(), &[4, 4, 4]).is_err());
        assert!(quantize_model(&p, 17, range(), &[4, 4, 4]).is_err());
    }

    #[test]
    fn quantization_is_deterministic() {
        let p = init_params(NetworkArch::new(3, 20, 2).unwrap(), 6).unwrap();
        let a = quantize_model(&p, 5, range(), &[4, 4, 4]).unwrap();
        let b = quantize_model(&p, 5, range(), &[4, 4, 4]).unwrap();
        assert_eq!(a, b);
    }
}
