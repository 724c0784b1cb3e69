//! Sinusoidal residual MLP mapping a point in `[-1, 1]^d` to a normalized
//! field value.
//!
//! Topology: a sine input layer with frequency scale `omega0`, `n_blocks`
//! residual blocks `a' = (a + sin(M2 sin(M1 a + b1) + b2)) / 2`, and a linear
//! scalar head. Every block output stays inside `[-1, 1]`.
//!
//! Parameters are stored as 32-bit floats in one flat buffer; evaluation runs
//! in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCKS: usize = 8;
pub const DEFAULT_OMEGA0: f32 = 30.0;
pub const MAX_WIDTH: usize = 1 << 16;
pub const MAX_BLOCKS: usize = u16::MAX as usize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkArch {
    /// Input dimension.
    pub d: usize,
    /// Hidden width.
    pub k: usize,
    pub n_blocks: usize,
    /// Frequency scale of the input layer.
    pub omega0: f32,
}

impl NetworkArch {
    pub fn new(d: usize, k: usize, n_blocks: usize) -> Result<Self> {
        let arch = NetworkArch {
            d,
            k,
            n_blocks,
            omega0: DEFAULT_OMEGA0,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn with_omega0(mut self, omega0: f32) -> Self {
        self.omega0 = omega0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=4).contains(&self.d) {
            return Err(Error::Config(format!("input dimension must be 3 or 4, got {}", self.d)));
        }
        if self.k == 0 || self.n_blocks == 0 {
            return Err(Error::Config(format!(
                "width and block count must be >= 1 (k={}, n_blocks={})",
                self.k, self.n_blocks
            )));
        }
        if self.k > MAX_WIDTH || self.n_blocks > MAX_BLOCKS {
            return Err(Error::Config(format!(
                "width must be <= {MAX_WIDTH} and block count <= {MAX_BLOCKS} (k={}, n_blocks={})",
                self.k, self.n_blocks
            )));
        }
        if !self.omega0.is_finite() {
            return Err(Error::Config("omega0 must be finite".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        param_count_of(self.d, self.k, self.n_blocks)
    }

    pub(crate) fn block_len(&self) -> usize {
        2 * self.k * self.k + 2 * self.k
    }

    pub(crate) fn blocks_start(&self) -> usize {
        self.k * self.d + self.k
    }

    pub(crate) fn last_start(&self) -> usize {
        self.blocks_start() + self.n_blocks * self.block_len()
    }
}

fn param_count_of(d: usize, k: usize, n_blocks: usize) -> usize {
    k * d + k + n_blocks * (2 * k * k + 2 * k) + k + 1
}

/// Total scalar parameter count `kd + k + n(2k^2 + 2k) + k + 1`.
pub fn param_count(arch: &NetworkArch) -> usize {
    arch.param_count()
}

/// Largest hidden width whose parameter count does not exceed `budget`.
pub fn derive_layer_width(budget: u64, d: usize, n_blocks: usize) -> Result<usize> {
    let count = |k: usize| param_count_of(d, k, n_blocks) as u64;
    let minimum = count(1);
    if budget < minimum {
        return Err(Error::Budget { budget, minimum });
    }
    // Positive root of 2n k^2 + (d + 2 + 2n) k + 1 = budget, then fix up rounding.
    let a = 2.0 * n_blocks as f64;
    let b = (d + 2 + 2 * n_blocks) as f64;
    let c = 1.0 - budget as f64;
    let mut k = ((-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)).floor().max(1.0) as usize;
    while k > 1 && count(k) > budget {
        k -= 1;
    }
    while count(k + 1) <= budget {
        k += 1;
    }
    Ok(k)
}

/// Borrowed view of one residual block's tensors.
#[derive(Clone, Copy, Debug)]
pub struct BlockView<'a, T> {
    pub m1: &'a [T],
    pub b1: &'a [T],
    pub m2: &'a [T],
    pub b2: &'a [T],
}

/// Flat parameter buffer with named tensor views.
///
/// Layout: `W_first (k x d)`, `b_first (k)`, then per block
/// `M1 (k x k)`, `b1 (k)`, `M2 (k x k)`, `b2 (k)`, then `W_last (1 x k)`,
/// `b_last (1)`. Matrices are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    arch: NetworkArch,
    data: Vec<f32>,
}

impl Parameters {
    pub fn zeros(arch: NetworkArch) -> Self {
        Parameters {
            arch,
            data: vec![0.0; arch.param_count()],
        }
    }

    pub fn from_flat(arch: NetworkArch, data: Vec<f32>) -> Result<Self> {
        arch.validate()?;
        if data.len() != arch.param_count() {
            return Err(Error::Logic(format!(
                "parameter buffer has {} scalars, architecture needs {}",
                data.len(),
                arch.param_count()
            )));
        }
        Ok(Parameters { arch, data })
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn w_first(&self) -> &[f32] {
        &self.data[..self.arch.k * self.arch.d]
    }

    pub fn b_first(&self) -> &[f32] {
        let k = self.arch.k;
        &self.data[k * self.arch.d..self.arch.blocks_start()]
    }

    pub fn block(&self, i: usize) -> BlockView<'_, f32> {
        block_view(&self.arch, &self.data, i)
    }

    pub fn w_last(&self) -> &[f32] {
        let s = self.arch.last_start();
        &self.data[s..s + self.arch.k]
    }

    pub fn b_last(&self) -> f32 {
        self.data[self.arch.last_start() + self.arch.k]
    }

    /// Flat ranges of each named tensor, in storage order.
    pub fn tensor_ranges(arch: &NetworkArch) -> Vec<(String, std::ops::Range<usize>)> {
        let (k, d) = (arch.k, arch.d);
        let mut out = vec![
            ("w_first".to_string(), 0..k * d),
            ("b_first".to_string(), k * d..k * d + k),
        ];
        for i in 0..arch.n_blocks {
            let s = arch.blocks_start() + i * arch.block_len();
            out.push((format!("m1_{i}"), s..s + k * k));
            out.push((format!("b1_{i}"), s + k * k..s + k * k + k));
            out.push((format!("m2_{i}"), s + k * k + k..s + 2 * k * k + k));
            out.push((format!("b2_{i}"), s + 2 * k * k + k..s + 2 * k * k + 2 * k));
        }
        let s = arch.last_start();
        out.push(("w_last".to_string(), s..s + k));
        out.push(("b_last".to_string(), s + k..s + k + 1));
        out
    }

    /// Flat range of block `i`'s first (`which = 0`) or second matrix.
    pub fn block_matrix_range(arch: &NetworkArch, i: usize, which: usize) -> std::ops::Range<usize> {
        let k = arch.k;
        let s = arch.blocks_start() + i * arch.block_len() + which * (k * k + k);
        s..s + k * k
    }
}

fn block_view<'a, T>(arch: &NetworkArch, data: &'a [T], i: usize) -> BlockView<'a, T> {
    let k = arch.k;
    let s = arch.blocks_start() + i * arch.block_len();
    let b = &data[s..s + arch.block_len()];
    BlockView {
        m1: &b[..k * k],
        b1: &b[k * k..k * k + k],
        m2: &b[k * k + k..2 * k * k + k],
        b2: &b[2 * k * k + k..],
    }
}

/// Random initialization: first layer `U(-1/d, 1/d)`, other weights
/// `U(-sqrt(6/k), sqrt(6/k))`, biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_params(arch: NetworkArch, rng_seed: u64) -> Result<Parameters> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (k, d) = (arch.k, arch.d);
    let mut uniform = |n: usize, limit: f64, out: &mut Vec<f32>| {
        out.extend((0..n).map(|_| rng.gen_range(-limit..limit) as f32));
    };
    let hidden = (6.0 / k as f64).sqrt();
    let hidden_bias = 1.0 / (k as f64).sqrt();
    let mut data = Vec::with_capacity(arch.param_count());
    uniform(k * d, 1.0 / d as f64, &mut data);
    uniform(k, 1.0 / (d as f64).sqrt(), &mut data);
    for _ in 0..arch.n_blocks {
        uniform(k * k, hidden, &mut data);
        uniform(k, hidden_bias, &mut data);
        uniform(k * k, hidden, &mut data);
        uniform(k, hidden_bias, &mut data);
    }
    uniform(k, hidden, &mut data);
    uniform(1, hidden_bias, &mut data);
    Parameters::from_flat(arch, data)
}

#[inline]
pub(crate) fn matvec(m: &[f64], x: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * n..(r + 1) * n];
        let mut acc = bias[r];
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        *o = acc;
    }
}

/// `out = M x` without bias.
#[inline]
pub(crate) fn matvec_nobias(m: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * n..(r + 1) * n];
        *o = row.iter().zip(x).map(|(w, v)| w * v).sum();
    }
}

/// `out += M^T y`.
#[inline]
pub(crate) fn matvec_t_acc(m: &[f64], y: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (r, &yr) in y.iter().enumerate() {
        if yr == 0.0 {
            continue;
        }
        let row = &m[r * n..(r + 1) * n];
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * yr;
        }
    }
}

/// Per-sample intermediate values kept for the backward pass.
///
/// Tangent arrays hold `d` directional derivatives (one per input axis),
/// laid out `d x k`.
#[derive(Clone, Debug)]
pub(crate) struct Tape {
    pub x: Vec<f64>,
    pub z0_sin: Vec<f64>,
    pub z0_cos: Vec<f64>,
    /// Block inputs `a_0..a_n` (n + 1 entries).
    pub acts: Vec<Vec<f64>>,
    pub act_tangents: Vec<Vec<f64>>,
    pub blocks: Vec<BlockTape>,
    pub y: f64,
    pub y_tangent: Vec<f64>,
    pub with_tangents: bool,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockTape {
    pub su: Vec<f64>,
    pub cu: Vec<f64>,
    pub sv: Vec<f64>,
    pub cv: Vec<f64>,
    pub u_dot: Vec<f64>,
    pub h_dot: Vec<f64>,
    pub v_dot: Vec<f64>,
}

impl Tape {
    pub fn new(arch: &NetworkArch) -> Self {
        let (k, d) = (arch.k, arch.d);
        let block = BlockTape {
            su: vec![0.0; k],
            cu: vec![0.0; k],
            sv: vec![0.0; k],
            cv: vec![0.0; k],
            u_dot: vec![0.0; d * k],
            h_dot: vec![0.0; d * k],
            v_dot: vec![0.0; d * k],
        };
        Tape {
            x: vec![0.0; d],
            z0_sin: vec![0.0; k],
            z0_cos: vec![0.0; k],
            acts: vec![vec![0.0; k]; arch.n_blocks + 1],
            act_tangents: vec![vec![0.0; d * k]; arch.n_blocks + 1],
            blocks: vec![block; arch.n_blocks],
            y: 0.0,
            y_tangent: vec![0.0; d],
            with_tangents: false,
        }
    }
}

/// 64-bit copy of a parameter set, ready for repeated evaluation.
#[derive(Clone, Debug)]
pub struct Evaluator {
    arch: NetworkArch,
    w: Vec<f64>,
}

impl Evaluator {
    pub fn new(params: &Parameters) -> Self {
        Evaluator {
            arch: params.arch,
            w: params.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub(crate) fn weights(&self) -> &[f64] {
        &self.w
    }

    fn first(&self) -> (&[f64], &[f64]) {
        let kd = self.arch.k * self.arch.d;
        (&self.w[..kd], &self.w[kd..kd + self.arch.k])
    }

    fn last(&self) -> (&[f64], f64) {
        let s = self.arch.last_start();
        (&self.w[s..s + self.arch.k], self.w[s + self.arch.k])
    }

    pub(crate) fn block(&self, i: usize) -> BlockView<'_, f64> {
        block_view(&self.arch, &self.w, i)
    }

    /// Evaluates the network at one point.
    pub fn forward(&self, x: &[f64]) -> f64 {
        let k = self.arch.k;
        let omega = self.arch.omega0 as f64;
        let (wf, bf) = self.first();
        let mut a = vec![0.0; k];
        matvec(wf, x, bf, &mut a);
        for v in a.iter_mut() {
            *v = (omega * *v).sin();
        }
        let mut h = vec![0.0; k];
        let mut g = vec![0.0; k];
        for i in 0..self.arch.n_blocks {
            let blk = self.block(i);
            matvec(blk.m1, &a, blk.b1, &mut h);
            h.iter_mut().for_each(|v| *v = v.sin());
            matvec(blk.m2, &h, blk.b2, &mut g);
            for (av, gv) in a.iter_mut().zip(&g) {
                *av = 0.5 * (*av + gv.sin());
            }
        }
        let (wl, bl) = self.last();
        bl + wl.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn forward_batch(&self, xs: &[f64]) -> Vec<f64> {
        use rayon::prelude::*;
        xs.par_chunks(self.arch.d).map(|x| self.forward(x)).collect()
    }

    /// Hidden activations `a_0..a_n` at `x`.
    pub fn block_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new(&self.arch);
        self.record(x, false, &mut tape);
        tape.acts
    }

    /// Exact spatial gradient `df/dx`.
    pub fn input_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new(&self.arch);
        self.record(x, true, &mut tape);
        tape.y_tangent
    }

    /// Value and spatial gradient in one pass.
    pub(crate) fn value_and_gradient(&self, x: &[f64], tape: &mut Tape) -> (f64, Vec<f64>) {
        self.record(x, true, tape);
        (tape.y, tape.y_tangent.clone())
    }

    /// Forward pass recording every intermediate; with `tangents`, also
    /// propagates the `d` input-axis directional derivatives.
    pub(crate) fn record(&self, x: &[f64], tangents: bool, tape: &mut Tape) {
        let NetworkArch { d, k, n_blocks, .. } = self.arch;
        let omega = self.arch.omega0 as f64;
        tape.with_tangents = tangents;
        tape.x.copy_from_slice(x);
        let (wf, bf) = self.first();
        let mut z = vec![0.0; k];
        matvec(wf, x, bf, &mut z);
        for r in 0..k {
            let (s, c) = (omega * z[r]).sin_cos();
            tape.z0_sin[r] = s;
            tape.z0_cos[r] = c;
        }
        tape.acts[0].copy_from_slice(&tape.z0_sin);
        if tangents {
            let t = &mut tape.act_tangents[0];
            for j in 0..d {
                for r in 0..k {
                    t[j * k + r] = tape.z0_cos[r] * omega * wf[r * d + j];
                }
            }
        }
        let mut tmp = vec![0.0; k];
        for i in 0..n_blocks {
            let blk = self.block(i);
            let (before, after) = tape.acts.split_at_mut(i + 1);
            let a = &before[i];
            let a_next = &mut after[0];
            let bt = &mut tape.blocks[i];
            matvec(blk.m1, a, blk.b1, &mut tmp);
            for r in 0..k {
                let (s, c) = tmp[r].sin_cos();
                bt.su[r] = s;
                bt.cu[r] = c;
            }
            matvec(blk.m2, &bt.su, blk.b2, &mut tmp);
            for r in 0..k {
                let (s, c) = tmp[r].sin_cos();
                bt.sv[r] = s;
                bt.cv[r] = c;
                a_next[r] = 0.5 * (a[r] + s);
            }
            if tangents {
                let (tb, ta) = tape.act_tangents.split_at_mut(i + 1);
                let a_dot = &tb[i];
                let a_next_dot = &mut ta[0];
                for j in 0..d {
                    let sl = j * k..(j + 1) * k;
                    matvec_nobias(blk.m1, &a_dot[sl.clone()], &mut bt.u_dot[sl.clone()]);
                    for r in 0..k {
                        bt.h_dot[j * k + r] = bt.cu[r] * bt.u_dot[j * k + r];
                    }
                    matvec_nobias(blk.m2, &bt.h_dot[sl.clone()], &mut bt.v_dot[sl.clone()]);
                    for r in 0..k {
                        let g_dot = bt.cv[r] * bt.v_dot[j * k + r];
                        a_next_dot[j * k + r] = 0.5 * (a_dot[j * k + r] + g_dot);
                    }
                }
            }
        }
        let (wl, bl) = self.last();
        let a = &tape.acts[n_blocks];
        tape.y = bl + wl.iter().zip(a).map(|(w, v)| w * v).sum::<f64>();
        if tangents {
            let t = &tape.act_tangents[n_blocks];
            for j in 0..d {
                tape.y_tangent[j] = wl.iter().zip(&t[j * k..(j + 1) * k]).map(|(w, v)| w * v).sum();
            }
        }
    }
}

/// Network output at `x` (normalized value space).
pub fn forward(params: &Parameters, x: &[f64]) -> f64 {
    Evaluator::new(params).forward(x)
}

/// Row-wise [`forward`] over an `N x d` buffer.
pub fn forward_batch(params: &Parameters, xs: &[f64]) -> Vec<f64> {
    Evaluator::new(params).forward_batch(xs)
}

pub fn input_gradient(params: &Parameters, x: &[f64]) -> Vec<f64> {
    Evaluator::new(params).input_gradient(x)
}
