//! Fitting a network to a volume: exact loss gradients (including the
//! second-order term of the gradient penalty), Adam, and a step-decay
//! learning-rate schedule.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_net::{init_params, matvec_t_acc, Evaluator, NetworkArch, Parameters, Tape};
use crate::metrics::psnr_from_mse;
use crate::volume::{self, axis_coord, gradient_field, unravel_into, SampleBatch, ValueRange, Volume};

/// Samples per parallel work unit. Fixed so the reduction order (and hence
/// every bit of the result) does not depend on the thread count.
const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LearningRate {
    /// Derived from the parameter count with [`auto_learning_rate`].
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the gradient penalty; 0 disables it.
    pub lambda: f64,
    pub lr_initial: LearningRate,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
    /// Number of fixed grid points used for the per-epoch PSNR probe; 0 disables it.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 75,
            batch_size: 16384,
            lambda: 0.0,
            lr_initial: LearningRate::Auto,
            decay_factor: 5.0,
            decay_every: 20,
            seed: 0,
            probe_size: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(Error::Config("decay schedule must be positive".into()));
        }
        if let LearningRate::Fixed(lr) = self.lr_initial {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn initial_lr(&self, param_count: usize) -> f64 {
        match self.lr_initial {
            LearningRate::Auto => auto_learning_rate(param_count),
            LearningRate::Fixed(lr) => lr,
        }
    }
}

/// Linear in the parameter count through (800K, 1e-4) and (5M, 2e-5),
/// clamped to that interval outside it.
pub fn auto_learning_rate(param_count: usize) -> f64 {
    const SMALL: (f64, f64) = (800_000.0, 1e-4);
    const LARGE: (f64, f64) = (5_000_000.0, 2e-5);
    let m = (param_count as f64).clamp(SMALL.0, LARGE.0);
    SMALL.1 + (m - SMALL.0) * (LARGE.1 - SMALL.1) / (LARGE.0 - SMALL.0)
}

/// `lr0 / decay_factor^floor(epoch / decay_every)`.
pub fn lr_at_epoch(lr0: f64, epoch: usize, cfg: &TrainConfig) -> f64 {
    lr0 / cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Loss gradient with the same flat layout as [`Parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradients {
    pub arch: NetworkArch,
    pub data: Vec<f64>,
}

/// Mean over the batch of `(f(p) - t)^2 + lambda * |grad f(p) - g|^2` and its
/// exact gradient with respect to every parameter.
pub fn loss_and_gradients(
    params: &Parameters,
    batch: &SampleBatch,
    lambda: f64,
) -> Result<(f64, ParamGradients)> {
    let ev = Evaluator::new(params);
    loss_and_gradients_with(&ev, batch, lambda)
}

fn loss_and_gradients_with(ev: &Evaluator, batch: &SampleBatch, lambda: f64) -> Result<(f64, ParamGradients)> {
    let arch = *ev.arch();
    if batch.is_empty() {
        return Err(Error::Logic("empty batch".into()));
    }
    if batch.dims != arch.d {
        return Err(Error::Logic(format!(
            "batch has {} dims, network expects {}",
            batch.dims, arch.d
        )));
    }
    let grad_targets = match (&batch.grad_targets, lambda > 0.0) {
        (Some(g), true) => Some(g.as_slice()),
        (None, true) => {
            return Err(Error::Config("gradient penalty requires gradient targets".into()))
        }
        (_, false) => None,
    };
    let d = arch.d;
    let n = batch.len();
    let partials: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .step_by(CHUNK)
        .map(|start| {
            let end = (start + CHUNK).min(n);
            let mut tape = Tape::new(&arch);
            let mut scratch = Scratch::new(&arch);
            let mut grad = vec![0.0; arch.param_count()];
            let mut loss = 0.0;
            let mut ydot_bar = vec![0.0; d];
            for s in start..end {
                ev.record(batch.coord(s), grad_targets.is_some(), &mut tape);
                let r = tape.y - batch.targets[s];
                let mut sample_loss = r * r;
                if let Some(g) = grad_targets {
                    let mut pen = 0.0;
                    for j in 0..d {
                        let e = tape.y_tangent[j] - g[s * d + j];
                        pen += e * e;
                        ydot_bar[j] = 2.0 * lambda * e;
                    }
                    sample_loss += lambda * pen;
                }
                loss += sample_loss;
                backward(ev, &tape, 2.0 * r, &ydot_bar, &mut grad, &mut scratch);
            }
            (loss, grad)
        })
        .collect();
    let mut loss = 0.0;
    let mut data = vec![0.0; arch.param_count()];
    for (l, g) in partials {
        loss += l;
        for (acc, v) in data.iter_mut().zip(g) {
            *acc += v;
        }
    }
    let inv = 1.0 / n as f64;
    data.iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, ParamGradients { arch, data }))
}

struct Scratch {
    abar: Vec<f64>,
    adot_bar: Vec<f64>,
    vbar: Vec<f64>,
    vdot_bar: Vec<f64>,
    hbar: Vec<f64>,
    hdot_bar: Vec<f64>,
    ubar: Vec<f64>,
    udot_bar: Vec<f64>,
}

impl Scratch {
    fn new(arch: &NetworkArch) -> Self {
        let (k, d) = (arch.k, arch.d);
        Scratch {
            abar: vec![0.0; k],
            adot_bar: vec![0.0; d * k],
            vbar: vec![0.0; k],
            vdot_bar: vec![0.0; d * k],
            hbar: vec![0.0; k],
            hdot_bar: vec![0.0; d * k],
            ubar: vec![0.0; k],
            udot_bar: vec![0.0; d * k],
        }
    }
}

/// Reverse pass through the recorded value and tangent computation.
///
/// `ybar` is the adjoint of the output, `ydot_bar[j]` the adjoint of its
/// derivative along input axis `j` (ignored when the tape has no tangents).
fn backward(ev: &Evaluator, tape: &Tape, ybar: f64, ydot_bar: &[f64], grad: &mut [f64], s: &mut Scratch) {
    let arch = ev.arch();
    let NetworkArch { d, k, n_blocks, .. } = *arch;
    let omega = arch.omega0 as f64;
    let tan = tape.with_tangents;
    let w = ev.weights();
    let last = arch.last_start();

    let a_n = &tape.acts[n_blocks];
    let wl = &w[last..last + k];
    for r in 0..k {
        let mut gw = ybar * a_n[r];
        s.abar[r] = ybar * wl[r];
        if tan {
            let adot = &tape.act_tangents[n_blocks];
            for j in 0..d {
                gw += ydot_bar[j] * adot[j * k + r];
                s.adot_bar[j * k + r] = ydot_bar[j] * wl[r];
            }
        }
        grad[last + r] += gw;
    }
    grad[last + k] += ybar;

    for i in (0..n_blocks).rev() {
        let blk = ev.block(i);
        let bt = &tape.blocks[i];
        let a = &tape.acts[i];
        let adot = &tape.act_tangents[i];
        let m1_off = arch.blocks_start() + i * arch.block_len();
        let b1_off = m1_off + k * k;
        let m2_off = b1_off + k;
        let b2_off = m2_off + k * k;

        // a_next = (a + sin v) / 2: half the adjoint flows down the skip path.
        for r in 0..k {
            s.abar[r] *= 0.5;
            let gbar = s.abar[r];
            let mut vb = gbar * bt.cv[r];
            if tan {
                for j in 0..d {
                    let q = j * k + r;
                    s.adot_bar[q] *= 0.5;
                    let gdot_bar = s.adot_bar[q];
                    vb -= gdot_bar * bt.sv[r] * bt.v_dot[q];
                    s.vdot_bar[q] = gdot_bar * bt.cv[r];
                }
            }
            s.vbar[r] = vb;
        }
        // v = M2 sin(u) + b2
        for r in 0..k {
            let row = &mut grad[m2_off + r * k..m2_off + (r + 1) * k];
            for (c, g) in row.iter_mut().enumerate() {
                let mut acc = s.vbar[r] * bt.su[c];
                if tan {
                    for j in 0..d {
                        acc += s.vdot_bar[j * k + r] * bt.h_dot[j * k + c];
                    }
                }
                *g += acc;
            }
            grad[b2_off + r] += s.vbar[r];
        }
        s.hbar.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(blk.m2, &s.vbar, &mut s.hbar);
        if tan {
            s.hdot_bar.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..d {
                matvec_t_acc(blk.m2, &s.vdot_bar[j * k..(j + 1) * k], &mut s.hdot_bar[j * k..(j + 1) * k]);
            }
        }
        // h = sin(u)
        for r in 0..k {
            let mut ub = s.hbar[r] * bt.cu[r];
            if tan {
                for j in 0..d {
                    let q = j * k + r;
                    ub -= s.hdot_bar[q] * bt.su[r] * bt.u_dot[q];
                    s.udot_bar[q] = s.hdot_bar[q] * bt.cu[r];
                }
            }
            s.ubar[r] = ub;
        }
        // u = M1 a + b1
        for r in 0..k {
            let row = &mut grad[m1_off + r * k..m1_off + (r + 1) * k];
            for (c, g) in row.iter_mut().enumerate() {
                let mut acc = s.ubar[r] * a[c];
                if tan {
                    for j in 0..d {
                        acc += s.udot_bar[j * k + r] * adot[j * k + c];
                    }
                }
                *g += acc;
            }
            grad[b1_off + r] += s.ubar[r];
        }
        matvec_t_acc(blk.m1, &s.ubar, &mut s.abar);
        if tan {
            for j in 0..d {
                matvec_t_acc(blk.m1, &s.udot_bar[j * k..(j + 1) * k], &mut s.adot_bar[j * k..(j + 1) * k]);
            }
        }
    }

    // a0 = sin(omega z), z = W x + b; tangent a0_dot[j] = omega cos(omega z) W[:, j].
    let b_off = k * d;
    for r in 0..k {
        let (sz, cz) = (tape.z0_sin[r], tape.z0_cos[r]);
        let mut zbar = s.abar[r] * omega * cz;
        if tan {
            for j in 0..d {
                zbar -= s.adot_bar[j * k + r] * omega * omega * w[r * d + j] * sz;
            }
        }
        for j in 0..d {
            let mut g = zbar * tape.x[j];
            if tan {
                g += s.adot_bar[j * k + r] * omega * cz;
            }
            grad[r * d + j] += g;
        }
        grad[b_off + r] += zbar;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Parameters, grads: &ParamGradients, state: &mut AdamState, lr: f64) -> Result<()> {
    let theta = params.as_flat_mut();
    if theta.len() != grads.data.len() || theta.len() != state.m.len() || theta.len() != state.v.len() {
        return Err(Error::Logic(format!(
            "adam shape mismatch: params {}, grads {}, state {}",
            theta.len(),
            grads.data.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in theta
        .iter_mut()
        .zip(&grads.data)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let update = lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
        *p = (*p as f64 - update) as f32;
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub psnr: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with header `epoch,lr,loss,psnr,seconds`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
        w.write_record(["epoch", "lr", "loss", "psnr", "seconds"]).map_err(csv_err)?;
        for r in &self.records {
            let psnr = r.psnr.map(|p| p.to_string()).unwrap_or_default();
            w.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.loss.to_string(),
                psnr,
                r.seconds.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

/// Whole-grid training data: targets and optional gradient targets for every
/// vertex, precomputed once.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub resolution: Vec<usize>,
    pub targets: Vec<f64>,
    /// `C x d` gradient targets.
    pub grads: Option<Vec<f64>>,
    /// Present when targets were normalized from raw values.
    pub range: Option<ValueRange>,
}

impl TrainingSet {
    /// Normalized targets; gradient targets are differences of the normalized field.
    pub fn from_volume(vol: &Volume, with_grads: bool) -> Result<Self> {
        let norm = volume::normalize_values(vol)?;
        let grads = with_grads.then(|| gradient_field(&norm.values, vol.resolution()));
        Ok(TrainingSet {
            resolution: vol.resolution().to_vec(),
            targets: norm.values,
            grads,
            range: Some(norm.range),
        })
    }

    /// Uses raw values as targets without normalization.
    pub fn raw(vol: &Volume, with_grads: bool) -> Self {
        let targets: Vec<f64> = vol.values().iter().map(|&v| v as f64).collect();
        let grads = with_grads.then(|| gradient_field(&targets, vol.resolution()));
        TrainingSet {
            resolution: vol.resolution().to_vec(),
            targets,
            grads,
            range: None,
        }
    }

    pub fn dims(&self) -> usize {
        self.resolution.len()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Gathers the given flat indices into a batch.
    pub fn gather(&self, flats: &[usize], with_grads: bool) -> SampleBatch {
        let d = self.dims();
        let mut batch = SampleBatch {
            dims: d,
            coords: Vec::with_capacity(flats.len() * d),
            targets: Vec::with_capacity(flats.len()),
            grad_targets: (with_grads && self.grads.is_some()).then(|| Vec::with_capacity(flats.len() * d)),
        };
        let mut idx = [0usize; 4];
        for &f in flats {
            unravel_into(f, &self.resolution, &mut idx[..d]);
            batch
                .coords
                .extend(idx[..d].iter().zip(&self.resolution).map(|(&i, &s)| axis_coord(i, s)));
            batch.targets.push(self.targets[f]);
            if let (Some(out), Some(g)) = (batch.grad_targets.as_mut(), &self.grads) {
                out.extend_from_slice(&g[f * d..(f + 1) * d]);
            }
        }
        batch
    }
}

/// Trains on a volume with normalized targets.
pub fn train(vol: &Volume, arch: NetworkArch, cfg: &TrainConfig) -> Result<(Parameters, TrainLog)> {
    if arch.d != vol.dims() {
        return Err(Error::Config(format!(
            "network input dimension {} does not match volume dimension {}",
            arch.d,
            vol.dims()
        )));
    }
    let set = TrainingSet::from_volume(vol, cfg.lambda > 0.0)?;
    train_on(&set, arch, cfg, |_| {})
}

/// Trains on a prepared set, calling `on_epoch` after every epoch.
pub fn train_on(
    set: &TrainingSet,
    arch: NetworkArch,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Parameters, TrainLog)> {
    cfg.validate()?;
    arch.validate()?;
    if arch.d != set.dims() {
        return Err(Error::Config(format!(
            "network input dimension {} does not match data dimension {}",
            arch.d,
            set.dims()
        )));
    }
    let with_grads = cfg.lambda > 0.0;
    if with_grads && set.grads.is_none() {
        return Err(Error::Config("gradient penalty requires gradient targets".into()));
    }
    let mut params = init_params(arch, cfg.seed)?;
    let mut adam = AdamState::new(arch.param_count());
    let lr0 = cfg.initial_lr(arch.param_count());
    let steps = set.len().div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_dba7_c4e5_u64);

    let probe = (cfg.probe_size > 0).then(|| {
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0b5e_77e5u64);
        let n = cfg.probe_size.min(set.len());
        let flats: Vec<usize> = if n == set.len() {
            (0..n).collect()
        } else {
            (0..n).map(|_| prng.gen_range(0..set.len())).collect()
        };
        set.gather(&flats, false)
    });

    let mut log = TrainLog::default();
    let started = Instant::now();
    let mut flats = vec![0usize; cfg.batch_size];
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(lr0, epoch, cfg);
        let mut loss_sum = 0.0;
        for step in 0..steps {
            flats.iter_mut().for_each(|f| *f = rng.gen_range(0..set.len()));
            let batch = set.gather(&flats, with_grads);
            let (loss, grads) = loss_and_gradients(&params, &batch, cfg.lambda)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            loss_sum += loss;
            adam_step(&mut params, &grads, &mut adam, lr)?;
        }
        let psnr = probe.as_ref().map(|b| probe_psnr(&params, b));
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / steps as f64,
            psnr,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok((params, log))
}

fn probe_psnr(params: &Parameters, batch: &SampleBatch) -> f64 {
    let out = Evaluator::new(params).forward_batch(&batch.coords);
    let mse = out
        .iter()
        .zip(&batch.targets)
        .map(|(y, t)| (y - t) * (y - t))
        .sum::<f64>()
        / batch.len() as f64;
    let (lo, hi) = batch
        .targets
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &t| (l.min(t), h.max(t)));
    psnr_from_mse(hi - lo, mse).as_f64()
}
