//! End-to-end acceptance checks. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion; exits nonzero if any fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nvcf_core::codec::{deserialize, file_size_bits, reconstruct_from_params, reconstruct_volume, serialize};
use nvcf_core::field_net::{init_params, Evaluator, NetworkArch, Parameters};
use nvcf_core::metrics::{evaluate_model, mse, psnr, MetricReport};
use nvcf_core::pipeline::{architecture_for, encode, Budget, EncodeOptions, Encoded};
use nvcf_core::quantizer::{kmeans_1d, quantize_model, DEFAULT_LLOYD_ITERS};
use nvcf_core::renderer::{raymarch_grid_detailed, raymarch_neural_detailed, Camera, MarchOptions, TransferFunction};
use nvcf_core::trainer::{loss_and_gradients, train_on, LearningRate, TrainConfig, TrainingSet};
use nvcf_core::volume::{grid_to_coord, GridIter, Precision, SampleBatch, ValueRange, Volume};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn smooth_field(p: &[f64]) -> f64 {
    let (x, y, z) = (p[0], p[1], p[2]);
    let t = p.get(3).copied().unwrap_or(0.0);
    (PI * (x + 0.3 * t) + 0.3).sin()
        + 0.8 * (PI * (y - 0.5 * z) + 1.1 + 0.5 * t).sin()
        + 0.6 * (PI * (0.5 * x + z) + 2.0).sin()
}

fn smoke_volume() -> Volume {
    Volume::from_fn(vec![32, 32, 32], |p| smooth_field(p) as f32).unwrap()
}

fn smoke_options(lambda: f64) -> EncodeOptions {
    EncodeOptions {
        budget: Budget::Ratio(50.0),
        omega0: 10.0,
        train: TrainConfig {
            epochs: 75,
            batch_size: 256,
            lambda,
            lr_initial: LearningRate::Fixed(1e-2),
            seed: 0,
            probe_size: 0,
            ..TrainConfig::default()
        },
        ..EncodeOptions::default()
    }
}

fn single_thread<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn random_params(rng: &mut ChaCha8Rng, arch: NetworkArch) -> Parameters {
    let mut p = init_params(arch, rng.gen()).unwrap();
    // Nonzero everywhere, including the output layer.
    for v in p.as_flat_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    p
}

fn random_batch(rng: &mut ChaCha8Rng, d: usize, n: usize) -> SampleBatch {
    SampleBatch {
        dims: d,
        coords: (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        targets: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        grad_targets: Some((0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()),
    }
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_exactness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_param, mut worst_input) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let arch = NetworkArch::new(3, rng.gen_range(1..=4), rng.gen_range(1..=2)).unwrap();
        let mut params = random_params(&mut rng, arch);
        let batch = random_batch(&mut rng, 3, 6);
        for lambda in [0.0, 0.5] {
            let (_, analytic) = loss_and_gradients(&params, &batch, lambda).unwrap();
            let mut numeric = vec![0.0; analytic.data.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = params.as_flat()[i];
                let h = 1e-4f32.max(orig.abs() * 1e-4);
                params.as_flat_mut()[i] = orig + h;
                let hi = params.as_flat()[i] as f64;
                let (lp, _) = loss_and_gradients(&params, &batch, lambda).unwrap();
                params.as_flat_mut()[i] = orig - h;
                let lo = params.as_flat()[i] as f64;
                let (lm, _) = loss_and_gradients(&params, &batch, lambda).unwrap();
                params.as_flat_mut()[i] = orig;
                *slot = (lp - lm) / (hi - lo);
            }
            for (_, range) in Parameters::tensor_ranges(&arch) {
                let a = &analytic.data[range.clone()];
                let n = &numeric[range];
                let err = l2(a.iter().zip(n).map(|(x, y)| x - y)) / l2(n.iter().copied()).max(1e-6);
                worst_param = worst_param.max(err);
            }
        }
        let ev = Evaluator::new(&params);
        for _ in 0..4 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = ev.input_gradient(&x);
            let h = 1e-5;
            let fd: Vec<f64> = (0..3)
                .map(|j| {
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[j] += h;
                    xm[j] -= h;
                    (ev.forward(&xp) - ev.forward(&xm)) / (2.0 * h)
                })
                .collect();
            let err = l2(g.iter().zip(&fd).map(|(a, b)| a - b)) / l2(fd.iter().copied()).max(1e-6);
            worst_input = worst_input.max(err);
        }
    }
    let elapsed = started.elapsed();
    check(
        worst_param <= 1e-3 && worst_input <= 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "worst parameter rel err {worst_param:.2e} (<= 1e-3), input rel err {worst_input:.2e} (<= 1e-4), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn residual_boundedness() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 10_000,
            failure_persistence: None,
            ..Config::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let strategy = (
        3usize..=4,
        1usize..=8,
        1usize..=4,
        any::<u64>(),
        0.5f32..60.0,
        0.1f32..10.0,
        prop::collection::vec(-1.5f64..1.5, 4),
    );
    let result = runner.run(&strategy, |(d, k, n, seed, omega0, gain, x)| {
        let arch = NetworkArch::new(d, k, n).unwrap().with_omega0(omega0);
        let mut p = init_params(arch, seed).unwrap();
        for v in p.as_flat_mut() {
            *v *= gain;
        }
        let acts = Evaluator::new(&p).block_activations(&x[..d]);
        for a in acts.iter().flatten() {
            prop_assert!((-1.0..=1.0).contains(a), "activation {a} escaped [-1, 1]");
        }
        Ok(())
    });
    match result {
        Ok(()) => Ok("10000 random (params, x) cases, all block activations in [-1, 1]".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn brute_force_objective(values: &[f64], k: usize) -> f64 {
    let n = values.len();
    let mut best = f64::INFINITY;
    for code in 0..k.pow(n as u32) {
        let (mut sum, mut sq, mut cnt) = (vec![0.0; k], vec![0.0; k], vec![0usize; k]);
        let mut c = code;
        for &v in values {
            let j = c % k;
            c /= k;
            sum[j] += v;
            sq[j] += v * v;
            cnt[j] += 1;
        }
        let sse: f64 = (0..k)
            .filter(|&j| cnt[j] > 0)
            .map(|j| sq[j] - sum[j] * sum[j] / cnt[j] as f64)
            .sum();
        best = best.min(sse);
    }
    best
}

struct Smoke {
    volume: Volume,
    encoded: Encoded,
    unquantized: Parameters,
    encode_time: Duration,
}

fn quantization_quality(s: &Smoke) -> Outcome {
    let range = s.encoded.model.range;
    let full = reconstruct_from_params(&s.unquantized, range, s.volume.resolution()).map_err(|e| e.to_string())?;
    let p_full = psnr(&s.volume, &full).unwrap().as_f64();
    let p_quant = s.encoded.report.psnr.as_f64();
    let drop = p_full - p_quant;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut monotone = true;
    for layer in 0..2 * s.unquantized.arch().n_blocks {
        let r = Parameters::block_matrix_range(s.unquantized.arch(), layer / 2, layer % 2);
        let vals: Vec<f64> = s.unquantized.as_flat()[r].iter().map(|&v| v as f64).collect();
        for k in [2, 4, 8] {
            let km = kmeans_1d(&vals, k, DEFAULT_LLOYD_ITERS);
            monotone &= km.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
        }
    }
    for _ in 0..200 {
        let vals: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0f64..1.0).powi(3)).collect();
        let km = kmeans_1d(&vals, rng.gen_range(2..64), DEFAULT_LLOYD_ITERS);
        monotone &= km.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    }

    let mut worst_gap = 0.0f64;
    for _ in 0..3000 {
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=3);
        let vals: Vec<f64> = (0..n).map(|_| (rng.gen_range(-8..=8) as f64) * 0.25).collect();
        let km = kmeans_1d(&vals, k, DEFAULT_LLOYD_ITERS);
        let got = *km.objective.last().unwrap();
        worst_gap = worst_gap.max(got - brute_force_objective(&vals, k));
    }
    check(
        drop <= 3.0 && monotone && worst_gap <= 1e-9,
        format!(
            "9-bit drop {drop:.3} dB ({p_full:.2} -> {p_quant:.2}), Lloyd objective monotone: {monotone}, \
             worst gap to brute-force optimum {worst_gap:.1e} over 3000 arrays"
        ),
    )
}

fn codec_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..200 {
        let bits = [1u8, 8, 9, 16][case % 4];
        let d = rng.gen_range(3..=4);
        let arch = NetworkArch::new(d, rng.gen_range(1..=12), rng.gen_range(1..=3))
            .unwrap()
            .with_omega0(rng.gen_range(1.0..40.0));
        let params = random_params(&mut rng, arch);
        let resolution: Vec<usize> = (0..d).map(|_| rng.gen_range(1..300)).collect();
        let vmin = rng.gen_range(-100.0f32..100.0);
        let range = ValueRange {
            vmin,
            vmax: vmin + rng.gen_range(0.01f32..50.0),
        };
        let qm = quantize_model(&params, bits, range, &resolution).unwrap();
        let bytes = serialize(&qm);
        let back = deserialize(&bytes).map_err(|e| format!("case {case}: {e}"))?;
        if back != qm || serialize(&back) != bytes {
            return Err(format!("case {case} (bits {bits}) did not round-trip"));
        }
        if 8 * bytes.len() as u64 != file_size_bits(&arch, bits) {
            return Err(format!(
                "case {case}: {} bytes vs formula {} bits",
                bytes.len(),
                file_size_bits(&arch, bits)
            ));
        }
    }
    Ok("200 models over bits {1, 8, 9, 16}: bit-exact, sizes match the closed form".into())
}

fn smoke_compression(s: &Smoke) -> Outcome {
    let p = s.encoded.report.psnr.as_f64();
    let secs = s.encode_time.as_secs_f64();
    check(
        p >= 35.0 && secs <= 900.0,
        format!(
            "32^3, k={}, {} params, PSNR {p:.2} dB (>= 35), {secs:.1}s single-threaded (<= 900), ratio {:.2}",
            s.encoded.report.k, s.encoded.report.params, s.encoded.report.ratio
        ),
    )
}

fn gradient_regularization(s: &Smoke) -> Outcome {
    let base: MetricReport = evaluate_model(&s.encoded.model, &s.volume, true).map_err(|e| e.to_string())?;
    let reg_enc = single_thread(|| encode(&s.volume, Precision::Float32, &smoke_options(0.05), |_| {}))
        .map_err(|e| e.to_string())?;
    let reg = evaluate_model(&reg_enc.model, &s.volume, true).map_err(|e| e.to_string())?;
    let f = |r: &MetricReport| {
        (
            r.psnr.as_f64(),
            r.fd_grad_psnr.as_f64(),
            r.net_grad_psnr.unwrap().as_f64(),
        )
    };
    let (p0, fd0, ng0) = f(&base);
    let (p1, fd1, ng1) = f(&reg);
    check(
        fd1 > fd0 && ng1 > ng0 && p1 >= p0 - 2.0,
        format!(
            "lambda 0 -> 0.05: PSNR {p0:.2} -> {p1:.2}, FD-Grad {fd0:.2} -> {fd1:.2}, Net-Grad {ng0:.2} -> {ng1:.2} dB"
        ),
    )
}

fn interpolant(s: &Smoke) -> Outcome {
    let one = reconstruct_volume(&s.encoded.model, s.volume.resolution()).map_err(|e| e.to_string())?;
    let fine_res: Vec<usize> = s.volume.resolution().iter().map(|&r| 2 * r).collect();
    let two = reconstruct_volume(&s.encoded.model, &fine_res).map_err(|e| e.to_string())?;
    let upsampled: Vec<f64> = GridIter::new(&fine_res)
        .map(|idx| {
            let x = grid_to_coord(&idx, &fine_res).unwrap();
            one.sample_trilinear([x[0], x[1], x[2]]).unwrap()
        })
        .collect();
    let rmse = mse(two.values(), &upsampled).sqrt();
    let rel = rmse / s.encoded.model.range.span();
    check(rel <= 0.05, format!("2x decode vs trilinear upsampling: RMSE {rel:.4} of range (<= 0.05)"))
}

fn renderer_oracle(s: &Smoke) -> Outcome {
    let recon = reconstruct_volume(&s.encoded.model, s.volume.resolution()).map_err(|e| e.to_string())?;
    let cam = Camera {
        width: 64,
        height: 64,
        ..Camera::default()
    };
    let tf = TransferFunction::default_ramp();
    let opts = MarchOptions {
        step: 0.005,
        shaded: false,
        time: None,
        record_alpha: true,
    };
    let neural = raymarch_neural_detailed(&s.encoded.model, &cam, &tf, &opts).map_err(|e| e.to_string())?;
    let grid = raymarch_grid_detailed(&recon, s.encoded.model.range, &cam, &tf, &opts).map_err(|e| e.to_string())?;
    let a: Vec<f64> = neural.image.pixels.iter().flatten().map(|&v| v as f64).collect();
    let b: Vec<f64> = grid.image.pixels.iter().flatten().map(|&v| v as f64).collect();
    let rmse = mse(&a, &b).sqrt();
    let lit = a.iter().filter(|&&v| v > 0.0).count();
    let mut monotone = true;
    for traces in [&neural.alpha_traces, &grid.alpha_traces] {
        for t in traces.as_ref().unwrap() {
            monotone &= t.windows(2).all(|w| w[1] >= w[0]) && t.iter().all(|&x| x <= 1.0 + 1e-6);
        }
    }
    check(
        rmse <= 2.0 && monotone && lit > 0,
        format!("64x64, step 0.005: RMSE {rmse:.3}/255 (<= 2/255), alpha monotone and bounded: {monotone}"),
    )
}

fn time_varying() -> Outcome {
    let volume = Volume::from_fn(vec![16, 16, 16, 4], |p| smooth_field(p) as f32).unwrap();
    let opts = EncodeOptions {
        budget: Budget::Ratio(20.0),
        ..smoke_options(0.0)
    };
    let enc = single_thread(|| encode(&volume, Precision::Float32, &opts, |_| {})).map_err(|e| e.to_string())?;
    let decoded = deserialize(&enc.bytes).map_err(|e| e.to_string())?;
    let recon = reconstruct_volume(&decoded, volume.resolution()).map_err(|e| e.to_string())?;
    let mut per_t = Vec::new();
    for t in 0..4 {
        let p = psnr(&volume.time_slice(t).unwrap(), &recon.time_slice(t).unwrap()).unwrap();
        per_t.push(p.as_f64());
    }
    let ok = decoded.arch.d == 4 && per_t.iter().all(|p| p.is_finite() && *p >= 30.0);
    check(
        ok,
        format!(
            "16^3 x 4, k={}: per-timestep PSNR {} dB (>= 30)",
            enc.report.k,
            per_t.iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn determinism(s: &Smoke) -> Outcome {
    let again = single_thread(|| encode(&s.volume, Precision::Float32, &smoke_options(0.0), |_| {}))
        .map_err(|e| e.to_string())?;
    check(
        again.bytes == s.encoded.bytes,
        format!("two encodes: {} and {} bytes, identical: {}", s.encoded.bytes.len(), again.bytes.len(), again.bytes == s.encoded.bytes),
    )
}

fn main() {
    let volume = smoke_volume();
    let opts = smoke_options(0.0);
    let started = Instant::now();
    let encoded = single_thread(|| encode(&volume, Precision::Float32, &opts, |_| {})).expect("smoke encode");
    let encode_time = started.elapsed();
    let (arch, _) = architecture_for(&volume, &opts).unwrap();
    let set = TrainingSet::from_volume(&volume, false).unwrap();
    let (unquantized, _) = single_thread(|| train_on(&set, arch, &opts.train, |_| {})).unwrap();
    let smoke = Smoke {
        volume,
        encoded,
        unquantized,
        encode_time,
    };

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient exactness", Box::new(gradient_exactness)),
        ("residual boundedness", Box::new(residual_boundedness)),
        ("quantization quality", Box::new(|| quantization_quality(&smoke))),
        ("codec round-trip", Box::new(codec_round_trip)),
        ("smoke compression", Box::new(|| smoke_compression(&smoke))),
        ("gradient regularization", Box::new(|| gradient_regularization(&smoke))),
        ("interpolant", Box::new(|| interpolant(&smoke))),
        ("renderer oracle", Box::new(|| renderer_oracle(&smoke))),
        ("time-varying", Box::new(time_varying)),
        ("determinism", Box::new(|| determinism(&smoke))),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let outcome = run();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!("[{tag}] {:>2} {name}: {detail}", n + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
