use nvcf_core::metrics::{gradient_psnr, psnr};
use nvcf_core::volume::Volume;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vol(values: Vec<f32>) -> Volume {
    Volume::new(vec![4, 4, 4], values).unwrap()
}

proptest! {
    #[test]
    fn psnr_is_affine_invariant(
        reference in prop::collection::vec(-640i32..640, 64),
        noise in prop::collection::vec(-32i32..32, 64),
        scale in prop::sample::select(vec![0.25f32, 0.5, 2.0, 4.0, 8.0]),
        shift in prop::sample::select(vec![-64.0f32, -1.0, 0.0, 3.0, 128.0]),
    ) {
        // Multiples of 1/64 keep every shifted and scaled value exact in f32.
        let reference: Vec<f32> = reference.iter().map(|&r| r as f32 / 64.0).collect();
        let candidate: Vec<f32> = reference.iter().zip(&noise).map(|(r, &n)| r + n as f32 / 64.0).collect();
        let base = psnr(&vol(reference.clone()), &vol(candidate.clone())).unwrap();
        let r2: Vec<f32> = reference.iter().map(|v| v * scale + shift).collect();
        let c2: Vec<f32> = candidate.iter().map(|v| v * scale + shift).collect();
        let moved = psnr(&vol(r2), &vol(c2)).unwrap();
        prop_assume!(base.is_infinite() == moved.is_infinite());
        if !base.is_infinite() {
            prop_assert!((base.as_f64() - moved.as_f64()).abs() < 1e-9, "{} vs {}", base, moved);
        }
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let reference: Vec<f32> = (0..4096).map(|i| ((i as f32) * 0.01).sin()).collect();
    let unit: Vec<f32> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = Volume::new(vec![16, 16, 16], reference.clone()).unwrap();
    let scores: Vec<f64> = [0.01f32, 0.05, 0.2]
        .iter()
        .map(|&a| {
            let c: Vec<f32> = reference.iter().zip(&unit).map(|(v, u)| v + a * u).collect();
            psnr(&r, &Volume::new(vec![16, 16, 16], c).unwrap()).unwrap().as_f64()
        })
        .collect();
    assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
}

#[test]
fn one_dimensional_gradient_psnr_matches_psnr() {
    let a: Vec<f32> = (0..64).map(|i| (i as f32 * 0.3).cos()).collect();
    let b: Vec<f32> = a.iter().enumerate().map(|(i, v)| v + 0.01 * (i % 5) as f32).collect();
    let p = psnr(&vol(a.clone()), &vol(b.clone())).unwrap();
    let g = gradient_psnr(
        &a.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &b.iter().map(|&v| v as f64).collect::<Vec<_>>(),
    )
    .unwrap();
    assert!((p.as_f64() - g.as_f64()).abs() < 1e-9);
}
