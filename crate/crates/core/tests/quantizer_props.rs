use nvcf_core::field_net::{init_params, NetworkArch, Parameters};
use nvcf_core::metrics::mse;
use nvcf_core::quantizer::{dequantize_model, kmeans_1d, quantize_layer, quantize_model};
use nvcf_core::volume::ValueRange;
use proptest::prelude::*;

fn uniform_mse(m: &[f32], bits: u8) -> f64 {
    let (lo, hi) = m.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v as f64), h.max(v as f64)));
    let levels = (1u64 << bits) as f64;
    let step = (hi - lo) / (levels - 1.0);
    let q: Vec<f64> = m
        .iter()
        .map(|&v| if step > 0.0 { lo + ((v as f64 - lo) / step).round() * step } else { lo })
        .collect();
    mse(m, &q)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn never_worse_than_uniform(values in prop::collection::vec(-3.0f32..3.0, 4..400), bits in 1u8..=6) {
        let n = values.len();
        let q = quantize_layer(&values, 1, n, bits).unwrap();
        let kmse = mse(&values, &q.dequantize().unwrap());
        prop_assert!(kmse <= uniform_mse(&values, bits) * (1.0 + 1e-6) + 1e-12);
    }

    #[test]
    fn objective_never_increases(values in prop::collection::vec(-10.0f64..10.0, 1..500), k in 1usize..40) {
        let km = kmeans_1d(&values, k, 50);
        prop_assert!(km.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
        prop_assert!(km.centers.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(km.assignments.len(), values.len());
        prop_assert!(km.assignments.iter().all(|&a| (a as usize) < k));
        prop_assert_eq!(&km, &kmeans_1d(&values, k, 50));
    }

    #[test]
    fn codes_cover_every_intermediary_entry(k in 1usize..9, n in 1usize..4, bits in 1u8..=9, seed in any::<u64>()) {
        let arch = NetworkArch::new(3, k, n).unwrap();
        let p = init_params(arch, seed).unwrap();
        let qm = quantize_model(&p, bits, ValueRange { vmin: -1.0, vmax: 2.0 }, &[4, 4, 4]).unwrap();
        let codes: usize = qm.layers.iter().map(|l| l.codes.len()).sum();
        prop_assert_eq!(codes, 2 * n * k * k);
        for l in &qm.layers {
            prop_assert_eq!(l.centers.len(), 1usize << bits);
            prop_assert!(l.centers.windows(2).all(|w| w[0] <= w[1]));
        }
        let deq = dequantize_model(&qm).unwrap();
        for (name, r) in Parameters::tensor_ranges(&arch) {
            if !name.starts_with("m") {
                prop_assert_eq!(&deq.as_flat()[r.clone()], &p.as_flat()[r]);
            }
        }
    }
}
