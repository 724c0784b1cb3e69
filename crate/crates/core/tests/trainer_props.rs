use nvcf_core::field_net::{init_params, NetworkArch};
use nvcf_core::trainer::{loss_and_gradients, lr_at_epoch, train, LearningRate, TrainConfig};
use nvcf_core::volume::{SampleBatch, Volume};
use proptest::prelude::*;

fn smooth() -> Volume {
    Volume::from_fn(vec![12, 12, 12], |p| ((2.0 * p[0]).sin() + (p[1] - p[2]).cos()) as f32).unwrap()
}

#[test]
fn loss_falls_and_schedule_is_followed() {
    let arch = NetworkArch::new(3, 6, 2).unwrap().with_omega0(10.0);
    let cfg = TrainConfig {
        epochs: 75,
        batch_size: 256,
        lr_initial: LearningRate::Fixed(5e-3),
        probe_size: 256,
        ..TrainConfig::default()
    };
    let (_, log) = train(&smooth(), arch, &cfg).unwrap();
    assert_eq!(log.records.len(), 75);
    let losses = log.losses();
    assert!(losses[74] < losses[0], "{} vs {}", losses[74], losses[0]);
    for r in &log.records {
        assert_eq!(r.lr, lr_at_epoch(5e-3, r.epoch, &cfg));
        assert!(r.psnr.unwrap().is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_lambda_ignores_gradient_targets(seed in any::<u64>(), k in 1usize..6,
                                            xs in prop::collection::vec(-1.0f64..1.0, 24),
                                            gs in prop::collection::vec(-3.0f64..3.0, 24)) {
        let p = init_params(NetworkArch::new(3, k, 2).unwrap(), seed).unwrap();
        let targets: Vec<f64> = xs.iter().step_by(3).map(|x| x * 0.5).collect();
        let plain = SampleBatch { dims: 3, coords: xs.clone(), targets: targets.clone(), grad_targets: None };
        let with = SampleBatch { grad_targets: Some(gs), ..plain.clone() };
        let (l0, g0) = loss_and_gradients(&p, &plain, 0.0).unwrap();
        let (l1, g1) = loss_and_gradients(&p, &with, 0.0).unwrap();
        prop_assert_eq!(l0.to_bits(), l1.to_bits());
        prop_assert_eq!(g0, g1);
        let (l2, _) = loss_and_gradients(&p, &with, 0.05).unwrap();
        prop_assert!(l2 >= l0);
    }
}
