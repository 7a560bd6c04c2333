mod common;

use common::rng;
use dcnfis::optim::{AdamConfig, AdamState};
use dcnfis::trainer::{evaluate, train, train_step};
use dcnfis::{BackboneConfig, Dataset, Dcnfis, Error, Split, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

fn blobs(n: usize, seed: u64) -> Split {
    let mut r = rng(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let label = (i % 2) as u8;
        let base = if label == 0 { 0.2 } else { 0.8 };
        images.extend((0..16).map(|_| base + r.random_range(-0.1f32..0.1)));
        labels.push(label);
    }
    Split { images, labels, rows: 4, cols: 4 }
}

fn tiny_backbone() -> BackboneConfig {
    "1x4x4: conv(2,3,1,1) > relu > flatten".parse().unwrap()
}

proptest! {
    #[test]
    fn adam_without_momentum_is_sign_descent(
        theta in prop::collection::vec(-1.0f64..1.0, 1..20),
        seed in any::<u64>(),
        lr in 1e-4f64..1e-1,
    ) {
        let g: Vec<f64> = common::uniform(&mut rng(seed), &[theta.len()], -2.0, 2.0).into_data();
        let config = AdamConfig { beta1: 0.0, beta2: 0.0, epsilon: 1e-8 };
        let mut state = AdamState::new(config, &[theta.len()]);
        let mut p = theta.clone();
        state.step(&mut [("p".to_string(), &mut p[..])], &[&g], lr).unwrap();
        for ((after, before), gi) in p.iter().zip(&theta).zip(&g) {
            let expect = before - lr * gi / (gi.abs() + 1e-8);
            prop_assert!((after - expect).abs() <= 1e-15 * before.abs().max(1.0), "{after} vs {expect}");
        }
    }
}

#[test]
fn first_adam_step_moves_each_weight_by_the_learning_rate() {
    let g = [0.3f64, -2.0, 1e-3, 0.0];
    let mut p = [1.0f64; 4];
    let mut state = AdamState::new(AdamConfig::default(), &[4]);
    state.step(&mut [("p".to_string(), &mut p[..])], &[&g], 1e-3).unwrap();
    for (after, gi) in p.iter().zip(&g) {
        // Bias correction makes m/sqrt(v) = g/|g| on the first step.
        let expect = 1.0 - 1e-3 * gi / (gi.abs() + 1e-8);
        assert!((after - expect).abs() < 1e-15, "{after} vs {expect}");
    }
    assert_eq!(p[3], 1.0);
}

#[test]
fn loss_decreases_over_first_ten_steps() {
    let split = blobs(32, 41);
    let idx: Vec<usize> = (0..32).collect();
    let labels: Vec<usize> = split.labels.iter().map(|&l| l as usize).collect();
    let mut model = Dcnfis::new(tiny_backbone(), 2, 42).unwrap();
    let mut state = AdamState::new(AdamConfig::default(), &model.param_sizes());
    let mut losses = Vec::new();
    for _ in 0..11 {
        let (loss, _) = train_step(&mut model, &mut state, split.batch(&idx).unwrap(), &labels, 1e-3, None).unwrap();
        losses.push(loss);
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "losses {losses:?}");
}

#[test]
fn training_is_reproducible_and_learns_blobs() {
    let ds = Dataset::from_splits(blobs(64, 43), blobs(32, 44)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 5,
        schedule: vec![(1, 2e-2), (3, 2e-3)],
        augment: true,
        backbone: tiny_backbone(),
        ..TrainConfig::default()
    };
    let run = || train(Dcnfis::new(tiny_backbone(), 2, 6).unwrap(), &ds, &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.history.iter().map(|m| m.lr).collect::<Vec<_>>(), vec![2e-2, 2e-2, 2e-3]);
    let ev = evaluate(&a.checkpoint.model, &ds.test).unwrap();
    assert!(ev.accuracy >= 0.9, "test accuracy {}", ev.accuracy);
    let trace: u64 = (0..2).map(|i| ev.confusion[i][i]).sum();
    assert_eq!(trace as f64 / ds.test.len() as f64, ev.accuracy);
}

#[test]
fn non_finite_parameters_abort_with_last_good_checkpoint() {
    let ds = Dataset::from_splits(blobs(16, 45), blobs(8, 46)).unwrap();
    let cfg = TrainConfig { epochs: 2, batch_size: 8, backbone: tiny_backbone(), ..TrainConfig::default() };
    let mut model = Dcnfis::new(tiny_backbone(), 2, 7).unwrap();
    model.head.w[0] = f32::NAN;
    match train(model.clone(), &ds, &cfg) {
        Err(Error::Diverged { epoch, last_good, .. }) => {
            assert_eq!(epoch, 1);
            assert_eq!(last_good.epoch, 0);
            assert_eq!(last_good.model.head.b, model.head.b);
        }
        Err(other) => panic!("expected divergence, got {other}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn mismatched_backbone_is_rejected() {
    let ds = Dataset::from_splits(blobs(16, 45), blobs(8, 46)).unwrap();
    let cfg = TrainConfig { epochs: 1, backbone: tiny_backbone(), ..TrainConfig::default() };
    let other: BackboneConfig = "1x4x4: conv(3,3,1,1) > relu > flatten".parse().unwrap();
    assert!(train(Dcnfis::new(other, 2, 0).unwrap(), &ds, &cfg).is_err());
}
