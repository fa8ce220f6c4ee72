use super::*;
use crate::datagen::{generate_excitation, simulate_trajectory, slice_samples, SimConfig};
use crate::powergrid::pair2_model;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy_sets(duration: f64, d: usize) -> (SampleSet, SampleSet) {
    let grid = pair2_model();
    let mk = |seed| {
        let ex = generate_excitation(&grid, duration, 2.0, 0.2, 0.01, seed).unwrap();
        let traj = simulate_trajectory(&grid, &ex, &SimConfig::default(), seed as u32).unwrap();
        slice_samples(&traj, 8, 4, d).unwrap()
    };
    (mk(1), mk(2))
}

fn toy_model(train: &SampleSet, seed: u64) -> Model {
    let cfg = ModelConfig {
        hidden_layers: 1,
        hidden_width: 8,
        tcn_channels: 4,
        tcn_kernel: 2,
        history: 8,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::new(ModelKind::Mpg, cfg, pair2_model().topology(), train, &mut rng).unwrap()
}

#[test]
fn mse_examples() {
    assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0], 1, 1, 1).unwrap(), 0.0);
    assert!((mse_loss(&[0.3, 0.4], &[0.0, 0.0], 1, 1, 1).unwrap() - 0.25).abs() < 1e-15);
    assert!(mse_loss(&[0.0; 3], &[0.0; 2], 1, 1, 1).is_err());
}

proptest! {
    #[test]
    fn constant_offset_gives_twice_square(c in -3.0f64..3.0, n in 1usize..4, s in 1usize..4, k in 1usize..5) {
        let len = n * s * k * 2;
        let t: Vec<f64> = (0..len).map(|i| i as f64 * 0.1).collect();
        let p: Vec<f64> = t.iter().map(|x| x + c).collect();
        let l = mse_loss(&p, &t, n, s, k).unwrap();
        prop_assert!((l - 2.0 * c * c).abs() <= 1e-12 * (1.0 + c * c));
    }

    #[test]
    fn adam_is_linear_in_lr_and_sign_equivariant(g in prop::collection::vec(-5.0f64..5.0, 1..20), lr in 1e-5f64..1e-1) {
        let mut a = Adam::new(&[g.len()]);
        let mut b = a.clone();
        let mut c = a.clone();
        let full = a.updates(&[g.clone()], lr, &[]);
        let half = b.updates(&[g.clone()], lr / 2.0, &[]);
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        let flipped = c.updates(&[neg], lr, &[]);
        for i in 0..g.len() {
            if half[0][i] != 0.0 {
                prop_assert_eq!(full[0][i] / half[0][i], 2.0);
            }
            prop_assert!((full[0][i] + flipped[0][i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn adam_first_step() {
    let mut a = Adam::new(&[1]);
    let d = a.updates(&[vec![0.5]], 1e-3, &[]);
    let expected = -1e-3 * 0.5 / (0.25f64.sqrt() + 1e-8);
    assert!((d[0][0] - expected).abs() < 1e-18);
    let mut z = Adam::new(&[3]);
    let mut p = Tensor::vector(vec![1.0, 2.0, 3.0]);
    z.step(&mut [&mut p], &[vec![0.0; 3]], 1e-2, &[]);
    assert_eq!(p.data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn frozen_parameters_keep_values() {
    let mut a = Adam::new(&[2, 2]);
    let d = a.updates(&[vec![1.0, 1.0], vec![1.0, 1.0]], 0.1, &[true, false]);
    assert!(d[0].iter().all(|x| *x != 0.0));
    assert_eq!(d[1], vec![0.0, 0.0]);
}

#[test]
fn shard_gradients_sum_to_single_pass() {
    let (train_set, _) = toy_sets(10.0, 40);
    let model = toy_model(&train_set, 3);
    let idx: Vec<usize> = (0..train_set.len()).collect();
    let (l1, g1) = batch_gradients(&model, &train_set, &idx, 1).unwrap();
    let (l3, g3) = batch_gradients(&model, &train_set, &idx, 3).unwrap();
    assert!((l1 - l3).abs() < 1e-10);
    for (a, b) in g1.iter().flatten().zip(g3.iter().flatten()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (train_set, val_set) = toy_sets(10.0, 20);
    let model = toy_model(&train_set, 4);
    let cfg = TrainConfig {
        batch_size: 16,
        learning_rate: 0.0,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let (out, report) = train(model.clone(), &train_set, &val_set, &cfg).unwrap();
    assert_eq!(out.checksum(), model.checksum());
    let l0 = report.epochs[0].train_loss;
    for e in &report.epochs {
        assert!((e.train_loss - l0).abs() <= 1e-12 * l0, "{} vs {l0}", e.train_loss);
    }
    assert_eq!(report.best_epoch, 0);
}

#[test]
fn training_reduces_loss_and_restores_best() {
    let (train_set, val_set) = toy_sets(60.0, 8);
    let model = toy_model(&train_set, 5);
    let cfg = TrainConfig {
        batch_size: 32,
        learning_rate: 5e-3,
        max_epochs: 30,
        patience: 10,
        seed: 9,
        ..TrainConfig::default()
    };
    let (best, report) = train(model, &train_set, &val_set, &cfg).unwrap();
    let first = report.epochs[0].train_loss;
    let last = report.epochs.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
    let min_val = report.epochs.iter().filter_map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_loss, min_val);
    assert_eq!(dataset_loss(&best, &val_set).unwrap(), min_val);
    assert_eq!(best.checksum(), report.checksum);
    for e in &report.epochs[report.best_epoch..] {
        assert!(report.best_val_loss <= e.val_loss.unwrap());
    }

    let (_, again) = train(toy_model(&train_set, 5), &train_set, &val_set, &cfg).unwrap();
    assert_eq!(again.to_csv(), report.to_csv());
    let csv = report.to_csv();
    assert!(csv.starts_with("epoch,train_loss,val_loss,best\n0,"));
    assert_eq!(csv.lines().count(), report.epochs.len() + 1);
}

#[test]
fn patience_stops_training() {
    let (train_set, val_set) = toy_sets(10.0, 20);
    let cfg = TrainConfig {
        batch_size: 8,
        learning_rate: 0.0,
        max_epochs: 50,
        patience: 4,
        ..TrainConfig::default()
    };
    let (_, report) = train(toy_model(&train_set, 6), &train_set, &val_set, &cfg).unwrap();
    assert!(report.stopped_early);
    assert_eq!(report.epochs.len(), 5);
}

#[test]
fn divergence_is_reported_with_location() {
    let (train_set, val_set) = toy_sets(10.0, 20);
    let cfg = TrainConfig {
        batch_size: 8,
        learning_rate: 1e12,
        max_epochs: 5,
        ..TrainConfig::default()
    };
    match train(toy_model(&train_set, 7), &train_set, &val_set, &cfg) {
        Err(TrainError::NonFinite { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.1.summary())),
    }
}

#[test]
fn menu_size_and_ranking() {
    assert_eq!(SweepGrid::menu(5).len(), 3 * 3 * 3 * 5);
    let g = log_grid(1e-4, 1e-2, 3);
    assert!((g[1] - 1e-3).abs() < 1e-15);
    assert_eq!(SweepGrid::menu(4).points(&ModelConfig::default(), &TrainConfig::default()).len(), 108);

    let (train_set, val_set) = toy_sets(10.0, 20);
    let base = toy_model(&train_set, 0).config().clone();
    let tc = TrainConfig {
        batch_size: 16,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    let one = sweep(ModelKind::Mpg, &[(base.clone(), tc.clone())], pair2_model().topology(), &train_set, &val_set, &val_set).unwrap();
    assert_eq!(one[0].rank, 1);
    let grid = SweepGrid {
        hidden_layers: vec![1],
        hidden_width: vec![4, 8],
        tcn_channels: vec![4],
        learning_rate: vec![1e-3, 1e-2],
    };
    let res = sweep(ModelKind::Mpg, &grid.points(&base, &tc), pair2_model().topology(), &train_set, &val_set, &val_set).unwrap();
    assert!(res.windows(2).all(|w| w[0].selection_loss <= w[1].selection_loss));
    assert_eq!(sweep_csv(&res).lines().count(), 5);
}
