use super::*;
use crate::trajgen::{generate_dataset, Balance, DatasetSpec, Split};

fn toy(count: usize, lengths: (usize, usize), seed: u64) -> crate::trajgen::Dataset {
    let mut spec = DatasetSpec::new(count, lengths, seed);
    spec.balance = Balance::Models;
    generate_dataset(&spec).unwrap()
}

#[test]
fn defaults_follow_hyperparameter_table() {
    let c = TrainConfig::default();
    assert_eq!(c.batch_size, 32);
    assert_eq!(c.heads, 16);
    assert_eq!(c.cnn_dropout, 0.05);
    assert_eq!(c.trans_dropout, 0.0);
    assert_eq!(c.learn_rate, 0.0002133);
    assert_eq!(c.epochs, 100);
    assert_eq!(c.patience, 10);
    assert_eq!(c.curriculum_patience, 5);
    c.validate().unwrap();
    let bad = TrainConfig {
        patience: 101,
        ..c.clone()
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

#[test]
fn scale_lr_properties() {
    assert_eq!(scale_lr(0.01, 32_000, 32, 32_000, 32).unwrap(), 0.01);
    let lr = scale_lr(0.01, 32_000, 32, 1_350_000, 32).unwrap();
    assert!((lr - 10.0 * 32.0 / 1.35e6).abs() < 1e-18);
    assert!((lr - 2.370e-4).abs() < 1e-7);
    let g = noise_scale(2.133e-4, 1_350_000, 32);
    assert!((g - 9.0).abs() < 0.01, "{g}");
    assert!(scale_lr(0.0, 1, 1, 1, 1).is_err());
    assert!(matches!(scale_lr(0.01, 0, 1, 1, 1), Err(Error::Domain(_))));
    assert!(matches!(scale_lr(0.01, 1, 1, 1, 0), Err(Error::Domain(_))));
}

#[test]
fn adam_zero_gradient_and_first_step() {
    let mut p = vec![0.3, -1.2];
    let mut st = OptimizerState::new(OptimizerKind::Adam, &[2]);
    optimizer_step(&mut [&mut p[..]], &[&[0.0, 0.0][..]], &mut st, 0.1).unwrap();
    assert_eq!(p, vec![0.3, -1.2]);

    let mut w = vec![1.0];
    let mut st = OptimizerState::new(OptimizerKind::Adam, &[1]);
    optimizer_step(&mut [&mut w[..]], &[&[1.0][..]], &mut st, 0.1).unwrap();
    // m̂ = 1, v̂ = 1 after bias correction
    assert!((w[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

    let mut st = OptimizerState::new(OptimizerKind::Adam, &[1]);
    assert!(optimizer_step(&mut [&mut w[..]], &[&[f64::NAN][..]], &mut st, 0.1).is_err());
    assert!(optimizer_step(&mut [&mut w[..]], &[&[1.0, 2.0][..]], &mut st, 0.1).is_err());
}

#[test]
fn adam_minimizes_quadratic_bowl() {
    let centre = [1.5, -0.7, 3.0];
    let mut x = vec![0.0; 3];
    let mut st = OptimizerState::new(OptimizerKind::Adam, &[3]);
    let f = |x: &[f64]| x.iter().zip(&centre).map(|(a, c)| (a - c).powi(2)).sum::<f64>();
    let mut steps = 0;
    while f(&x) >= 1e-6 && steps < 500 {
        let g: Vec<f64> = x.iter().zip(&centre).map(|(a, c)| 2.0 * (a - c)).collect();
        optimizer_step(&mut [&mut x[..]], &[&g[..]], &mut st, 0.1).unwrap();
        steps += 1;
    }
    assert!(f(&x) < 1e-6, "f = {} after {steps} steps", f(&x));
}

#[test]
fn sgd_step() {
    let mut w = vec![1.0, 2.0];
    let mut st = OptimizerState::new(OptimizerKind::Sgd, &[2]);
    optimizer_step(&mut [&mut w[..]], &[&[1.0, -2.0][..]], &mut st, 0.5).unwrap();
    assert_eq!(w, vec![0.5, 3.0]);
}

#[test]
fn early_stop_on_rising_validation() {
    let mut state = 0u32;
    let (best, hist) = fit_with_early_stopping(10, 1, &mut state, |s, epoch| {
        *s = epoch as u32 * 10;
        Ok((1.0, epoch as f64))
    })
    .unwrap();
    assert_eq!(hist.stop_epoch, 2);
    assert_eq!(hist.best_epoch, 1);
    assert_eq!(best, 10);
}

#[test]
fn early_stop_patience_bound_on_rigged_losses() {
    let losses = [5.0, 4.0, 4.0, 4.5, 3.9, 3.9, 3.95, 4.0, 4.1, 4.2, 4.3, 1.0];
    for patience in 1..=5 {
        let mut state = 0usize;
        let (best, hist) = fit_with_early_stopping(losses.len(), patience, &mut state, |s, e| {
            *s = e;
            Ok((0.0, losses[e - 1]))
        })
        .unwrap();
        assert!(hist.best_epoch <= hist.stop_epoch);
        assert!(hist.stop_epoch - hist.best_epoch <= patience);
        assert_eq!(best, hist.best_epoch);
        // equal loss is not an improvement
        assert_ne!(hist.best_epoch, 3);
    }
}

#[test]
fn non_finite_validation_aborts() {
    let mut s = ();
    let r = fit_with_early_stopping(3, 2, &mut s, |_, _| Ok((1.0, f64::NAN)));
    assert!(matches!(r, Err(Error::Numeric { .. })));
}

#[test]
fn batches_share_length_and_cover_everything() {
    let ds = toy(120, (10, 14), 3);
    let batches = equal_length_batches(&ds.samples, 8, 1);
    let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..120).collect::<Vec<_>>());
    for b in &batches {
        assert!(b.len() <= 8);
        let l = ds.samples[b[0]].trajectory.len();
        assert!(b.iter().all(|&i| ds.samples[i].trajectory.len() == l));
    }
    assert_eq!(batches, equal_length_batches(&ds.samples, 8, 1));
    assert_ne!(batches, equal_length_batches(&ds.samples, 8, 2));
}

#[test]
fn batch_gradient_chunks_sum_to_full_gradient() {
    let ds = toy(20, (12, 12), 5);
    let mc = ModelConfig {
        cnn_dropout: 0.0,
        ..ModelConfig::default()
    };
    let p = ModelParams::init(&mc, 1).unwrap();
    let members: Vec<&Sample> = ds.samples.iter().collect();
    let (loss, grads) = batch_gradients(&p, &mc, &members, 0).unwrap();
    // one graph over the whole batch
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let seqs: Vec<&[f64]> = members.iter().map(|s| s.trajectory.positions.as_slice()).collect();
    let x = g.constant(batch_tensor(&seqs).unwrap());
    let out = forward_graph(&mut g, &vars, &mc, x, true, 0).unwrap();
    let t: Vec<f64> = members.iter().map(|s| s.trajectory.alpha).collect();
    let l = g.l1_loss(out, &t).unwrap();
    g.backward(l).unwrap();
    assert!((g.value(l).data()[0] - loss).abs() < 1e-12);
    for (v, mine) in vars.0.iter().zip(&grads) {
        for (a, b) in g.grad(*v).unwrap().iter().zip(mine) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn train_once_is_deterministic_and_returns_best() {
    let ds = toy(96, (10, 16), 8);
    let cfg = TrainConfig {
        epochs: 3,
        patience: 2,
        task: Task::Model,
        learn_rate: 1e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let mc = cfg.model_config();
    let (tr, va) = (ds.split(Split::Train), ds.split(Split::Val));
    let (p1, h1) = train_once(&mc, &tr, &va, &cfg).unwrap();
    let (p2, h2) = train_once(&mc, &tr, &va, &cfg).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    assert_eq!(h1.train_loss.len(), h1.stop_epoch);
    let best_val = h1.val_loss[h1.best_epoch - 1];
    assert_eq!(mean_loss(&p1, &mc, &va).unwrap().to_bits(), best_val.to_bits());
    assert!(h1.to_csv().starts_with("epoch,train_loss,val_loss\n1,"));
}

#[test]
fn train_rejects_bad_sets() {
    let ds = toy(20, (10, 12), 8);
    let cfg = TrainConfig {
        epochs: 1,
        patience: 1,
        ..TrainConfig::default()
    };
    let mc = cfg.model_config();
    assert!(matches!(train_once(&mc, &[], &ds.samples, &cfg), Err(Error::Data(_))));
    assert!(matches!(train_once(&mc, &ds.samples, &ds.samples, &cfg), Err(Error::Data(_))));
}

#[test]
fn kfold_partition_properties() {
    let ids: Vec<usize> = (0..50).collect();
    let folds = kfold_partition(&ids, 5, 9).unwrap();
    assert!(folds.iter().all(|f| f.len() == 10));
    let mut all: Vec<usize> = folds.concat();
    all.sort_unstable();
    assert_eq!(all, ids);
    assert_eq!(folds, kfold_partition(&ids, 5, 9).unwrap());
    assert!(kfold_partition(&ids, 1, 9).is_err());
    assert!(matches!(kfold_partition(&ids[..3], 5, 9), Err(Error::Data(_))));
}

#[test]
fn kfold_constant_predictor_has_zero_spread() {
    let mut ds = toy(50, (10, 12), 2);
    for s in &mut ds.samples {
        s.trajectory.alpha = 0.5;
    }
    let report = kfold_with(&ds.samples, 5, 1, Task::Alpha, |_, tr, va, te| {
        assert_eq!(te.len(), 10);
        assert_eq!(tr.len() + va.len(), 40);
        let preds = vec![0.5; te.len()];
        let trues: Vec<f64> = te.iter().map(|s| s.trajectory.alpha).collect();
        crate::eval::mae(&preds, &trues)
    })
    .unwrap();
    assert_eq!(report.per_fold, vec![0.0; 5]);
    assert_eq!(report.std, 0.0);
    assert!(report.to_csv().contains("std,"));
}

#[test]
fn curriculum_bins_are_fixed() {
    let bins = curriculum_bins();
    assert_eq!(bins.len(), 12);
    assert_eq!(bins[0], LengthBin { lo: 10, hi: 20 });
    assert_eq!(bins[11], LengthBin { lo: 801, hi: 1000 });
    for w in bins.windows(2) {
        assert_eq!(w[0].hi + 1, w[1].lo);
    }
    assert!(LengthBin::new(5, 4).is_err());
    assert_eq!(bins[0].distance(25), 5);
    assert_eq!(bins[1].distance(15), 6);
}
