use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::trajgen::generate;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut r))
}

#[test]
fn default_parameter_counts() {
    // conv 1*3*20+20 + 20*3*64+64; per block 4*(64*64+64) + 2*(2*64)
    // + (64*256+256) + (256*64+64); head 64*k+k
    let block = 4 * (64 * 64 + 64) + 4 * 64 + (64 * 256 + 256) + (256 * 64 + 64);
    let base = (3 * 20 + 20) + (20 * 3 * 64 + 64) + 2 * block;
    assert_eq!(ModelConfig::default().param_count(), base + 65);
    assert_eq!(ModelConfig::default().param_count(), 104_017);
    assert_eq!(ModelConfig::for_task(Task::Model).param_count(), base + 5 * 64 + 5);
    let p = ModelParams::init(&ModelConfig::default(), 1).unwrap();
    assert_eq!(p.count(), 104_017);
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    c.heads = 7;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = ModelConfig::default();
    c.head_out = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    assert!(ModelParams::init(&c, 0).is_err());
}

#[test]
fn shape_contract() {
    let c = ModelConfig::default();
    let p = ModelParams::init(&c, 3).unwrap();
    let y = forward(&p, &c, &randn(&[1, 1, 10], 1), false, 0).unwrap();
    assert_eq!(y.shape(), &[1, 1]);
    let cm = ModelConfig::for_task(Task::Model);
    let pm = ModelParams::init(&cm, 3).unwrap();
    let y = forward(&pm, &cm, &randn(&[3, 1, 37], 1), true, 9).unwrap();
    assert_eq!(y.shape(), &[3, 5]);

    let mut g = Graph::inference();
    let vars = p.bind(&mut g);
    let x = g.constant(randn(&[2, 1, 11], 2));
    let seq = conv_stage(&mut g, &vars, &c, x, false, 0).unwrap();
    assert_eq!(g.shape(seq), &[2, 5, 64]);
}

#[test]
fn too_short_input() {
    let c = ModelConfig::default();
    let p = ModelParams::init(&c, 3).unwrap();
    let err = forward(&p, &c, &randn(&[1, 1, 9], 1), false, 0).unwrap_err();
    assert!(matches!(err, Error::TooShort { length: 9, minimum: 10 }));
}

#[test]
fn non_finite_names_layer() {
    let c = ModelConfig::default();
    let mut p = ModelParams::init(&c, 3).unwrap();
    p.get_mut("block1.ffn1.weight").unwrap().data_mut().fill(1e308);
    match forward(&p, &c, &randn(&[1, 1, 20], 1), false, 0) {
        Err(Error::Numeric { location, .. }) => assert!(location.starts_with("block1"), "{location}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn zero_head_predictions() {
    let traj = generate(DiffusionModel::Fbm, 0.7, 50, 4).unwrap();
    let c = ModelConfig::default();
    let mut p = ModelParams::init(&c, 5).unwrap();
    p.zero_head();
    assert_eq!(predict_alpha(&p, &c, &traj).unwrap(), 0.0);
    assert!(matches!(predict_model(&p, &c, &traj), Err(Error::Config(_))));

    let cm = ModelConfig::for_task(Task::Model);
    let mut pm = ModelParams::init(&cm, 5).unwrap();
    pm.zero_head();
    let (label, probs) = predict_model(&pm, &cm, &traj).unwrap();
    assert_eq!(label, DiffusionModel::Attm);
    assert!(probs.iter().all(|&q| (q - 0.2).abs() < 1e-15));
    assert!(matches!(predict_alpha(&pm, &cm, &traj), Err(Error::Config(_))));
}

#[test]
fn probabilities_normalized() {
    let cm = ModelConfig::for_task(Task::Model);
    let pm = ModelParams::init(&cm, 6).unwrap();
    let seqs: Vec<Vec<f64>> = (0..200).map(|i| randn(&[10 + i % 7], i as u64).into_data()).collect();
    let refs: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
    for row in predict_raw(&pm, &cm, &refs, 32).unwrap() {
        let (_, probs) = class_probabilities(&row);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn predict_raw_matches_single_forward() {
    let c = ModelConfig::default();
    let p = ModelParams::init(&c, 8).unwrap();
    let seqs: Vec<Vec<f64>> = (0..9).map(|i| randn(&[10 + i % 3], i as u64).into_data()).collect();
    let refs: Vec<&[f64]> = seqs.iter().map(|s| s.as_slice()).collect();
    let batched = predict_raw(&p, &c, &refs, 2).unwrap();
    for (s, row) in refs.iter().zip(&batched) {
        let single = forward(&p, &c, &batch_tensor(&[s]).unwrap(), false, 0).unwrap();
        assert_eq!(single.data(), row.as_slice());
    }
}

#[test]
fn checkpoint_round_trip_bit_exact() {
    let c = ModelConfig::for_task(Task::Model);
    let p = ModelParams::init(&c, 11).unwrap();
    let x = randn(&[2, 1, 24], 3);
    let before = forward(&p, &c, &x, false, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&Checkpoint::new(c.clone(), p.clone(), 11), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.seed, 11);
    assert_eq!(loaded.config, c);
    assert_eq!(loaded.params, p);
    let after = forward(&loaded.params, &loaded.config, &x, false, 0).unwrap();
    assert_eq!(
        before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn corrupt_checkpoints_rejected() {
    let c = ModelConfig::default();
    let bytes = Checkpoint::new(c.clone(), ModelParams::init(&c, 1).unwrap(), 1).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn positional_encoding_toggle() {
    let c = ModelConfig::default();
    assert_eq!(c.positional_encoding_ablation(false), c);
    let on = c.positional_encoding_ablation(true);
    assert_eq!(on.positional_encoding, PositionalEncoding::Sinusoidal);
    let p = ModelParams::init(&c, 2).unwrap();
    let x = randn(&[1, 1, 16], 1);
    let a = forward(&p, &c, &x, false, 0).unwrap();
    let b = forward(&p, &on, &x, false, 0).unwrap();
    assert_ne!(a, b);
}

#[test]
fn model_card_fields() {
    let card = ModelCard {
        config: ModelConfig::default(),
        seed: 42,
        manifest_sha256: "abc".into(),
        length_bin: Some((10, 20)),
        param_digest: "d".into(),
        notes: vec![],
    };
    let text = card.render();
    assert!(text.contains("training_seed: 42"));
    assert!(text.contains("length_bin: 10-20"));
    assert!(text.contains("dataset_manifest_sha256: abc"));
    assert!(text.contains("\"heads\":16"));
}
