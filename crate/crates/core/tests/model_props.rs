//! Model behaviour over the whole (model, α) stratum sweep.

use convtrans::model::{predict_alpha, predict_model, ModelConfig, ModelParams, Task};
use convtrans::trajgen::{default_alpha_grid, generate, normalize, DiffusionModel};

fn sweep() -> Vec<convtrans::trajgen::Trajectory> {
    let mut out = Vec::new();
    for (k, m) in DiffusionModel::ALL.into_iter().enumerate() {
        for (j, a) in default_alpha_grid().into_iter().enumerate() {
            if m.admits(a) {
                // Short sub-diffusive paths can be constant; redraw those.
                let t = (0..)
                    .find_map(|r: u64| {
                        let seed = (k * 100 + j) as u64 + 1000 * r;
                        normalize(&generate(m, a, 10 + 7 * j, seed).unwrap()).ok()
                    })
                    .unwrap();
                out.push(t);
            }
        }
    }
    out
}

#[test]
fn outputs_are_finite_for_every_admissible_stratum() {
    let trajs = sweep();
    assert_eq!(trajs.len(), 138);
    let reg = ModelConfig::for_task(Task::Alpha);
    let rp = ModelParams::init(&reg, 1).unwrap();
    let cls = ModelConfig::for_task(Task::Model);
    let cp = ModelParams::init(&cls, 1).unwrap();
    for t in &trajs {
        let a = predict_alpha(&rp, &reg, t).unwrap();
        assert!(a.is_finite(), "{:?} α={} L={}", t.model, t.alpha, t.len());
        let (_, probs) = predict_model(&cp, &cls, t).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_head_predicts_zero_and_uniform() {
    let reg = ModelConfig::for_task(Task::Alpha);
    let mut rp = ModelParams::init(&reg, 2).unwrap();
    rp.zero_head();
    let cls = ModelConfig::for_task(Task::Model);
    let mut cp = ModelParams::init(&cls, 2).unwrap();
    cp.zero_head();
    for t in sweep().iter().step_by(17) {
        assert_eq!(predict_alpha(&rp, &reg, t).unwrap(), 0.0);
        let (label, probs) = predict_model(&cp, &cls, t).unwrap();
        assert_eq!(label, DiffusionModel::Attm);
        assert!(probs.iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }
}

#[test]
fn task_mismatch_is_rejected() {
    let cls = ModelConfig::for_task(Task::Model);
    let cp = ModelParams::init(&cls, 2).unwrap();
    let t = generate(DiffusionModel::Fbm, 1.0, 20, 0).unwrap();
    assert!(predict_alpha(&cp, &cls, &t).is_err());
    let reg = ModelConfig::for_task(Task::Alpha);
    let rp = ModelParams::init(&reg, 2).unwrap();
    assert!(predict_model(&rp, &reg, &t).is_err());
}
