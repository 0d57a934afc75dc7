//! Training on the default synthetic scenes lowers the objective.

use partwhole::model::loss_value;
use partwhole::slot_attention::SlotInit;
use partwhole::synth::{generate_dataset, SceneConfig};
use partwhole::trainer::{train, TrainConfig};
use partwhole::walks::pwp_target;
use partwhole::{Matrix, Model};

fn row_entropy(m: &Matrix) -> f64 {
    let h: f64 = m.data().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    h / m.rows() as f64
}

fn mean_loss(model: &Model, data: &[Matrix], cfg: &TrainConfig) -> f64 {
    let total: f64 = data
        .iter()
        .map(|x| loss_value(model, x, &cfg.slot, &cfg.walk, SlotInit::Eval).unwrap())
        .sum();
    total / data.len() as f64
}

// The pwp cross-entropy cannot go below the entropy of its target, so the
// reduction is measured on the excess over that floor.
#[test]
fn excess_loss_halves_over_desk_run() {
    let scenes = generate_dataset(&SceneConfig::default(), 7, 200).unwrap();
    let data: Vec<Matrix> = scenes.into_iter().map(|s| s.features).collect();
    let cfg = TrainConfig::default();
    let floor = cfg.walk.beta
        * data
            .iter()
            .map(|x| row_entropy(&pwp_target(x, cfg.walk.gamma).unwrap()))
            .sum::<f64>()
        / data.len() as f64;

    let initial = Model::init(&cfg.slot, &cfg.walk, 32, cfg.seed).unwrap();
    let before = mean_loss(&initial, &data, &cfg);
    let (ck, records) = train(&data, &cfg).unwrap();
    let after = mean_loss(&ck.model, &data, &cfg);

    assert_eq!(records.len(), 2000);
    assert!(records.iter().all(|r| r.loss.is_finite()));
    assert!(after < before, "{before} -> {after}");
    assert!(
        after - floor <= 0.5 * (before - floor),
        "floor {floor:.4}, before {before:.4}, after {after:.4}"
    );
}
