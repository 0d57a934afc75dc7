#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use partwhole::synth::{class_means, SceneConfig};
use partwhole::trainer::{OptimState, TrainConfig, Trainer};
use partwhole::{Matrix, Model};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partwhole"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn partwhole")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Small, fast training configuration for plumbing tests.
pub fn tiny_config(total_steps: u64) -> TrainConfig {
    let mut c = TrainConfig {
        total_steps,
        warmup_steps: total_steps / 4,
        batch_size: 4,
        ..TrainConfig::default()
    };
    c.slot.num_slots = 3;
    c.slot.slot_dim = 8;
    c.slot.attn_dim = 8;
    c.walk.walk_dim = 8;
    c
}

/// A checkpoint whose eval-mode slots are the class means themselves: zero
/// refinement iterations, slot width equal to the feature width and identity
/// projections into the walk space.
pub fn oracle_checkpoint(scene: &SceneConfig) -> partwhole::trainer::Checkpoint {
    let d = scene.input_dim;
    let mut cfg = TrainConfig::default();
    cfg.slot.num_slots = scene.classes;
    cfg.slot.slot_dim = d;
    cfg.slot.attn_dim = d;
    cfg.slot.iterations = 0;
    cfg.walk.walk_dim = d;
    let template = Trainer::new(cfg.clone(), d).unwrap().checkpoint();
    let mut model: Model = template.model.clone();
    model.slot.mu = class_means(scene).unwrap();
    model.proj.p_x = Matrix::identity(d);
    model.proj.p_s = Matrix::identity(d);
    let optim = OptimState::new(model.tensors().iter().map(|(_, m)| m.shape()), cfg.beta1, cfg.beta2, cfg.eps_opt);
    partwhole::trainer::Checkpoint {
        config: cfg,
        model,
        optim,
        step: 0,
    }
}
