//! End-to-end finite-difference verification of the training objective.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{loss_and_grads, loss_value, Model};
use crate::slot_attention::{SlotConfig, SlotInit};
use crate::tensor::Matrix;
use crate::walks::{Threshold, WalkConfig};

/// Parameters of one check. Defaults: N=12, K=3, all widths 8, T=2.
#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub num_parts: usize,
    pub num_slots: usize,
    pub dim: usize,
    pub iterations: usize,
    pub seed: u64,
    pub step: f64,
    pub tol: f64,
    pub walk: WalkConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            num_parts: 12,
            num_slots: 3,
            dim: 8,
            iterations: 2,
            seed: 0,
            step: 1e-5,
            tol: 1e-3,
            walk: WalkConfig {
                tau: 0.1,
                gamma: Threshold::Above(0.7),
                alpha: 1.0,
                beta: 1.0,
                walk_dim: 8,
            },
        }
    }
}

/// Gradients smaller than this in both routes are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: &'static str,
    pub count: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub loss: f64,
    pub groups: Vec<GroupResult>,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error <= self.tol)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "loss\t{:.12}", self.loss)?;
        for g in &self.groups {
            let verdict = if g.max_rel_error <= self.tol { "ok" } else { "FAIL" };
            writeln!(f, "{}\t{}\t{:.3e}\t{verdict}", g.name, g.count, g.max_rel_error)?;
        }
        write!(
            f,
            "max\t{:.3e}\ttol {:.1e}\t{}",
            self.max_rel_error(),
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Parameter group a canonical tensor name belongs to.
fn group_of(name: &str) -> &'static str {
    match name {
        "slot.mu" => "mu",
        "slot.log_sigma" => "log_sigma",
        "slot.w_q" | "slot.w_k" | "slot.w_v" => "qkv",
        "walk.p_x" => "p_x",
        "walk.p_s" => "p_s",
        n if n.starts_with("slot.gru.") => "gru",
        n if n.starts_with("slot.ln_") => "layer_norm",
        _ => "other",
    }
}

const GROUPS: [&str; 7] = ["mu", "log_sigma", "qkv", "gru", "layer_norm", "p_x", "p_s"];

/// Builds the random instance a check runs on.
pub fn instance(cfg: &GradcheckConfig) -> Result<(Model, Matrix, SlotConfig)> {
    let slot_cfg = SlotConfig {
        num_slots: cfg.num_slots,
        slot_dim: cfg.dim,
        attn_dim: cfg.dim,
        iterations: cfg.iterations,
        ..SlotConfig::default()
    };
    let walk = WalkConfig {
        walk_dim: cfg.walk.walk_dim,
        ..cfg.walk.clone()
    };
    let mut model = Model::init(&slot_cfg, &walk, cfg.dim, cfg.seed)?;
    // Perturb the layer norms away from their identity initialization so
    // their gradients are exercised in general position.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    for m in [
        &mut model.slot.ln_input_gain,
        &mut model.slot.ln_input_bias,
        &mut model.slot.ln_slot_gain,
        &mut model.slot.ln_slot_bias,
    ] {
        let noise = Matrix::random_normal(1, m.cols(), 0.2, &mut rng);
        *m = m.zip_map(&noise, |a, b| a + b)?;
    }
    let features = Matrix::random_normal(cfg.num_parts, cfg.dim, 1.0, &mut rng);
    Ok((model, features, slot_cfg))
}

/// Compares reverse-mode gradients of the full objective against central
/// differences for every parameter entry.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (model, features, slot_cfg) = instance(cfg)?;
    let init = SlotInit::Train { seed: cfg.seed.wrapping_add(1) };
    let walk = &cfg.walk;
    let (loss, grads) = loss_and_grads(&model, &features, &slot_cfg, walk, init)?;

    let mut groups: Vec<GroupResult> = GROUPS
        .iter()
        .map(|&name| GroupResult {
            name,
            count: 0,
            max_rel_error: 0.0,
        })
        .collect();

    let names: Vec<&'static str> = model.tensors().iter().map(|(n, _)| *n).collect();
    for (t, name) in names.iter().enumerate() {
        let group = groups
            .iter_mut()
            .find(|g| g.name == group_of(name))
            .expect("every tensor maps to a group");
        let len = grads[t].len();
        for e in 0..len {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = model.clone();
                m.tensors_mut()[t].data_mut()[e] += delta;
                loss_value(&m, &features, &slot_cfg, walk, init)
            };
            let numeric = (eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step);
            let err = relative_error(grads[t].data()[e], numeric);
            group.count += 1;
            group.max_rel_error = group.max_rel_error.max(err);
        }
    }
    Ok(GradcheckReport {
        loss,
        groups,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn every_tensor_has_a_group() {
        let (model, _, _) = instance(&GradcheckConfig::default()).unwrap();
        for (name, _) in model.tensors() {
            assert_ne!(group_of(name), "other", "{name}");
        }
    }
}
