//! Learning-rate schedule, gradient clipping and AdamW.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::config::TrainConfig;

/// Linear warmup to `base_lr`, then exponential decay with the configured
/// half-life.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.base_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        let after = (step - cfg.warmup_steps) as f64;
        cfg.base_lr * 0.5f64.powf(after / cfg.decay_half_life_steps)
    }
}

pub fn global_norm(grads: &[Matrix]) -> f64 {
    grads.iter().map(Matrix::frobenius_norm_sq).sum::<f64>().sqrt()
}

/// Scales all gradients by `clip_norm / norm` when the global l2 norm exceeds
/// `clip_norm`. Returns the norm observed before scaling.
pub fn clip_grad_norm(grads: &mut [Matrix], clip_norm: f64, step: u64) -> Result<f64> {
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: format!("gradient norm is {norm}"),
        });
    }
    if norm > clip_norm {
        let s = clip_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(norm)
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    /// Number of updates applied so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c)))
            .unzip();
        OptimState {
            m,
            v,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay:
/// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`.
pub fn optimizer_step(params: &mut [&mut Matrix], grads: &[Matrix], state: &mut OptimState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "optimizer got {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
        }
    }
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = p.data_mut();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= lr * weight_decay * p[j] + lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn full() -> TrainConfig {
        TrainConfig::full_scale()
    }

    #[test]
    fn schedule_examples() {
        let cfg = full();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(5000, &cfg), 0.0004);
        assert_eq!(lr_at(2500, &cfg), 0.0002);
        assert!((lr_at(105_000, &cfg) - 0.0002).abs() < 1e-18);
        let left = cfg.base_lr * (cfg.warmup_steps as f64 - 1e-9) / cfg.warmup_steps as f64;
        assert!((left - lr_at(cfg.warmup_steps, &cfg)).abs() < 1e-15);
    }

    #[test]
    fn zero_warmup_starts_at_base() {
        let cfg = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(0, &cfg), cfg.base_lr);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![Matrix::row_vector(&[0.3, 0.4]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0, 0).unwrap(), 0.5);
        assert_eq!(g[0].data(), &[0.3, 0.4]);

        let mut g = vec![Matrix::row_vector(&[1.2]).unwrap(), Matrix::row_vector(&[-1.6]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0, 0).unwrap(), 2.0);
        assert_eq!(g[0].data(), &[0.6]);
        assert_eq!(g[1].data(), &[-0.8]);

        let mut g = vec![Matrix::zeros(2, 2)];
        assert_eq!(clip_grad_norm(&mut g, 1.0, 0).unwrap(), 0.0);
        assert_eq!(g[0], Matrix::zeros(2, 2));
    }

    #[test]
    fn nan_gradient_diverges() {
        let g = Matrix::from_raw(1, 2, vec![1.0, f64::NAN]);
        match clip_grad_norm(&mut [g], 1.0, 17) {
            Err(Error::Divergence { step: 17, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Matrix::row_vector(&[1.0, -2.0]).unwrap();
        let mut st = OptimState::new([(1, 2)], 0.9, 0.999, 1e-8);
        st.m[0] = Matrix::row_vector(&[0.5, 0.5]).unwrap();
        optimizer_step(&mut [&mut p], &[Matrix::zeros(1, 2)], &mut st, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.m[0].data(), &[0.45, 0.45]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // After bias correction m̂ = g and v̂ = g², so Δ = lr·g/(|g| + ε).
        for &g in &[0.37, -2.5, 1e-3] {
            let mut p = Matrix::row_vector(&[0.8]).unwrap();
            let mut st = OptimState::new([(1, 1)], 0.9, 0.999, 1e-8);
            let lr = 0.01;
            optimizer_step(&mut [&mut p], &[Matrix::row_vector(&[g]).unwrap()], &mut st, lr, 0.0).unwrap();
            let want = 0.8 - lr * g / (f64::abs(g) + 1e-8);
            assert!((p.get(0, 0) - want).abs() < 1e-15, "{} vs {want}", p.get(0, 0));
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = Matrix::row_vector(&[2.0]).unwrap();
        let mut st = OptimState::new([(1, 1)], 0.9, 0.999, 1e-8);
        optimizer_step(&mut [&mut p], &[Matrix::zeros(1, 1)], &mut st, 0.1, 0.5).unwrap();
        assert!((p.get(0, 0) - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(vals in prop::collection::vec(-50.0f64..50.0, 1..30), clip in 0.01f64..5.0) {
            let mut g = vec![Matrix::row_vector(&vals).unwrap()];
            clip_grad_norm(&mut g, clip, 0).unwrap();
            prop_assert!(global_norm(&g) <= clip + 1e-9);
        }

        #[test]
        fn schedule_is_non_negative_and_bounded(step in 0u64..1_000_000) {
            let cfg = full();
            let lr = lr_at(step, &cfg);
            prop_assert!((0.0..=cfg.base_lr).contains(&lr));
        }
    }
}
