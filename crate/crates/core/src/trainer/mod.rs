//! Optimization of the slot module and walk projections.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{config_hash, TrainConfig};
pub use optim::{clip_grad_norm, global_norm, lr_at, optimizer_step, OptimState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{loss_and_grads, Model};
use crate::slot_attention::SlotInit;
use crate::tensor::Matrix;

/// What happened on one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Mean loss over the batch, before the update.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl StepRecord {
    /// One `step<TAB>loss<TAB>lr` trace line, without the newline.
    pub fn trace_line(&self) -> String {
        format!("{}\t{}\t{}", self.step, self.loss, self.lr)
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dataset indices used at `step`; without replacement when the dataset is
/// at least as large as the batch.
pub fn batch_indices(seed: u64, step: u64, dataset_len: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, 0xba7c), step));
    if dataset_len >= batch_size {
        rand::seq::index::sample(&mut rng, dataset_len, batch_size).into_vec()
    } else {
        use rand::Rng;
        (0..batch_size).map(|_| rng.random_range(0..dataset_len)).collect()
    }
}

/// Seed of the slot noise for batch position `pos` at `step`.
pub fn slot_seed(seed: u64, step: u64, pos: usize) -> u64 {
    mix(mix(mix(seed, 0x5107), step), pos as u64)
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optim: OptimState,
    /// Completed steps.
    pub step: u64,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(config: TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::init(&config.slot, &config.walk, input_dim, config.seed)?;
        let optim = OptimState::new(
            model.tensors().iter().map(|(_, m)| m.shape()),
            config.beta1,
            config.beta2,
            config.eps_opt,
        );
        Self::assemble(config, model, optim, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Self::assemble(ckpt.config, ckpt.model, ckpt.optim, ckpt.step)
    }

    fn assemble(config: TrainConfig, model: Model, optim: OptimState, step: u64) -> Result<Self> {
        let pool = if config.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            config,
            model,
            optim,
            step,
            pool,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            optim: self.optim.clone(),
            step: self.step,
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    fn per_image(&self, data: &[Matrix], batch: &[usize]) -> Vec<Result<(f64, Vec<Matrix>)>> {
        let cfg = &self.config;
        let job = |(pos, &idx): (usize, &usize)| {
            let init = SlotInit::Train {
                seed: slot_seed(cfg.seed, self.step, pos),
            };
            loss_and_grads(&self.model, &data[idx], &cfg.slot, &cfg.walk, init)
        };
        match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().enumerate().map(job).collect()),
            None => batch.iter().enumerate().map(job).collect(),
        }
    }

    /// Runs one batch: forward, backward, clip, update.
    pub fn train_step(&mut self, data: &[Matrix]) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let step = self.step;
        let batch = batch_indices(self.config.seed, step, data.len(), self.config.batch_size);
        let results = self.per_image(data, &batch);

        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads: Vec<Matrix> = self.model.tensors().iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        for (pos, r) in results.into_iter().enumerate() {
            let (l, g) = r?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss {l} on dataset image {} (batch position {pos})", batch[pos]),
                });
            }
            loss += l * scale;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += b * scale;
                }
            }
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm, step)?;
        let clipped_norm = global_norm(&grads);
        let lr = lr_at(step, &self.config);
        let mut params = self.model.tensors_mut();
        optimizer_step(&mut params, &grads, &mut self.optim, lr, self.config.weight_decay)?;
        self.step += 1;
        Ok(StepRecord {
            step,
            loss,
            lr,
            grad_norm,
            clipped_norm,
        })
    }

    /// Trains until `until` steps are complete (capped at `total_steps`),
    /// calling `on_step` after every step.
    pub fn run(
        &mut self,
        data: &[Matrix],
        until: Option<u64>,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        let stop = until.unwrap_or(u64::MAX).min(self.config.total_steps);
        while self.step < stop {
            let rec = self.train_step(data)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }
}

/// Trains from scratch to `total_steps` and returns the final checkpoint
/// with every step record.
pub fn train(data: &[Matrix], config: &TrainConfig) -> Result<(Checkpoint, Vec<StepRecord>)> {
    let first = data.first().ok_or_else(|| Error::Config("training dataset is empty".into()))?;
    let mut t = Trainer::new(config.clone(), first.cols())?;
    let mut records = Vec::new();
    t.run(data, None, |_, r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((t.checkpoint(), records))
}
