//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::slot_attention::SlotConfig;
use crate::walks::{Threshold, WalkConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub decay_half_life_steps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_interval: u64,
    pub workers: usize,
    pub walk: WalkConfig,
    pub slot: SlotConfig,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: three slots, all widths 32.
    fn default() -> Self {
        TrainConfig {
            base_lr: 4e-4,
            warmup_steps: 200,
            total_steps: 2000,
            decay_half_life_steps: 100_000.0,
            clip_norm: 1.0,
            batch_size: 16,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            seed: 0,
            checkpoint_interval: 0,
            workers: 1,
            walk: WalkConfig {
                walk_dim: 32,
                ..WalkConfig::default()
            },
            slot: SlotConfig {
                num_slots: 3,
                slot_dim: 32,
                attn_dim: 32,
                ..SlotConfig::default()
            },
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: 250k steps, batch 128, 5000 warmup steps, widths 256.
    pub fn full_scale() -> Self {
        TrainConfig {
            warmup_steps: 5000,
            total_steps: 250_000,
            batch_size: 128,
            walk: WalkConfig::default(),
            slot: SlotConfig::default(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("base_lr and weight_decay must be non-negative".into()));
        }
        if !(self.decay_half_life_steps > 0.0) {
            return Err(Error::Config("decay_half_life_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_opt > 0.0) {
            return Err(Error::Config("beta1, beta2 must lie in [0, 1) and eps_opt be positive".into()));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size and workers must be positive".into()));
        }
        self.walk.validate()?;
        self.slot.validate()
    }

    /// Canonical text: every key, one per line, in a fixed order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("writing to a String");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let gamma = match self.walk.gamma {
            Threshold::None => "none".to_string(),
            Threshold::Above(g) => g.to_string(),
        };
        vec![
            ("base_lr", self.base_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("decay_half_life_steps", self.decay_half_life_steps.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps_opt", self.eps_opt.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("workers", self.workers.to_string()),
            ("tau", self.walk.tau.to_string()),
            ("gamma", gamma),
            ("alpha", self.walk.alpha.to_string()),
            ("beta", self.walk.beta.to_string()),
            ("walk_dim", self.walk.walk_dim.to_string()),
            ("num_slots", self.slot.num_slots.to_string()),
            ("slot_dim", self.slot.slot_dim.to_string()),
            ("attn_dim", self.slot.attn_dim.to_string()),
            ("iterations", self.slot.iterations.to_string()),
            ("attn_eps", self.slot.attn_eps.to_string()),
            ("ln_eps", self.slot.ln_eps.to_string()),
            ("init_sigma", self.slot.init_sigma.to_string()),
        ]
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                detail: format!("expected `key = value`, found `{content}`"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|detail| Error::Parse { line, detail })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for {key}"))
        }
        match key {
            "base_lr" => self.base_lr = num(key, value)?,
            "warmup_steps" => self.warmup_steps = num(key, value)?,
            "total_steps" => self.total_steps = num(key, value)?,
            "decay_half_life_steps" => self.decay_half_life_steps = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps_opt" => self.eps_opt = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "tau" => self.walk.tau = num(key, value)?,
            "gamma" => {
                self.walk.gamma = if value.eq_ignore_ascii_case("none") {
                    Threshold::None
                } else {
                    Threshold::Above(num(key, value)?)
                }
            }
            "alpha" => self.walk.alpha = num(key, value)?,
            "beta" => self.walk.beta = num(key, value)?,
            "walk_dim" => self.walk.walk_dim = num(key, value)?,
            "num_slots" => self.slot.num_slots = num(key, value)?,
            "slot_dim" => self.slot.slot_dim = num(key, value)?,
            "attn_dim" => self.slot.attn_dim = num(key, value)?,
            "iterations" => self.slot.iterations = num(key, value)?,
            "attn_eps" => self.slot.attn_eps = num(key, value)?,
            "ln_eps" => self.slot.ln_eps = num(key, value)?,
            "init_sigma" => self.slot.init_sigma = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// First eight bytes of the SHA-256 of [`TrainConfig::render`].
    pub fn hash(&self) -> u64 {
        config_hash(&self.render())
    }
}

pub fn config_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = TrainConfig::full_scale();
        cfg.walk.gamma = Threshold::None;
        cfg.base_lr = 1.0 / 3.0;
        let back = TrainConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = TrainConfig::parse("# header\n\nnum_slots = 7   # coco-like\n  alpha=0\n").unwrap();
        assert_eq!(cfg.slot.num_slots, 7);
        assert_eq!(cfg.walk.alpha, 0.0);
        assert_eq!(cfg.walk.tau, 0.1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match TrainConfig::parse("seed = 1\nbogus = 3\n") {
            Err(Error::Parse { line: 2, detail }) => assert!(detail.contains("bogus")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(TrainConfig::parse("\n\nseed 4"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(TrainConfig::parse("tau = fast"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn invariants_are_enforced() {
        assert!(matches!(TrainConfig::parse("warmup_steps = 10\ntotal_steps = 5"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("clip_norm = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        b.slot.ln_eps = 1e-6;
        assert_ne!(a.hash(), b.hash());
    }
}
