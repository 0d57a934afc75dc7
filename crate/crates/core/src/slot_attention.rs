//! Iterative slot attention: K slots compete over N part features through a
//! softmax across slots, aggregate values with per-slot normalized weights and
//! refine themselves with a gated recurrent update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Axis, Graph, Matrix, Var};

/// Shape and numeric settings of the slot module.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotConfig {
    pub num_slots: usize,
    pub slot_dim: usize,
    /// Width of the key/query space.
    pub attn_dim: usize,
    pub iterations: usize,
    /// Floor on the per-slot attention mass when normalizing over locations.
    pub attn_eps: f64,
    pub ln_eps: f64,
    /// Initial per-coordinate standard deviation of the slot noise.
    pub init_sigma: f64,
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig {
            num_slots: 4,
            slot_dim: 256,
            attn_dim: 256,
            iterations: 3,
            attn_eps: 1e-8,
            ln_eps: 1e-5,
            init_sigma: 1.0,
        }
    }
}

impl SlotConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slots == 0 || self.slot_dim == 0 || self.attn_dim == 0 {
            return Err(Error::Config("slot count and widths must be positive".into()));
        }
        if !(self.attn_eps >= 0.0) || !(self.ln_eps > 0.0) {
            return Err(Error::Config("attention and layer-norm epsilons must be non-negative / positive".into()));
        }
        if !(self.init_sigma > 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Config("init_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// Weights of the gated recurrent cell. Input-side maps act on the aggregated
/// update, hidden-side maps on the current slot.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Matrix,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Matrix,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Matrix,
}

/// All learnable parameters of the slot module. Row-vector convention:
/// projections are applied as `x · W`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotParams {
    pub mu: Matrix,
    pub log_sigma: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub gru: GruParams,
    pub ln_input_gain: Matrix,
    pub ln_input_bias: Matrix,
    pub ln_slot_gain: Matrix,
    pub ln_slot_bias: Matrix,
}

fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::random_uniform(fan_in, fan_out, bound, rng)
}

impl SlotParams {
    /// Fresh parameters for features of width `input_dim`.
    pub fn init(cfg: &SlotConfig, input_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, ds, da) = (cfg.num_slots, cfg.slot_dim, cfg.attn_dim);
        let mu = Matrix::random_normal(k, ds, 1.0, &mut rng);
        let log_sigma = Matrix::filled(k, ds, cfg.init_sigma.ln());
        let w_q = glorot(ds, da, &mut rng);
        let w_k = glorot(input_dim, da, &mut rng);
        let w_v = glorot(input_dim, ds, &mut rng);
        let gru = GruParams {
            w_z: glorot(ds, ds, &mut rng),
            u_z: glorot(ds, ds, &mut rng),
            b_z: Matrix::zeros(1, ds),
            w_r: glorot(ds, ds, &mut rng),
            u_r: glorot(ds, ds, &mut rng),
            b_r: Matrix::zeros(1, ds),
            w_h: glorot(ds, ds, &mut rng),
            u_h: glorot(ds, ds, &mut rng),
            b_h: Matrix::zeros(1, ds),
        };
        Ok(SlotParams {
            mu,
            log_sigma,
            w_q,
            w_k,
            w_v,
            gru,
            ln_input_gain: Matrix::filled(1, input_dim, 1.0),
            ln_input_bias: Matrix::zeros(1, input_dim),
            ln_slot_gain: Matrix::filled(1, ds, 1.0),
            ln_slot_bias: Matrix::zeros(1, ds),
        })
    }

    pub fn num_slots(&self) -> usize {
        self.mu.rows()
    }

    pub fn slot_dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_k.rows()
    }

    /// Checks that every shape is consistent with `mu` and `w_k`.
    pub fn check_shapes(&self) -> Result<()> {
        let (k, ds) = self.mu.shape();
        let din = self.w_k.rows();
        let da = self.w_k.cols();
        let expect = [
            ("log_sigma", &self.log_sigma, (k, ds)),
            ("w_q", &self.w_q, (ds, da)),
            ("w_v", &self.w_v, (din, ds)),
            ("gru.w_z", &self.gru.w_z, (ds, ds)),
            ("gru.u_z", &self.gru.u_z, (ds, ds)),
            ("gru.b_z", &self.gru.b_z, (1, ds)),
            ("gru.w_r", &self.gru.w_r, (ds, ds)),
            ("gru.u_r", &self.gru.u_r, (ds, ds)),
            ("gru.b_r", &self.gru.b_r, (1, ds)),
            ("gru.w_h", &self.gru.w_h, (ds, ds)),
            ("gru.u_h", &self.gru.u_h, (ds, ds)),
            ("gru.b_h", &self.gru.b_h, (1, ds)),
            ("ln_input_gain", &self.ln_input_gain, (1, din)),
            ("ln_input_bias", &self.ln_input_bias, (1, din)),
            ("ln_slot_gain", &self.ln_slot_gain, (1, ds)),
            ("ln_slot_bias", &self.ln_slot_bias, (1, ds)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::Config(format!(
                    "slot parameter {name} has shape {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    /// Places every tensor on `g`, as trainable leaves or constants.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> SlotVars {
        let mut put = |m: &Matrix| {
            if trainable {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        SlotVars {
            mu: put(&self.mu),
            log_sigma: put(&self.log_sigma),
            w_q: put(&self.w_q),
            w_k: put(&self.w_k),
            w_v: put(&self.w_v),
            gru: GruVars {
                w_z: put(&self.gru.w_z),
                u_z: put(&self.gru.u_z),
                b_z: put(&self.gru.b_z),
                w_r: put(&self.gru.w_r),
                u_r: put(&self.gru.u_r),
                b_r: put(&self.gru.b_r),
                w_h: put(&self.gru.w_h),
                u_h: put(&self.gru.u_h),
                b_h: put(&self.gru.b_h),
            },
            ln_input_gain: put(&self.ln_input_gain),
            ln_input_bias: put(&self.ln_input_bias),
            ln_slot_gain: put(&self.ln_slot_gain),
            ln_slot_bias: put(&self.ln_slot_bias),
        }
    }

    /// Tensors in a fixed canonical order, with stable names.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("slot.mu", &self.mu),
            ("slot.log_sigma", &self.log_sigma),
            ("slot.w_q", &self.w_q),
            ("slot.w_k", &self.w_k),
            ("slot.w_v", &self.w_v),
            ("slot.gru.w_z", &self.gru.w_z),
            ("slot.gru.u_z", &self.gru.u_z),
            ("slot.gru.b_z", &self.gru.b_z),
            ("slot.gru.w_r", &self.gru.w_r),
            ("slot.gru.u_r", &self.gru.u_r),
            ("slot.gru.b_r", &self.gru.b_r),
            ("slot.gru.w_h", &self.gru.w_h),
            ("slot.gru.u_h", &self.gru.u_h),
            ("slot.gru.b_h", &self.gru.b_h),
            ("slot.ln_input_gain", &self.ln_input_gain),
            ("slot.ln_input_bias", &self.ln_input_bias),
            ("slot.ln_slot_gain", &self.ln_slot_gain),
            ("slot.ln_slot_bias", &self.ln_slot_bias),
        ]
    }

    /// Mutable tensors, same order as [`SlotParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.mu,
            &mut self.log_sigma,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.gru.w_z,
            &mut self.gru.u_z,
            &mut self.gru.b_z,
            &mut self.gru.w_r,
            &mut self.gru.u_r,
            &mut self.gru.b_r,
            &mut self.gru.w_h,
            &mut self.gru.u_h,
            &mut self.gru.b_h,
            &mut self.ln_input_gain,
            &mut self.ln_input_bias,
            &mut self.ln_slot_gain,
            &mut self.ln_slot_bias,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn leaves(&self) -> [Var; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h,
        ]
    }
}

/// Graph handles for [`SlotParams`].
#[derive(Clone, Copy, Debug)]
pub struct SlotVars {
    pub mu: Var,
    pub log_sigma: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gru: GruVars,
    pub ln_input_gain: Var,
    pub ln_input_bias: Var,
    pub ln_slot_gain: Var,
    pub ln_slot_bias: Var,
}

impl SlotVars {
    /// Leaves in the order of [`SlotParams::tensors`].
    pub fn leaves(&self) -> Vec<Var> {
        let mut v = vec![self.mu, self.log_sigma, self.w_q, self.w_k, self.w_v];
        v.extend(self.gru.leaves());
        v.extend([
            self.ln_input_gain,
            self.ln_input_bias,
            self.ln_slot_gain,
            self.ln_slot_bias,
        ]);
        v
    }
}

/// How the initial slots are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotInit {
    /// `μ + exp(logσ) ⊙ ε` with `ε` drawn from the seed.
    Train { seed: u64 },
    /// Exactly `μ`.
    Eval,
}

/// Initial slots on the graph. The noise is a constant so gradients reach
/// both `μ` and `logσ`.
pub fn init_slots(g: &mut Graph, vars: &SlotVars, init: SlotInit) -> Result<Var> {
    match init {
        SlotInit::Eval => Ok(vars.mu),
        SlotInit::Train { seed } => {
            let (k, d) = g.shape(vars.mu);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Matrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = g.constant(noise);
            let sigma = g.exp(vars.log_sigma);
            let jitter = g.mul(sigma, noise)?;
            g.add(vars.mu, jitter)
        }
    }
}

/// Per-encode projections of the (layer-normalized) inputs.
#[derive(Clone, Copy, Debug)]
pub struct ProjectedInputs {
    pub keys: Var,
    pub values: Var,
}

impl ProjectedInputs {
    pub fn new(g: &mut Graph, x: Var, vars: &SlotVars, cfg: &SlotConfig) -> Result<Self> {
        let xn = g.layer_norm_rows(x, vars.ln_input_gain, vars.ln_input_bias, cfg.ln_eps)?;
        let keys = g.matmul(xn, vars.w_k)?;
        let values = g.matmul(xn, vars.w_v)?;
        Ok(ProjectedInputs { keys, values })
    }
}

/// Result of one attention pass.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    /// N×K, softmax over slots.
    pub attn: Var,
    /// N×K, attention normalized over locations.
    pub weights: Var,
    /// K×D_slot aggregated updates.
    pub updates: Var,
}

pub fn attention_step(
    g: &mut Graph,
    inputs: &ProjectedInputs,
    slots: Var,
    vars: &SlotVars,
    cfg: &SlotConfig,
) -> Result<AttentionState> {
    let sn = g.layer_norm_rows(slots, vars.ln_slot_gain, vars.ln_slot_bias, cfg.ln_eps)?;
    let q = g.matmul(sn, vars.w_q)?;
    let logits = g.matmul_t(inputs.keys, q)?;
    let da = g.shape(q).1 as f64;
    let logits = g.scale(logits, 1.0 / da.sqrt());
    let attn = g.softmax(logits, Axis::Rows, 1.0)?;
    let weights = g.normalize_cols(attn, cfg.attn_eps);
    let wt = g.transpose(weights);
    let updates = g.matmul(wt, inputs.values)?;
    Ok(AttentionState {
        attn,
        weights,
        updates,
    })
}

/// One gated recurrent step, applied row-wise.
pub fn gru_update(g: &mut Graph, slots: Var, updates: Var, gru: &GruVars) -> Result<Var> {
    if g.shape(slots) != g.shape(updates) {
        return Err(Error::shape("gru_update", g.shape(slots), g.shape(updates)));
    }
    let gate = |g: &mut Graph, w: Var, u: Var, b: Var, hidden: Var| -> Result<Var> {
        let a = g.matmul(updates, w)?;
        let h = g.matmul(hidden, u)?;
        let s = g.add(a, h)?;
        g.add_row(s, b)
    };
    let z = gate(g, gru.w_z, gru.u_z, gru.b_z, slots)?;
    let z = g.sigmoid(z);
    let r = gate(g, gru.w_r, gru.u_r, gru.b_r, slots)?;
    let r = g.sigmoid(r);
    let reset = g.mul(r, slots)?;
    let cand = gate(g, gru.w_h, gru.u_h, gru.b_h, reset)?;
    let cand = g.tanh(cand);
    let delta = g.sub(cand, slots)?;
    let step = g.mul(z, delta)?;
    g.add(slots, step)
}

/// Output of [`encode`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub slots: Var,
    pub initial: Var,
    /// Attention of the last iteration; `None` when `iterations == 0`.
    pub last: Option<AttentionState>,
}

/// Runs `cfg.iterations` rounds of attention and recurrent refinement.
pub fn encode(
    g: &mut Graph,
    x: Var,
    vars: &SlotVars,
    cfg: &SlotConfig,
    init: SlotInit,
) -> Result<Encoded> {
    let (_, din) = g.shape(x);
    if din != g.shape(vars.w_k).0 {
        return Err(Error::shape("encode", g.shape(x), g.shape(vars.w_k)));
    }
    let initial = init_slots(g, vars, init)?;
    let inputs = ProjectedInputs::new(g, x, vars, cfg)?;
    let mut slots = initial;
    let mut last = None;
    for _ in 0..cfg.iterations {
        let state = attention_step(g, &inputs, slots, vars, cfg)?;
        slots = gru_update(g, slots, state.updates, &vars.gru)?;
        last = Some(state);
    }
    Ok(Encoded {
        slots,
        initial,
        last,
    })
}

/// Value-level slot output for inference.
#[derive(Clone, Debug)]
pub struct SlotOutput {
    pub slots: Matrix,
    pub attn: Option<Matrix>,
    pub weights: Option<Matrix>,
}

/// Evaluates [`encode`] without tracking gradients.
pub fn encode_values(
    params: &SlotParams,
    cfg: &SlotConfig,
    x: &Matrix,
    init: SlotInit,
) -> Result<SlotOutput> {
    let mut g = Graph::new();
    let vars = params.register(&mut g, false);
    let xv = g.constant(x.clone());
    let enc = encode(&mut g, xv, &vars, cfg, init)?;
    Ok(SlotOutput {
        slots: g.value(enc.slots).clone(),
        attn: enc.last.map(|s| g.value(s.attn).clone()),
        weights: enc.last.map(|s| g.value(s.weights).clone()),
    })
}
