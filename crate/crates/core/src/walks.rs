//! Cycle-consistency objectives between part features and slot representations.
//!
//! Both node sets are projected into a shared walk space, l2-normalized and
//! connected by temperature-scaled softmax transition matrices. The
//! whole→parts→whole walk is trained toward the identity; the
//! parts→whole→parts walk is trained toward a thresholded feature-feature
//! affinity computed from the raw input features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, Axis};
use crate::tensor::{Graph, Matrix, Var};

/// Similarity cutoff for the parts→whole→parts target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Every pair survives.
    None,
    /// Pairs with cosine similarity `<= value` are excluded.
    Above(f64),
}

impl Threshold {
    fn excludes(self, sim: f64) -> bool {
        match self {
            Threshold::None => false,
            Threshold::Above(g) => sim <= g,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkConfig {
    pub tau: f64,
    pub gamma: Threshold,
    pub alpha: f64,
    pub beta: f64,
    /// Width of the shared walk space.
    pub walk_dim: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            tau: 0.1,
            gamma: Threshold::Above(0.7),
            alpha: 1.0,
            beta: 1.0,
            walk_dim: 256,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        check_threshold(self.gamma)?;
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || !(self.alpha + self.beta > 0.0) {
            return Err(Error::Config(format!(
                "loss coefficients must be non-negative with a positive sum, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if self.walk_dim == 0 {
            return Err(Error::Config("walk_dim must be positive".into()));
        }
        Ok(())
    }
}

fn check_threshold(gamma: Threshold) -> Result<()> {
    if let Threshold::Above(g) = gamma {
        if !(g < 1.0) || g.is_nan() {
            return Err(Error::Config(format!(
                "similarity threshold must be below 1, got {g}"
            )));
        }
    }
    Ok(())
}

/// Linear maps from input-feature width and slot width into the walk space.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkProjection {
    pub p_x: Matrix,
    pub p_s: Matrix,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionVars {
    pub p_x: Var,
    pub p_s: Var,
}

impl WalkProjection {
    pub fn init(input_dim: usize, slot_dim: usize, walk_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bx = (6.0 / (input_dim + walk_dim) as f64).sqrt();
        let bs = (6.0 / (slot_dim + walk_dim) as f64).sqrt();
        WalkProjection {
            p_x: Matrix::random_uniform(input_dim, walk_dim, bx, &mut rng),
            p_s: Matrix::random_uniform(slot_dim, walk_dim, bs, &mut rng),
        }
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ProjectionVars {
        let mut put = |m: &Matrix| {
            if trainable {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        ProjectionVars {
            p_x: put(&self.p_x),
            p_s: put(&self.p_s),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![("walk.p_x", &self.p_x), ("walk.p_s", &self.p_s)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.p_x, &mut self.p_s]
    }
}

/// Row-stochastic transition matrix between two node sets.
pub fn adjacency(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    let na = g.l2_normalize_rows(a)?;
    let nb = g.l2_normalize_rows(b)?;
    let sim = g.matmul_t(na, nb)?;
    g.softmax(sim, Axis::Rows, tau)
}

/// Value-level [`adjacency`].
pub fn adjacency_values(a: &Matrix, b: &Matrix, tau: f64) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape("adjacency", a.shape(), b.shape()));
    }
    let sim = ops::l2_normalize_rows(a)?.matmul_t(&ops::l2_normalize_rows(b)?);
    ops::softmax(&sim, Axis::Rows, tau)
}

/// Both transition matrices between slots and features, sharing the cosine
/// similarities.
#[derive(Clone, Copy, Debug)]
pub struct Transitions {
    /// K×N, slots to features.
    pub slot_to_part: Var,
    /// N×K, features to slots.
    pub part_to_slot: Var,
}

pub fn transitions(g: &mut Graph, slots_p: Var, parts_p: Var, tau: f64) -> Result<Transitions> {
    let ns = g.l2_normalize_rows(slots_p)?;
    let nx = g.l2_normalize_rows(parts_p)?;
    let sim = g.matmul_t(nx, ns)?;
    let part_to_slot = g.softmax(sim, Axis::Rows, tau)?;
    let cols = g.softmax(sim, Axis::Cols, tau)?;
    let slot_to_part = g.transpose(cols);
    Ok(Transitions {
        slot_to_part,
        part_to_slot,
    })
}

/// Two-hop walk. The product is row-stochastic in exact arithmetic; rows are
/// renormalized so rounding cannot push a return probability above one.
fn two_hop(g: &mut Graph, first: Var, second: Var) -> Result<Var> {
    let m = g.matmul(first, second)?;
    Ok(g.normalize_rows(m, f64::MIN_POSITIVE))
}

fn wpw_from(g: &mut Graph, t: &Transitions) -> Result<Var> {
    let m = two_hop(g, t.slot_to_part, t.part_to_slot)?;
    let k = g.shape(m).0;
    g.cross_entropy_rows(m, Matrix::identity(k))
}

fn pwp_from(g: &mut Graph, t: &Transitions, target: Matrix) -> Result<Var> {
    let m = two_hop(g, t.part_to_slot, t.slot_to_part)?;
    g.cross_entropy_rows(m, target)
}

/// whole→parts→whole loss on already-projected inputs.
pub fn wpw_loss(g: &mut Graph, slots_p: Var, parts_p: Var, tau: f64) -> Result<Var> {
    let t = transitions(g, slots_p, parts_p, tau)?;
    wpw_from(g, &t)
}

/// parts→whole→parts loss against a fixed target from [`pwp_target`].
pub fn pwp_loss(g: &mut Graph, parts_p: Var, slots_p: Var, tau: f64, target: Matrix) -> Result<Var> {
    let t = transitions(g, slots_p, parts_p, tau)?;
    let n = g.shape(parts_p).0;
    if target.shape() != (n, n) {
        return Err(Error::shape("pwp_loss", target.shape(), (n, n)));
    }
    pwp_from(g, &t, target)
}

/// Feature-feature target: softmax over cosine similarities, restricted to
/// pairs above the threshold. The diagonal always survives.
pub fn pwp_target(features: &Matrix, gamma: Threshold) -> Result<Matrix> {
    check_threshold(gamma)?;
    let nf = ops::l2_normalize_rows(features)?;
    let sim = nf.matmul_t(&nf);
    let n = sim.rows();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        let row = sim.row(i);
        let keep = |j: usize| j == i || !gamma.excludes(row[j]);
        let max = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for j in (0..n).filter(|&j| keep(j)) {
            let e = (row[j] - max).exp();
            out.set(i, j, e);
            total += e;
        }
        for v in out.row_mut(i) {
            *v /= total;
        }
    }
    Ok(out)
}

/// The weighted objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct WalkLoss {
    pub total: Var,
    pub wpw: Option<Var>,
    pub pwp: Option<Var>,
}

/// `alpha · wpw + beta · pwp` on projected features and slots. A term whose
/// coefficient is zero is never built. The parts→whole→parts target is
/// computed from the raw `features` value and carries no gradient.
pub fn total_loss(
    g: &mut Graph,
    features: Var,
    slots: Var,
    proj: &ProjectionVars,
    cfg: &WalkConfig,
) -> Result<WalkLoss> {
    cfg.validate()?;
    let parts_p = g.matmul(features, proj.p_x)?;
    let slots_p = g.matmul(slots, proj.p_s)?;
    let t = transitions(g, slots_p, parts_p, cfg.tau)?;

    let wpw = if cfg.alpha > 0.0 {
        Some(wpw_from(g, &t)?)
    } else {
        None
    };
    let pwp = if cfg.beta > 0.0 {
        let target = pwp_target(g.value(features), cfg.gamma)?;
        Some(pwp_from(g, &t, target)?)
    } else {
        None
    };
    let total = match (wpw, pwp) {
        (Some(a), Some(b)) => {
            let a = g.scale(a, cfg.alpha);
            let b = g.scale(b, cfg.beta);
            g.add(a, b)?
        }
        (Some(a), None) => g.scale(a, cfg.alpha),
        (None, Some(b)) => g.scale(b, cfg.beta),
        (None, None) => unreachable!("validated: alpha + beta > 0"),
    };
    Ok(WalkLoss { total, wpw, pwp })
}
