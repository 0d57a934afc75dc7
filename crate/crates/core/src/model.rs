//! The trainable model: slot module plus walk projections.

use crate::error::{Error, Result};
use crate::slot_attention::{self, SlotConfig, SlotInit, SlotParams, SlotVars};
use crate::tensor::{Graph, Matrix, Var};
use crate::walks::{self, ProjectionVars, WalkConfig, WalkLoss, WalkProjection};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub slot: SlotParams,
    pub proj: WalkProjection,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub slot: SlotVars,
    pub proj: ProjectionVars,
}

impl ModelVars {
    /// Leaves in the order of [`Model::tensors`].
    pub fn leaves(&self) -> Vec<Var> {
        let mut v = self.slot.leaves();
        v.extend([self.proj.p_x, self.proj.p_s]);
        v
    }
}

impl Model {
    pub fn init(slot_cfg: &SlotConfig, walk_cfg: &WalkConfig, input_dim: usize, seed: u64) -> Result<Self> {
        let slot = SlotParams::init(slot_cfg, input_dim, seed)?;
        let proj = WalkProjection::init(
            input_dim,
            slot_cfg.slot_dim,
            walk_cfg.walk_dim,
            seed.wrapping_add(0x9e37_79b9_7f4a_7c15),
        );
        Ok(Model { slot, proj })
    }

    pub fn input_dim(&self) -> usize {
        self.slot.input_dim()
    }

    pub fn num_slots(&self) -> usize {
        self.slot.num_slots()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = self.slot.tensors();
        v.extend(self.proj.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.slot.tensors_mut();
        v.extend(self.proj.tensors_mut());
        v
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        ModelVars {
            slot: self.slot.register(g, trainable),
            proj: self.proj.register(g, trainable),
        }
    }

    /// Replaces every tensor from `(name, matrix)` pairs, in canonical order.
    pub fn from_tensors(template: &Model, tensors: Vec<(String, Matrix)>) -> Result<Model> {
        let mut model = template.clone();
        let names: Vec<&str> = template.tensors().iter().map(|(n, _)| *n).collect();
        if names.len() != tensors.len() {
            return Err(Error::Compatibility(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, m)), want) in model.tensors_mut().into_iter().zip(tensors).zip(names) {
            if name != want {
                return Err(Error::Compatibility(format!("expected tensor {want}, found {name}")));
            }
            if slot.shape() != m.shape() {
                return Err(Error::Compatibility(format!(
                    "tensor {name} has shape {:?}, configuration expects {:?}",
                    m.shape(),
                    slot.shape()
                )));
            }
            *slot = m;
        }
        Ok(model)
    }

    /// Checks the projection widths against the slot module.
    pub fn check_shapes(&self) -> Result<()> {
        self.slot.check_shapes()?;
        if self.proj.p_x.rows() != self.slot.input_dim()
            || self.proj.p_s.rows() != self.slot.slot_dim()
            || self.proj.p_x.cols() != self.proj.p_s.cols()
        {
            return Err(Error::shape("walk projection", self.proj.p_x.shape(), self.proj.p_s.shape()));
        }
        Ok(())
    }
}

/// Records the full objective for one feature map on `g`.
pub fn build_loss(
    g: &mut Graph,
    vars: &ModelVars,
    features: &Matrix,
    slot_cfg: &SlotConfig,
    walk_cfg: &WalkConfig,
    init: SlotInit,
) -> Result<WalkLoss> {
    let x = g.constant(features.clone());
    let enc = slot_attention::encode(g, x, &vars.slot, slot_cfg, init)?;
    walks::total_loss(g, x, enc.slots, &vars.proj, walk_cfg)
}

/// Loss value and per-tensor gradients (canonical order) for one feature map.
pub fn loss_and_grads(
    model: &Model,
    features: &Matrix,
    slot_cfg: &SlotConfig,
    walk_cfg: &WalkConfig,
    init: SlotInit,
) -> Result<(f64, Vec<Matrix>)> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, true);
    let loss = build_loss(&mut g, &vars, features, slot_cfg, walk_cfg, init)?;
    let grads = g.backward(loss.total)?;
    let out = vars.leaves().into_iter().map(|v| grads.get_or_zeros(&g, v)).collect();
    Ok((g.scalar(loss.total), out))
}

/// Loss value only.
pub fn loss_value(
    model: &Model,
    features: &Matrix,
    slot_cfg: &SlotConfig,
    walk_cfg: &WalkConfig,
    init: SlotInit,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.register(&mut g, false);
    let loss = build_loss(&mut g, &vars, features, slot_cfg, walk_cfg, init)?;
    Ok(g.scalar(loss.total))
}
