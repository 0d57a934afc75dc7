pub mod error;
pub mod features;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod slot_attention;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod walks;

pub use error::{Error, Result};
pub use features::FeatureMap;
pub use model::Model;
pub use tensor::{Axis, Graph, Matrix, Var};
