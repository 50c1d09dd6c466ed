//! CPU transformer inference with attention-driven progressive token
//! pruning.
//!
//! Prompt tokens are scored at configurable layer boundaries by how much the
//! newest token attends to them; low scorers stop being computed for the
//! rest of the step. Each decode step re-selects from the full context, and
//! previously pruned tokens are resumed from an aux cache of their hidden
//! states, so no token is ever computed twice at the same layer.

pub mod bench;
pub mod cache;
pub mod engine;
pub mod error;
pub mod model;
pub mod pruning;
pub mod reference;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{generate_random_model, load_model, Model, ModelConfig};
pub use pruning::{Policy, PruningSchedule};
