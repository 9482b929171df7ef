//! Flow Matching on low-dimensional Gaussian-mixture tasks with pluggable
//! source/target couplings: random, exact minibatch OT, Sinkhorn OT, and
//! model-aligned couplings scored by the network's own prediction error.

pub mod cli;
pub mod coupling;
pub mod distributions;
pub mod error;
pub mod field;
pub mod metrics;
pub mod net;
pub mod objectives;
pub mod par;
pub mod sampler;
pub mod trainer;

pub use coupling::{CouplingBatch, CostMatrix, ScoreMode, SinkhornParams, Strategy, TransportPlan};
pub use distributions::{GaussianMixture, SampleBatch};
pub use error::{Error, Result};
pub use field::VelocityField;
pub use net::{AdamState, Architecture, EmaParams, Params, VectorFieldNet};
pub use objectives::{LossBreakdown, ShortcutDraw, ShortcutParams};
