//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough saved state to run its local backward rule. Nodes are
//! appended in topological order, so [`Graph::backward`] is a single reverse
//! sweep. Trainable weights live outside the tape in a [`ParamStore`]; a
//! fresh graph is built for every forward pass and binds parameters by name.

mod adamw;
mod gradcheck;
mod graph;
mod tensor;

pub use adamw::{adamw_update, AdamW, AdamWConfig};
pub use gradcheck::{grad_check, primitive_suite, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{BatchStats, BnUpdate, Gradients, Graph, Var};
pub use tensor::{Param, ParamStore, Tensor};
