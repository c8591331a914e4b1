//! Conditional rational-quadratic spline flows.

pub mod checkpoint;
pub mod conditional;
pub mod mlp;
pub mod spline;

pub use checkpoint::FlowCheckpoint;
pub use conditional::{context, std_normal_log_density, ConditionalFlow, Conditioned, FlowConfig};
pub use mlp::Mlp;
