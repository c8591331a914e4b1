//! Causal query functionals, their second-stage losses, evaluation and
//! bound composition.

pub mod compose;
pub mod evaluate;
pub mod loss;
pub mod spec;

pub use compose::{average_bounds, difference_bounds};
pub use evaluate::{apply_functional, evaluate_query, shifted_log_prob, shifted_outcomes, QueryValue};
pub use spec::{Direction, Functional, Interval, QuerySpec};
