//! Sensitivity models: specs, density ratios, constraint estimators and the
//! closed-form MSM bound.

pub mod closed_form;
pub mod constraint;
pub mod rho;
pub mod spec;
pub mod weight_expr;

pub use closed_form::{closed_form_msm_bound, QuadratureConfig};
pub use constraint::{constraint_estimate, LatentShiftSample};
pub use rho::{constraint_from_log_ratios, constraint_from_mixed_log_ratios, rho_pairwise, rho_pointwise};
pub use spec::{FDivergence, SensitivityKind, SensitivitySpec};
pub use weight_expr::WeightExpr;
