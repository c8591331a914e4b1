//! Second stage: the constrained latent shift that extremises a query,
//! trained with an augmented Lagrangian.

pub mod bounds;
pub mod trainer;

pub use bounds::{compute_bounds, BoundsResult};
pub use trainer::{
    constraint_tolerance, mixing_probability, train_stage2, AugLagConfig, OuterTrace, PointConstraint,
    Stage2FlowConfig, Stage2Model,
};
