//! Mesh-free solver for steady incompressible flow in implicitly defined
//! channel geometries.
//!
//! The solver represents the velocity/pressure field with a Fourier-embedded
//! coordinate network and trains it against a hybrid objective: pointwise
//! Navier-Stokes residuals plus integral flux-balance constraints evaluated
//! over clipped spherical control volumes by Monte Carlo surface quadrature.
//! Control volumes are placed at three scales (global, skeleton-aligned,
//! local) and the momentum flux constraint is gated on by a two-stage
//! schedule.
//!
//! Module map:
//! - [`geometry`]: implicit fluid domains (TPMS channels, pipe, plane channel)
//!   with containment, boundary sampling and distance queries.
//! - [`control_volume`]: clipped-sphere subdomains and the two-part Monte
//!   Carlo surface integral estimator.
//! - [`placement`]: multi-scale center placement and radius selection.
//! - [`field_model`]: the coordinate network with exact input derivatives and
//!   reverse-mode parameter gradients.
//! - [`residuals`]: strong-form, boundary and weak-form residual operators.
//! - [`trainer`]: loss assembly, the two-stage training loop, Adam.
//! - [`evaluation`]: metrics, manufactured solutions, mass-flow profiling and
//!   self-tests.
//! - [`config`]: the run configuration schema and TOML parsing.

pub mod config;
pub mod control_volume;
pub mod error;
pub mod evaluation;
pub mod field_model;
pub mod geometry;
pub mod par;
pub mod placement;
pub mod residuals;
pub mod seeds;
pub mod trainer;

pub use config::TrainConfig;
pub use control_volume::ControlVolume;
pub use error::{Error, Result};
pub use field_model::FieldModel;
pub use geometry::{BoundarySample, LevelSetGeometry, LevelSetKind, Region};
pub use placement::PlacementPlan;
pub use residuals::{BoundaryConditions, FlowField};
pub use trainer::{LossReport, Trainer};

/// 3-component vector used for positions, velocities and normals.
pub type Vec3 = nalgebra::Vector3<f64>;
