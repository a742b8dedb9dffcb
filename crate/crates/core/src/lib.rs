//! Spectral state-space simulation of diffusion inside spheres.
//!
//! The concentration is expanded in the Neumann eigenfunctions
//! `j_n(k r) Y_n^m(θ, φ)` of the ball. Reflective walls leave the modes
//! decoupled; permeable walls and the link between two spheres enter as
//! feedback matrices. A Brownian-dynamics oracle provides an independent check.

pub mod boundary;
pub mod compare;
pub mod engine;
mod error;
pub mod modes;
pub mod particlesim;
pub mod quad;
pub mod scenario;
pub mod sources;
pub mod specfun;

pub use boundary::{build_connection_matrix, build_feedback_matrix, BoundaryRegion, ConnectionMatrix, FeedbackMatrix};
pub use compare::{compare_traces, Comparison};
pub use engine::{simulate, ObservationPoint, Permeability, Simulation, SourceIntegration, SphereModel, Trace};
pub use error::{Error, Result};
pub use modes::{enumerate_modes, ModeIndex, ModeSet, Point};
pub use particlesim::{run_oracle, OracleConfig, OracleSetup, OracleTrace};
pub use scenario::Scenario;
pub use sources::{ReleaseEvent, SourceSchedule};
