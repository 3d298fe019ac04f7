//! Laboratory for the boundary-driven lattice gas in a random medium.
//!
//! * [`lattice`], [`disorder`], [`thermo`]: geometry, quenched field and annealed thermodynamics.
//! * [`dynamics`]: exact kinetic Monte Carlo of the exclusion process with reservoirs.
//! * [`diffusion`]: the diffusion matrix from its variational formula on a finite basis.
//! * [`pde`]: monotone finite-volume solver for `d_t rho = div(D(rho) grad rho)`.
//! * [`oracle`]: exact master-equation computations on tiny lattices.
//! * [`harness`]: experiment configuration, the convergence experiments and file outputs.

pub mod configuration;
pub mod diffusion;
pub mod disorder;
pub mod dynamics;
pub mod error;
pub mod exec;
pub mod harness;
pub mod lattice;
pub mod oracle;
pub mod pde;
pub mod rng;
pub mod thermo;

pub use configuration::Configuration;
pub use disorder::{DisorderField, DisorderLaw};
pub use error::{Error, Result};
pub use exec::Execution;
pub use lattice::CylinderLattice;
pub use thermo::{BoundaryData, DensityProfile, ProfileSpec, ThermoContext};
