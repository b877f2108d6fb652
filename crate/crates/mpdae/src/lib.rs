//! Warped multirate PDAE simulation by a method of lines.
//!
//! A semi-explicit circuit DAE is lifted to a multivariate signal model with a
//! slow time scale and a fast, frequency-warped time scale. Discretising the
//! fast derivative on periodic lines turns the lifted system into a large DAE
//! in slow time whose unknowns are the line values plus a scalar local
//! frequency. The frequency is pinned either by a phase condition on one
//! component or by the discretised necessary condition of a minimum-oscillation
//! functional.
//!
//! The crate provides
//! - the semi-explicit model abstraction and the k-stage ring-oscillator
//!   benchmark ([`model`]),
//! - periodic BDF difference stencils and their circulant operator form
//!   ([`stencil`]),
//! - assembly of the coupled line system: residuals, Jacobian blocks, mass
//!   matrix ([`assembly`]),
//! - consistent initial values including the hidden constraints of the
//!   index-2 couplings ([`init`]),
//! - implicit Euler time integration with damped Newton ([`integrate`]),
//! - numerical differentiation-index analysis via 1-fullness rank tests of
//!   derivative-array matrices ([`index`]),
//! - derived quantities: oscillation functional, solution reconstruction,
//!   frequency comparisons ([`postproc`]),
//! - the command line front end ([`cli`]).

pub mod assembly;
pub(crate) mod blas;
pub mod cli;
pub mod error;
pub mod index;
pub mod init;
pub mod integrate;
pub mod model;
pub mod postproc;
pub mod stencil;


pub use assembly::{CouplingCondition, GridState, JacobianBlocks, MolSystem, PinnedFunction, WeightCase};
pub use error::{Error, Result};
pub use model::{InputSignal, RingOscillator, RingOscillatorParams, SemiExplicitDae};
pub use stencil::{CirculantOperator, DifferenceStencil};
