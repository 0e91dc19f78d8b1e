//! Simulation laboratory for randomly perturbed discrete dynamical systems.
//!
//! Every noise level `eps` is examined along two independent routes:
//!
//! * [`measure`] estimates mean sojourn measures by Monte Carlo averaging of
//!   seeded random orbits;
//! * [`ulam`] discretizes the one-step transition kernel into a sparse
//!   row-stochastic matrix, splits it into recurrent classes and computes
//!   their stationary measures, absorption probabilities and weights.
//!
//! [`stability`] runs descending noise sweeps over the built-in systems of
//! [`zoo`] and turns the small-noise limits (stochastic stability of each
//! attractor, weights equal to basin volumes, convergence to a convex hull)
//! into tabulated pass/fail checks.
//!
//! Data-parallel loops go through [`par`]; with the `parallel` feature
//! disabled they fall back to sequential iteration and produce identical
//! results.

pub mod error;
pub mod io;
pub mod measure;
pub mod noise;
pub mod par;
pub mod space;
pub mod stability;
pub mod ulam;
pub mod zoo;

pub use error::{LabError, Result};
pub use measure::{MeasureVector, SupportSet, VisitCounts};
pub use noise::{NoiseLevel, PerturbedSystem};
pub use par::Exec;
pub use space::{Partition, Point, StateSpace};
pub use ulam::{AbsorptionTable, MarkovModel, RecurrentDecomposition};
