//! Numerical core: scaling and units, regularized classical dynamics and
//! closed-orbit search, the diamagnetic hydrogen eigenproblem, wavepacket
//! evolution, and de Broglie-Bohm trajectories.

pub mod bohm;
pub mod classical;
pub mod error;
pub mod io;
pub mod ode;
pub mod quad;
pub mod quantum;
pub mod units;
pub mod wavepacket;

pub use error::{Error, Result};
pub use quantum::{BasisSpec, SolveTarget, Spectrum};
pub use units::{FieldConfig, PhasePoint, UnitBundle, UNITS};
