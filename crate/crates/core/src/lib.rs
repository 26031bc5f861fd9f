//! Simulation and calibration toolkit for a Kerr-tunable SNAIL-terminated
//! resonator dispersively coupled to a two-level ancilla.
//!
//! Units used throughout: frequencies in cyclic MHz (a value `f` stands for
//! `2π·f` rad/μs), times in ns, decay rates in 1/μs, circuit energies in GHz.

pub mod dynamics;
pub mod error;
pub mod hilbert;
pub mod io;
pub mod numerics;
pub mod protocols;
pub mod scalar;
pub mod snail;
pub mod tomography;

pub use error::{Error, Result};
pub use hilbert::{HilbertLayout, OperatorMatrix, QuantumState};
pub use scalar::C64;

/// Double-precision operator.
pub type Operator = OperatorMatrix<f64>;
/// Double-precision state.
pub type State = QuantumState<f64>;
