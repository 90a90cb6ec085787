//! Autothermal reformer flowsheet with a Gibbs-minimization reactor.

pub mod equilibrium;
pub mod params;
pub mod simulate;
pub mod thermo;
pub mod build;

pub use build::{build_flowsheet, simulate_square, Flowsheet, Handles, SquareSolution};
pub use equilibrium::ReactorState;
pub use params::{FlowsheetParams, Inputs, Range};
pub use thermo::ThermoConfig;
