//! Numerical optics for spatially entangled photon pairs behind scattering
//! media and turbulent air, plus the classical pump beam that steers them.
//!
//! The crate models a two-photon source with adjustable spatial entanglement,
//! propagates the pair state (and the pump) through thin diffusers, volume
//! diffusers, and Kolmogorov/von Karman phase screens, and implements
//! pump-side wavefront shaping with intensity or photon-counting feedback.
//! Scenario drivers under [`scenario`] reproduce the bundled experiments at
//! desk and outdoor-link scale.

pub mod error;
pub mod fft;
pub mod field;
pub mod grid;
pub mod io;
pub mod media;
pub mod scenario;
pub mod seeds;
pub mod shaping;
pub mod spdc;
pub mod stats;
pub mod transfer;
pub mod turbulence;

pub use error::{Error, Result};
pub use field::{Field1, Field2, Propagated, Real1, Real2};
pub use grid::{Domain, Grid1, Grid2};
pub use spdc::{
    CrystalSpec, DoubleGaussianParams, JointAmplitude, JointPattern, PositionKernel,
};
pub use transfer::{ChainOutput, Element, TransferChain};
pub use shaping::{FeedbackChannel, FeedbackMode, OptimizationTrace, SlmConfig};
pub use turbulence::{AtmosphereParams, LinkSweepResult, PhaseScreenStack};
pub use scenario::{
    emit_plot_script, run_scenario, validate_config, RunManifest, ScenarioConfig, ScenarioId,
};
