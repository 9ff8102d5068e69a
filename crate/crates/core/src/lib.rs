//! Multiscale toolkit for forced Burgers dynamics: microscale solvers,
//! holistic macroscale models with memory convolutions, weak-model
//! reductions and a verification harness.

pub mod convolution;
pub mod error;
pub mod forcing;
pub mod harness;
pub mod macromodel;
pub mod microscale;
pub mod stencil;
pub mod stepper;
pub mod weakmodel;

pub use error::{Error, Result};
pub use forcing::{ElementGeometry, ForcingModes, InputMap, Signal, SignalBank, SignalSpec};
pub use stencil::GridSeq;
pub use stepper::{OdeSystem, Scheme, Stages};
pub use macromodel::{MacroModel, ModelConfig, Ssm1Field, Variant};
pub use weakmodel::{build_weak_model, WeakModel};
pub use harness::{run_experiment, ComparisonReport, Experiment, ExperimentOutput, HarnessConfig};
