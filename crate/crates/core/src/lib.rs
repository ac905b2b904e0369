//! Cycle-space detection of blind false-data-injection attacks on DC state
//! estimation.

pub mod attack;
pub mod case;
pub mod csd;
pub mod error;
pub mod estimation;
pub mod graph;
pub mod harness;
pub mod rng;
pub mod sim;
pub mod theory;

pub use attack::{AttackFamily, AttackScenario, MlpAutoencoder, TrainConfig};
pub use case::{BranchRecord, BusRecord, GridCase, LoadProfile};
pub use csd::{DetectionReport, DetectorBank, Metrics};
pub use error::{Error, Result};
pub use estimation::{ResidualStats, WlsEstimate, WlsEstimator};
pub use graph::{BasisKind, Cycle, CycleBasis, OrientedGraph, SignedIndicator};
pub use sim::{JacobianH, Label, MeasurementSeries, NoiseModel};
pub use harness::{ExperimentConfig, Layout, Stage, StageError};
pub use theory::{GenErrorEstimate, MonteCarloConfig};
