//! Synthetic phantoms, noise, error metrics, plots and experiment drivers.

pub mod experiment;
pub mod lattice;
pub mod metrics;
pub mod noise;
pub mod phantom;
pub mod plot;

pub use experiment::{run_map, ExperimentConfig, MapResult, MapTiming, Method};
pub use metrics::RoiReport;
pub use noise::{add_noise, NoiseModel};
pub use phantom::{Layout, SyntheticPhantom};
