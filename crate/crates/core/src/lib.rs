//! Simulation library for dynamical randomness and dissipation in driven
//! classical Hamiltonian systems.
//!
//! The pipeline: sample a canonical ensemble, evolve it under a unit-time
//! Hamiltonian map, coarse-grain trajectories through finite phase-space
//! partitions, estimate block/conditional entropies and the
//! Kolmogorov-Sinai entropy, measure Lyapunov spectra, account dissipated
//! work, and verify the lower bound that ties dissipation to the symbolic
//! randomness of the dynamics.
//!
//! Modules follow the pipeline stages:
//!
//! * [`dynsys`] -- phase states, protocols, and the three concrete systems
//!   (disk rotation, kicked top, driven oscillator)
//! * [`partition`] -- cells, refinement, symbolization, reversed volumes
//! * [`ensemble`] -- canonical sampling, partition functions, pushforwards
//! * [`entropy`] -- path statistics, block entropies, KSE, c_t and d_t
//! * [`lyapunov`] -- Benettin spectra and the Pesin identity
//! * [`thermo`] -- work records, fluctuation checks, the dissipation bound
//! * [`oracle`] -- exact discrete reference systems for the inequalities
//! * [`experiment`] -- configs, pipelines, and report files

pub mod dynsys;
pub mod ensemble;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod lyapunov;
pub mod oracle;
pub mod partition;
pub mod rng;
pub mod thermo;

pub use dynsys::{ControlProtocol, PhaseState, System};
pub use ensemble::{CanonicalSpec, Ensemble};
pub use entropy::{KseEstimate, PathStats};
pub use error::{Error, Result};
pub use experiment::{Experiment, ExperimentConfig};
pub use lyapunov::LyapunovReport;
pub use oracle::DiscreteSystem;
pub use partition::{Partition, PartitionSpec, SymbolPath};
pub use thermo::{BoundReport, WorkRecord};
