//! Power-system core: network model, Newton-Raphson power flow, scenario
//! generation and graph construction for the learning pipeline.

pub mod dataset;
pub mod error;
pub mod features;
pub mod network;
pub mod scenario;
pub mod solver;
pub mod topology;

pub use dataset::{generate_dataset, load_dataset, save_dataset, Dataset, ScenarioRecord};
pub use error::{GridError, GridResult};
pub use features::{build_graph, ScenarioGraph, Standardizer};
pub use network::{assemble_ybus, AdmittanceMatrix, BusType, Network};
pub use scenario::{RandomizationConfig, Scenario, Split};
pub use solver::{solve_newton_raphson, PowerFlowSolution, SolverOptions};
