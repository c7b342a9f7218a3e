//! Distribution system restoration workbench.
//!
//! - [`grid`]: scenario files, validation and node-cell decomposition.
//! - [`powerflow`]: linearized branch-flow voltages and band penalties.
//! - [`env`]: the restoration MDP with legal-action filtering.
//! - [`oracle`]: exhaustive optimum for small scenarios.
//! - [`dataset`]: random-walk collection and return-to-go labelling.
//! - [`pidt`]: the return-conditioned causal transformer policy.
//! - [`baselines`]: A2C and PPO agents plus the shared evaluation harness.
//! - [`curve`]: learning-curve summaries.
//! - [`run`]: persisted runs, configuration overrides and reports.
//! - [`cli`]: the `dsr` command line.

pub mod baselines;
pub mod cli;
pub mod curve;
pub mod dataset;
pub mod env;
pub mod error;
pub mod grid;
pub mod nn;
pub mod oracle;
pub mod pidt;
pub mod powerflow;
pub mod run;

pub use env::{Action, Env, MdpConfig, RestorationState, Transition};
pub use error::{Error, Result};
pub use grid::{node_cells, parse_grid, CellGraph, GridSpec, Scenario};
