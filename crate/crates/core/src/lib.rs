//! Offline learned dispatching for the job shop scheduling problem.
//!
//! The crate covers the whole workflow: instance generation and parsing
//! ([`instances`]), the disjunctive-graph dispatching environment
//! ([`env`]), rule baselines ([`pdr`]), an exact oracle and schedule
//! replay ([`exact`]), offline datasets ([`dataset`]), the graph encoder and
//! heads ([`model`]), conservative offline RL losses ([`agents`]) and the
//! training / evaluation loop ([`pipeline`]).

pub mod agents;
pub mod dataset;
pub mod env;
pub mod error;
pub mod exact;
pub mod instances;
pub mod model;
pub mod pdr;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
