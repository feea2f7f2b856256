//! Federated graph-neural-network simulator with cross-client membership
//! inference and client-ownership attacks.

pub mod error;
pub mod fed;
pub mod fsio;
pub mod autodiff;
pub mod checkpoint;
pub mod defense;
pub mod gnn;
pub mod inversion;
pub mod graph;
pub mod metrics;
pub mod mia;
pub mod partition;
pub mod pipeline;
pub mod proto;
pub mod rng;
pub mod tap;

pub use error::{Error, Result};
pub use graph::{Graph, Masks, PropagationMode, SbmParams};
