//! HTTP serving, remote querying and the command-line front end for
//! ownership verification.

pub mod cli;
pub mod manifest;
pub mod remote;
pub mod server;

pub use remote::{RemoteConfig, RemoteOracle};
pub use server::PredictServer;
