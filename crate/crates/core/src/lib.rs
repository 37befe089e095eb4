//! Simulation library for training embedding models with user-level
//! differential privacy.
//!
//! Users are sampled each round and randomly grouped into virtual clients.
//! Each virtual client trains locally, its backbone delta is clipped, and the
//! server aggregates the deltas with Gaussian or tree-correlated noise. In
//! `fedemb` mode each virtual client trains a fresh local softmax head that
//! never leaves the client; in `fedavg` mode the head is global and is
//! privatized together with the backbone.

pub mod accounting;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod mechanism;
pub mod model;
pub mod param;
pub mod trainer;

pub use error::{Error, Result};
pub use param::{ParamVector, RngStream, StreamPurpose, TrainableMask};
