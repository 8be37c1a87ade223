//! Weak spectral contrastive learning on finite augmentation graphs.
//!
//! A world is a discrete joint over natural instances and classes plus an
//! augmentation kernel. From it we build the self-supervised, supervised and
//! weakly supervised augmentation graphs, evaluate the contrastive objective
//! exactly or from minibatches, train features, and report the quantities
//! that enter the error bound.

pub mod error;
pub mod fixtures;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod recovery;
pub mod rng;
pub mod spectral;
pub mod verify;
pub mod world;

pub use error::{Error, Result};

/// Dense row-major matrix used throughout.
pub type Mat = ndarray::Array2<f64>;
/// Dense vector.
pub type Vector = ndarray::Array1<f64>;
