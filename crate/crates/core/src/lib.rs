//! Federated inference across devices that share neither inputs, parameters
//! nor an encoder.
//!
//! Each device keeps its frozen head and tail network. A consensus-embedding
//! (CE) layer maps the head's private features into a shared 256-dimensional
//! space, trained contrastively against the cross-device centroid on shared
//! unlabeled data. A cooperative-output (CO) layer maps consensus embeddings
//! back to class logits by distilling the device's own model. At inference
//! the device holding the input broadcasts only its consensus embedding and
//! combines the logits returned by its peers with an ensemble rule.

pub mod datakit;
pub mod ensemble;
pub mod error;
pub mod evalkit;
pub mod federation;
pub mod losses;
pub mod model_zoo;
pub mod nn;
pub mod numerics;

pub use error::{Error, Result};
