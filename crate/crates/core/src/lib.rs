//! Desk-scale simulator of federated continual learning with signature-task
//! knowledge.
//!
//! Clients learn a private sequence of classification tasks. After each task
//! they keep only the largest-magnitude fraction of their weights as that
//! task's knowledge. While learning later tasks, past-task gradients are
//! restored from that knowledge using current samples only, and the update
//! is rotated by a small dual QP so it does not increase the loss of the
//! most dissimilar past tasks. A simulated FedAvg server aggregates the
//! shared layers, and the post-aggregation fine-tune is integrated the same
//! way against the client's own pre-upload gradient.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod federation;
pub mod harness;
pub mod integrator;
pub mod knowledge;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod selftest;
pub mod taskgen;

pub use error::{Error, Result};
