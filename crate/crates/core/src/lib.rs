//! Thresholded, preconditioned test-time adaptation (CAP-TTA) on a toy
//! autoregressive generator, together with the exact oracles used to check it.

pub mod digest;
pub mod error;
pub mod experiment;
pub mod genmodel;
pub mod metrics;
pub mod ood;
pub mod optim;
pub mod oracle;
pub mod precond;
pub mod safebank;
pub mod scenario;
pub mod scoring;
pub mod tta;

pub use error::{Error, Result};
