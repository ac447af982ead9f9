//! Risk-aware BEV perception machinery: multi-camera visibility masks,
//! per-camera query rebatching, a deformable-attention risk head, the
//! composed training loss and the driving evaluation metrics.

pub mod annotation;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod io;
pub mod rebatch;
pub mod riskhead;
