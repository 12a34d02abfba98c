//! Weakly-supervised object detector built on a small reverse-mode autodiff
//! engine. The pipeline is a three-stage convolutional trunk with attentive
//! dropout and a global context block, an RoI-pooled two-stream MIL head with
//! cascaded refinement and distillation branches, plus the data generation,
//! metric, and training machinery needed to run it end to end — all in f64
//! with deterministic, seedable behavior throughout.

pub mod backbone;
pub mod boxes;
pub mod cadm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod fidelity;
pub mod gcm;
pub mod head;
pub mod model;
pub mod tensor;
pub mod train;

/// Whether a forward pass uses stochastic regularization (`Train`) or the
/// deterministic inference path (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
