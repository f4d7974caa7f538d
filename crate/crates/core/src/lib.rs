//! Task-driven semantic compression: a small block-transform codec with
//! per-CTU QP control, hierarchical actor-critic bit-allocation agents,
//! parameter-efficient transfer of those agents to a new image domain, and
//! Bjøntegaard rate/task-quality evaluation.

pub mod codec;
pub mod dataset;
pub mod eval;
pub mod policy;
pub mod semantics;
pub mod training;
pub mod tuning;
