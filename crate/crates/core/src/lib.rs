//! Desk-scale BERT pre-training: binary16 numerics, a tape autodiff engine,
//! an expression-graph compiler with fusion and mixed-precision rewriting,
//! a sharded data pipeline, ring all-reduce data parallelism and an
//! analytical cluster performance model.

pub mod comm;
pub mod data;
pub mod graph;
pub mod half;
pub mod model;
pub mod perf;
pub mod run;
pub mod tensor;
