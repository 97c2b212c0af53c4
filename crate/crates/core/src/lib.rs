//! Heterogeneous-graph node classification with slot-aware structure
//! encoding and multi-scale retention over sampled neighbor sequences.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod retention;
pub mod slot;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Activation, GradCheckReport, Gradients, RotationTable, Tape, Var};
pub use error::{Error, Result};
pub use graph::{HeteroGraph, Label};
pub use metrics::F1Scores;
pub use model::{Ablations, HeSRN, LossMode, ModelConfig};
pub use tensor::{CsrMatrix, Tensor};
pub use train::{train, TrainReport};
