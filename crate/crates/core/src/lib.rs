//! Hardware-friendly post-training quantization.
//!
//! Rewrites a floating-point network graph into one whose activations are
//! quantized per tensor and whose weights are quantized per output channel,
//! with every quantizer uniform, symmetric and restricted to a power-of-two
//! threshold. Only a small unlabeled calibration set is needed.
//!
//! The flow is: batch-norm folding, statistics collection, histogram
//! outlier removal, activation threshold search, shift negative correction,
//! max channel equalization, per-channel weight threshold search and bias
//! correction. See [`pipeline::quantize_pipeline`].
//!
//! # Feature flags
//!
//! - **`parallel`** *(default)*: data-parallel statistics collection,
//!   evaluation and weight search on the rayon global pool. Without it every
//!   loop runs sequentially. Results are bit-identical either way.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod engine;
pub mod error;
pub mod ir;
pub mod par;
pub mod pipeline;
pub mod quantizers;
pub mod stats;
pub mod tensor;
pub mod transforms;

pub use calibrate::{ErrorMeasure, ThresholdResult};
pub use engine::{evaluate, run_float, run_quantized, EvalReport, ExecutionTrace};
pub use error::{Error, Result};
pub use ir::{CalibrationSet, Graph, Node, Op};
pub use pipeline::{quantize_pipeline, PipelineConfig, PipelineReport, Toggles};
pub use quantizers::{QuantSpec, UniformSpec};
pub use stats::{Histogram, StatsStore, TensorStats};
pub use tensor::{Layout, Tensor};
