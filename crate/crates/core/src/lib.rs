//! Post-training weight quantization with diagonal-Hessian weighted least squares.
//!
//! Each weight group's scale and offset are fitted by alternating integer code
//! refinement with a closed-form weighted ridge regression, where the weights
//! are per-input-channel activation energies. Round-to-nearest and GPTQ are
//! provided as baselines behind the same [`Quantizer`] trait, along with the
//! Hessian stability diagnostics (shrinkage discrepancy, entrywise SNR and
//! sample-size curves) that motivate dropping the off-diagonal terms.
//!
//! Tensors move in and out through the `.dqb` container in [`bundle`].

pub mod analysis;
pub mod baselines;
pub mod bundle;
pub mod calibration;
pub mod config;
pub mod error;
pub mod packing;
pub mod pipeline;
pub mod quantizer;
pub mod solver;
pub mod synth;
pub mod types;

pub use bundle::{DType, Tensor, TensorBundle, TensorData, WriteOptions};
pub use calibration::{Activation, ActivationBatch, DiagImportance, HessianEstimate, Layer, LayerStack};
pub use error::{Error, Result};
pub use quantizer::{CalibrationStats, LayerQuantization, Quantizer, QuantizerRegistry};
pub use solver::{GroupProblem, SolveTrace, WeightedMoments};
pub use types::{GroupParams, ParamPrecision, QuantSpec, QuantizedLayer, WeightMatrix};
