//! Reference quantizers: round-to-nearest on the min-max grid, and GPTQ
//! greedy column-wise quantization with inverse-Hessian error compensation.

pub mod gptq;
pub mod rtn;

pub use gptq::{quantize_gptq, GptqConfig};
pub use rtn::quantize_rtn;
