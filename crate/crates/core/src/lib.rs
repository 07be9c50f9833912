//! Time-aware large kernel (TaLK) convolutions.
//!
//! An adaptive summation-kernel sequence encoder with `O(n * d)` cost per
//! layer, evaluated through a summed-area table over time. The crate holds
//! the kernel with its hand-written backward pass, the surrounding block
//! layers, reference cores (brute-force oracle, softmax attention, dynamic
//! convolution), a small training stack and the benchmark harness.

pub mod alloc;
pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernel;
pub mod layers;
pub mod rng;
pub mod scan;
pub mod tensor;
pub mod training;

pub use checkpoint::{load_tensors, save_tensors, AnyTensor, TensorMap};
pub use error::{Result, TalkError};
pub use kernel::{
    offsets_to_absolute, talk_backward, talk_forward, talk_forward_causal, KernelSaved,
    RelativeOffsets, TalkConfig,
};
pub use rng::Rng;
pub use scan::{sat_build_parallel, sat_build_sequential, sat_suffix_sum, SummedAreaTable};
pub use tensor::{DType, Scalar, Tensor};
