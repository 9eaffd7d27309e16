//! Arbitrary-bit quantized matrix multiplication on the CPU.
//!
//! * [`quantizer`]: asymmetric, symmetric and balanced round-clamp quantizers,
//!   learnable clipping and weight/activation balancing.
//! * [`bitkernel`]: bit-plane packing, AND-popcount plane products, blocked
//!   GEMM with bit reduction, tile search and autotuning.
//! * [`calibration`]: DLC/AKL losses and STE-driven calibration of balance,
//!   clip and compensation parameters.
//! * [`toymodel`]: a small transformer block with full-precision and
//!   engine-backed quantized forward passes.
//! * [`io`]: little-endian binary formats for tensors, planes, block weights
//!   and calibration state.
//!
//! Real-valued code is generic over [`Scalar`] (`f32`, `f64`); the aliases
//! below name the common instantiations.

pub mod bitkernel;
pub mod calibration;
pub mod error;
pub mod io;
pub mod matrix;
pub mod quantizer;
pub mod scalar;
pub mod tape;
pub mod toymodel;

pub use error::{AbqError, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type MatrixF32 = Matrix<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type QuantSpecF32 = quantizer::QuantSpec<f32>;
pub type QuantSpecF64 = quantizer::QuantSpec<f64>;
pub type QuantizedTensorF32 = quantizer::QuantizedTensor<f32>;
pub type QuantizedTensorF64 = quantizer::QuantizedTensor<f64>;
pub type ToyBlockF32 = toymodel::ToyBlock<f32>;
pub type ToyBlockF64 = toymodel::ToyBlock<f64>;
pub type CalibStateF32 = calibration::CalibState<f32>;
pub type CalibStateF64 = calibration::CalibState<f64>;
