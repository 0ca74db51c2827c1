//! Numeric substrate: dense tensors, a reverse-mode tape, FFT helpers and
//! finite-difference gradient checking.

mod fft;
mod gemm;
mod gradcheck;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use fft::{circular_cross_correlation, irfft, rfft};
pub use gradcheck::{grad_check, GradCheck, DEFAULT_EPS, MAGNITUDE_FLOOR};
pub use kernels::{avgpool1d_replicate, conv1d, softmax, Activation, Mask};
pub use rustfft::num_complex::Complex64;
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
