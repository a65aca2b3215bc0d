//! Minimal deterministic fp64 tensor engine with reverse-mode autodiff.
//!
//! Everything the denoising networks and probes need — conv2d, group/layer
//! norm, attention building blocks, SiLU, softmax — implemented over a flat
//! `Vec<f64>` tensor with a tape that records backward closures. All kernels
//! run in a fixed sequential order, so results are bitwise reproducible for a
//! given seed regardless of thread count.

mod adamw;
mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use gradcheck::finite_diff_grad;
pub use params::{param_hash, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
