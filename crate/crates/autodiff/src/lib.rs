//! Dense double-precision tensors with a reverse-mode tape.
//!
//! The backward pass records onto the same tape as the forward pass, so a
//! gradient can be fed into another differentiable computation and
//! differentiated again. This is what second-order meta-learning needs: the
//! inner update `θ' = θ - α ∇L(θ)` stays on the graph and the outer gradient
//! flows through it.
//!
//! ```
//! use metabci_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let y = x.square().mul(x).unwrap(); // x^3
//! let dy = tape.grad(y, &[x], true).unwrap();
//! let d2y = tape.grad(dy[0], &[x], false).unwrap();
//! assert_eq!(d2y[0].item().unwrap(), 12.0);
//! ```

mod error;
mod kernels;
pub mod ops;
mod params;
mod tape;
mod tensor;

pub use error::DiffError;
pub use params::ParamVector;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
