//! Dense tensors and a reverse-mode tape covering what a small residual 3D
//! convolutional encoder and its losses need: convolution, batch
//! normalization, pooling, trilinear resampling, row normalization, pairwise
//! similarities and subset log-sum-exp.
//!
//! ```
//! use rankage_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
//! let r = tape.relu(x).unwrap();
//! let y = tape.sum(r).unwrap();
//! let grads = tape.backward(y, &Tensor::scalar(1.0)).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
//! ```

mod error;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{BatchNormMode, BatchStats, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
