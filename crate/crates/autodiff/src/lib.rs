//! Minimal dense-tensor engine: `f64` tensors, a recording tape with
//! reverse-mode differentiation, and an Adam optimizer.
//!
//! ```
//! use probsaint_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::scalar(3.0).with_grad());
//! let y = tape.square(x);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```

mod adam;
mod error;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use error::{Result, TensorError};
pub use params::{ParamId, ParamStore};
pub use tape::{pairwise_sum, Tape, Var};
pub use tensor::Tensor;
