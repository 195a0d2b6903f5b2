//! Tape-based reverse-mode automatic differentiation over dense row-major
//! matrices.
//!
//! Every value is a 2-D [`Tensor`] (scalars are `1×1`). Operations are
//! evaluated eagerly and recorded on a [`Tape`]; [`Tape::backward`] walks the
//! tape in reverse and accumulates gradients into the [`ParamStore`] that
//! supplied the trainable leaves.
//!
//! ```
//! use offld_autodiff::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! let x = store.insert("x", Tensor::scalar(3.0)).unwrap();
//! let mut tape = Tape::new();
//! let xv = tape.param(&store, x);
//! let y = tape.mul(xv, xv).unwrap();
//! tape.backward(y, &mut store).unwrap();
//! assert_eq!(store.grad(x).data(), &[6.0]);
//! ```
//!
//! The element type is generic over [`Scalar`]; training uses `f32` and the
//! gradient checks run in `f64`.

mod adam;
mod error;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_update, Adam, AdamConfig};
pub use error::AutodiffError;
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, AutodiffError>;
