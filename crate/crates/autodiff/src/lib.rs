//! Tape-based reverse-mode differentiation over dense row-major tensors.
//!
//! The primitive set is deliberately small: it covers what a GPT-style
//! decoder needs (matmul, bias add, embedding lookup, layer norm, softmax,
//! GELU, causal attention, weighted cross-entropy) and nothing else.
//!
//! ```
//! use sad_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
//! let s = tape.sum(x);
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
//! ```

pub mod checkpoint;
pub mod gradcheck;
mod real;
mod tape;
mod tensor;

pub use real::{gemm, Real};
pub use tape::{Gradients, Segment, Tape, Var, MASK_VALUE};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("corrupt tensor table: {0}")]
    Corrupt(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
