//! Minimal dense-tensor numerics with reverse-mode gradients.
//!
//! A [`Graph`] records primitive operations over named leaves. [`evaluate`]
//! runs it against a set of bindings, [`gradients`] adds an exact reverse
//! pass, and [`grad_check`] compares that pass with central finite
//! differences at 64-bit precision.
//!
//! ```
//! use std::collections::BTreeMap;
//! use numcore::{gradients, Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf("x");
//! let sq = g.mul(x, x);
//! let y = g.sum(sq);
//! g.mark_output("y", y);
//!
//! let mut b = BTreeMap::new();
//! b.insert("x".to_string(), Tensor::scalar(3.0f64));
//! let grads = gradients(&g, &b, &["x"], "y").unwrap();
//! assert_eq!(grads["x"].item(), 6.0);
//! ```

mod error;
mod eval;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use error::{NumError, Result};
pub use eval::{backward, evaluate, forward, gradients, value_and_gradients, Bindings, ValueAndGrad, Values};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, LeafReport};
pub use graph::{Graph, Node, NodeId, Op};
pub use ops::ctc_required_frames;
pub use tensor::{Element, Tensor};
