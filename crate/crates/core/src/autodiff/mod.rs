//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a define-by-run tape: each call such as [`Graph::matmul`]
//! computes its value immediately and records how to push gradients back.
//! Models rebuild the graph on every forward pass.
//!
//! ```
//! use npgrid::autodiff::{Graph, NdArray};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(NdArray::vector(vec![2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let root = g.sum(sq).unwrap();
//! let grads = g.backward(root).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[4.0, 6.0]);
//! ```

mod array;
mod gradcheck;
mod graph;

use std::collections::HashMap;

pub use array::NdArray;
pub use gradcheck::{check_gradients, finite_difference_check};
pub use graph::{ComputationNode, Gradients, Graph, OpKind, Var};

pub(crate) use graph::softplus;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("leaf `{name}` bound with shape {found:?}, expected {expected:?}")]
    LeafShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("no binding for leaf `{0}`")]
    MissingBinding(String),
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("numeric overflow: `{op}` produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Builds a graph over `bindings` with `build` and returns the root value.
///
/// Leaves are requested inside `build` through [`Graph::input`], which
/// checks each binding against its declared shape.
pub fn evaluate<F>(bindings: HashMap<String, NdArray>, build: F) -> Result<NdArray, AutogradError>
where
    F: FnOnce(&mut Graph) -> Result<Var, AutogradError>,
{
    let mut graph = Graph::with_bindings(bindings);
    let root = build(&mut graph)?;
    Ok(graph.value(root).clone())
}
