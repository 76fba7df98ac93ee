//! Tree-structured differentiable programming: PyTrees of tensors, a
//! tracing interpreter, composable `grad`/`vmap`/`jit`, filtered
//! transformations, and modules that are themselves PyTrees.

pub mod checkpoint;
pub mod error;
pub mod filter;
pub mod module;
pub mod nn;
pub mod pytree;
pub mod tensor;
pub mod trace;
pub mod transforms;

pub use error::{Error, Result};
pub use filter::{
    combine, filter_grad, filter_jit, filter_value_and_grad, is_array, is_inexact_array, partition,
};
pub use module::{apply, bind_method, define_schema, instantiate, replace_fields, FieldSpec};
pub use pytree::{flatten, unflatten, Fingerprint, FunctionRef, Leaf, PyTree};
pub use tensor::{DType, Shape, Tensor};
pub use trace::{trace, Array, Graph};
pub use transforms::{grad, jit, value_and_grad, vmap, AxisSpec, Jitted};
