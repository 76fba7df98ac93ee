//! Splitting trees into a transformed half and a static half at a call site.
//!
//! `partition` keeps the tree's structure on both sides by writing
//! [`Leaf::Sentinel`] into unmatched positions, so `combine` can merge the
//! halves back position by position.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::pytree::{flatten, unflatten, FunctionRef, Leaf, PyTree};
use crate::tensor::DType;
use crate::trace::Array;
use crate::transforms::{value_and_grad_impl, GradMode, Jitted};

/// A named predicate over leaves.
#[derive(Clone)]
pub struct LeafPredicate {
    name: Arc<str>,
    pred: Arc<dyn Fn(&Leaf) -> bool + Send + Sync>,
}

impl LeafPredicate {
    pub fn new(
        name: impl Into<Arc<str>>,
        pred: impl Fn(&Leaf) -> bool + Send + Sync + 'static,
    ) -> Self {
        LeafPredicate {
            name: name.into(),
            pred: Arc::new(pred),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn test(&self, leaf: &Leaf) -> bool {
        (self.pred)(leaf)
    }
}

impl std::fmt::Debug for LeafPredicate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LeafPredicate({})", self.name)
    }
}

/// Matches tensor leaves of any dtype.
pub fn is_array() -> LeafPredicate {
    LeafPredicate::new("is_array", |l| matches!(l, Leaf::Array(_)))
}

/// Matches f64 tensor leaves.
pub fn is_inexact_array() -> LeafPredicate {
    LeafPredicate::new(
        "is_inexact_array",
        |l| matches!(l, Leaf::Array(a) if a.dtype() == DType::F64),
    )
}

/// Returns `(matched, complement)`, both with `tree`'s fingerprint.
pub fn partition(tree: &PyTree, pred: &LeafPredicate) -> (PyTree, PyTree) {
    let (leaves, fp) = flatten(tree);
    let mut matched = Vec::with_capacity(leaves.len());
    let mut rest = Vec::with_capacity(leaves.len());
    for leaf in leaves {
        if pred.test(&leaf) {
            matched.push(leaf);
            rest.push(Leaf::Sentinel);
        } else {
            matched.push(Leaf::Sentinel);
            rest.push(leaf);
        }
    }
    (
        unflatten(&fp, matched).expect("leaf count preserved"),
        unflatten(&fp, rest).expect("leaf count preserved"),
    )
}

/// Like [`partition`], but the predicate also sees each leaf's path
/// (`[0].weight`, `["key"]`, ...). Useful for freezing named parameters.
pub fn partition_with_path(tree: &PyTree, pred: impl Fn(&str, &Leaf) -> bool) -> (PyTree, PyTree) {
    let (leaves, fp) = flatten(tree);
    let paths = fp.leaf_paths();
    let mut matched = Vec::with_capacity(leaves.len());
    let mut rest = Vec::with_capacity(leaves.len());
    for (leaf, path) in leaves.into_iter().zip(&paths) {
        if pred(path, &leaf) {
            matched.push(leaf);
            rest.push(Leaf::Sentinel);
        } else {
            matched.push(Leaf::Sentinel);
            rest.push(leaf);
        }
    }
    (
        unflatten(&fp, matched).expect("leaf count preserved"),
        unflatten(&fp, rest).expect("leaf count preserved"),
    )
}

/// Merges two halves with equal fingerprints, taking the non-Sentinel leaf
/// at every position.
pub fn combine(a: &PyTree, b: &PyTree) -> Result<PyTree> {
    let (la, fa) = flatten(a);
    let (lb, fb) = flatten(b);
    if fa != fb {
        return Err(Error::Structure {
            left: fa.to_string(),
            right: fb.to_string(),
        });
    }
    let mut out = Vec::with_capacity(la.len());
    for (i, (x, y)) in la.into_iter().zip(lb).enumerate() {
        out.push(match (x.is_sentinel(), y.is_sentinel()) {
            (true, _) => y,
            (_, true) => x,
            _ => {
                return Err(Error::CombineConflict {
                    path: fa.leaf_paths().swap_remove(i),
                })
            }
        });
    }
    unflatten(&fa, out)
}

/// Gradient with respect to the f64 array leaves of the first argument.
/// Every other leaf position holds Sentinel in the result.
pub fn filter_grad(f: &FunctionRef) -> FunctionRef {
    let f = f.clone();
    FunctionRef::new(format!("filter_grad({})", f.name()), move |args| {
        Ok(filtered_value_and_grad(&f, args)?.1)
    })
}

/// Like [`filter_grad`], returning `(value, gradient)`.
pub fn filter_value_and_grad(f: &FunctionRef) -> FunctionRef {
    let f = f.clone();
    FunctionRef::new(
        format!("filter_value_and_grad({})", f.name()),
        move |args| {
            let (value, g) = filtered_value_and_grad(&f, args)?;
            Ok(PyTree::Tup(vec![PyTree::from(value), g]))
        },
    )
}

fn filtered_value_and_grad(f: &FunctionRef, args: &[PyTree]) -> Result<(Array, PyTree)> {
    let (model, extra) = args
        .split_first()
        .ok_or_else(|| Error::Grad("needs at least one argument".into()))?;
    let (diff, fixed) = partition(model, &is_inexact_array());
    let inner = f.clone();
    let recombined = FunctionRef::new(format!("{}[combined]", f.name()), move |a| {
        let mut call = vec![combine(&a[0], &a[1])?];
        call.extend_from_slice(&a[2..]);
        inner.call(&call)
    });
    let mut call = vec![diff, fixed];
    call.extend_from_slice(extra);
    value_and_grad_impl(&recombined, &call, GradMode::SkipSentinels)
}

/// `jit` that accepts any leaves: arrays become graph inputs and every other
/// leaf is folded into the cache key.
pub fn filter_jit(f: &FunctionRef) -> Jitted {
    Jitted::new(f, true)
}
