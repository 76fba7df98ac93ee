//! `grad`, `value_and_grad`, `vmap` and `jit` over tree-valued functions.
//!
//! Each transformation traces its argument function into a [`Graph`] and
//! then evaluates a rewritten program with [`crate::trace::bind`]. Called on
//! concrete values the program runs eagerly; called on tracers (from inside
//! another transformation) it is recorded into the enclosing trace, so the
//! transformations compose freely up to [`crate::trace::MAX_NESTING`] levels.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::pytree::{flatten, Fingerprint, FunctionRef, Leaf, PyTree};
use crate::tensor::{DType, Shape, Tensor};
use crate::trace::{
    batch_rule, bind, interpret, interpret_outputs, trace_depth, trace_flat, vjp_rule, ArgLayout,
    Array, Aval, Traced,
};

// ---------------------------------------------------------------------------
// grad

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GradMode {
    /// Every leaf of the first argument must be an f64 array.
    Strict,
    /// Sentinel leaves are skipped and come back as Sentinel.
    SkipSentinels,
}

/// Gradient of a scalar-valued function with respect to its first argument.
/// The result has the first argument's structure.
pub fn grad(f: &FunctionRef) -> FunctionRef {
    let f = f.clone();
    FunctionRef::new(format!("grad({})", f.name()), move |args| {
        Ok(value_and_grad_impl(&f, args, GradMode::Strict)?.1)
    })
}

/// Like [`grad`], returning the tuple `(value, gradient)`.
pub fn value_and_grad(f: &FunctionRef) -> FunctionRef {
    let f = f.clone();
    FunctionRef::new(format!("value_and_grad({})", f.name()), move |args| {
        let (value, g) = value_and_grad_impl(&f, args, GradMode::Strict)?;
        Ok(PyTree::Tup(vec![PyTree::from(value), g]))
    })
}

pub(crate) fn value_and_grad_impl(
    f: &FunctionRef,
    args: &[PyTree],
    mode: GradMode,
) -> Result<(Array, PyTree)> {
    let (first, rest) = args
        .split_first()
        .ok_or_else(|| Error::Grad("needs at least one argument".into()))?;
    let (first_leaves, first_fp) = flatten(first);
    let paths = first_fp.leaf_paths();
    let mut diff_values = Vec::new();
    for (leaf, path) in first_leaves.iter().zip(&paths) {
        match leaf {
            Leaf::Array(a) if a.dtype() == DType::F64 => diff_values.push(a.clone()),
            Leaf::Sentinel if mode == GradMode::SkipSentinels => {}
            other => {
                return Err(Error::Grad(format!(
                    "leaf {path} of the differentiated argument is {} ({}); only f64 arrays can be \
                     differentiated, partition the argument or use filter_grad",
                    other.kind_name(),
                    describe(other)
                )))
            }
        }
    }
    if diff_values.is_empty() {
        return Err(Error::Grad(
            "the differentiated argument contains no f64 array leaves".into(),
        ));
    }

    let rest_layout = ArgLayout::new(rest);
    let rest_values = rest_layout.arrays();
    let n_diff = diff_values.len();
    let avals: Vec<Aval> = diff_values
        .iter()
        .chain(&rest_values)
        .map(Array::aval)
        .collect();

    let traced = trace_flat(&avals, |tracers| {
        let (diff_tracers, rest_tracers) = tracers.split_at(n_diff);
        let mut it = diff_tracers.iter();
        let leaves = first_leaves
            .iter()
            .map(|l| match l {
                Leaf::Array(_) => Leaf::Array(it.next().expect("diff slot").clone()),
                other => other.clone(),
            })
            .collect();
        let mut call_args = vec![crate::pytree::unflatten(&first_fp, leaves)?];
        call_args.extend(rest_layout.rebuild(rest_tracers)?);
        f.call(&call_args)
    })?;

    let out_var = match (traced.out_static.as_slice(), traced.graph.outputs()) {
        ([None], [v]) if traced.out_fp.as_str() == "*" => *v,
        _ => {
            return Err(Error::Grad(format!(
                "function must return a single scalar f64 array, got structure {}",
                traced.out_fp
            )))
        }
    };
    let out_aval = traced.graph.aval(out_var);
    if out_aval.dtype != DType::F64 || out_aval.shape.rank() != 0 {
        return Err(Error::Grad(format!(
            "function must return a rank-0 f64 array, got {out_aval}"
        )));
    }

    let graph = &traced.graph;
    let mut inputs = diff_values;
    inputs.extend(rest_values);
    inputs.extend(traced.captures.iter().cloned());
    let env = interpret(graph, &inputs)?;

    // Variables that depend on a differentiated input.
    let mut active = vec![false; env.len()];
    for &v in &graph.inputs()[..n_diff] {
        active[v.index()] = true;
    }
    for eq in graph.equations() {
        if eq.inputs.iter().any(|v| active[v.index()]) {
            active[eq.out.index()] = true;
        }
    }

    let mut cts: Vec<Option<Array>> = vec![None; env.len()];
    if active[out_var.index()] {
        cts[out_var.index()] = Some(Array::scalar(1.0));
    }
    for eq in graph.equations().iter().rev() {
        let Some(ct) = cts[eq.out.index()].take() else {
            continue;
        };
        let operands: Vec<&Array> = eq
            .inputs
            .iter()
            .map(|v| env[v.index()].as_ref().expect("forward value"))
            .collect();
        let needs: Vec<bool> = eq.inputs.iter().map(|v| active[v.index()]).collect();
        let out_value = env[eq.out.index()].as_ref().expect("forward value");
        let contributions = vjp_rule(&eq.prim, &operands, out_value, &ct, &needs)?;
        for (v, c) in eq.inputs.iter().zip(contributions) {
            if let Some(c) = c {
                let slot = &mut cts[v.index()];
                *slot = Some(match slot.take() {
                    Some(prev) => prev.add(&c)?,
                    None => c,
                });
            }
        }
    }

    let mut grads = graph.inputs()[..n_diff].iter().map(|v| {
        cts[v.index()]
            .clone()
            .unwrap_or_else(|| Array::Concrete(Tensor::zeros(graph.aval(*v).shape.clone())))
    });
    let grad_leaves = first_leaves
        .iter()
        .map(|l| match l {
            Leaf::Array(_) => Leaf::Array(grads.next().expect("one gradient per input")),
            _ => Leaf::Sentinel,
        })
        .collect();
    let value = env[out_var.index()].clone().expect("output value");
    Ok((value, crate::pytree::unflatten(&first_fp, grad_leaves)?))
}

fn describe(leaf: &Leaf) -> String {
    match leaf {
        Leaf::Array(a) => a.aval().to_string(),
        other => other.static_text(),
    }
}

// ---------------------------------------------------------------------------
// vmap

/// Which leaves of one argument carry the batch (always on axis 0).
#[derive(Debug, Clone)]
pub enum AxisSpec {
    /// Every array leaf is mapped over its leading axis.
    Mapped,
    /// The argument is shared by all batch elements.
    Broadcast,
    /// A tree with the argument's structure holding `Leaf::Bool` at array
    /// positions: `true` maps the leaf, `false` broadcasts it.
    PerLeaf(PyTree),
}

/// Vectorises `f` over a leading batch axis. `in_axes` has one entry per
/// argument.
pub fn vmap(f: &FunctionRef, in_axes: Vec<AxisSpec>) -> FunctionRef {
    let f = f.clone();
    FunctionRef::new(format!("vmap({})", f.name()), move |args| {
        vmap_impl(&f, &in_axes, args)
    })
}

fn mapped_flags(
    spec: &AxisSpec,
    arg: &PyTree,
    leaves: &[Leaf],
    fp: &Fingerprint,
) -> Result<Vec<bool>> {
    match spec {
        AxisSpec::Mapped => Ok(leaves.iter().map(|l| l.as_array().is_some()).collect()),
        AxisSpec::Broadcast => Ok(vec![false; leaves.len()]),
        AxisSpec::PerLeaf(tree) => {
            let (flags, spec_fp) = flatten(tree);
            if &spec_fp != fp {
                return Err(Error::Structure {
                    left: spec_fp.to_string(),
                    right: fp.to_string(),
                });
            }
            flags
                .iter()
                .zip(leaves)
                .map(|(flag, leaf)| match (flag, leaf.as_array()) {
                    (Leaf::Bool(b), Some(_)) => Ok(*b),
                    (_, None) => Ok(false),
                    (other, Some(_)) => Err(Error::Vmap(format!(
                        "axis spec for {arg} holds {} at an array position; expected a bool",
                        other.kind_name()
                    ))),
                })
                .collect()
        }
    }
}

fn vmap_impl(f: &FunctionRef, in_axes: &[AxisSpec], args: &[PyTree]) -> Result<PyTree> {
    if in_axes.len() != args.len() {
        return Err(Error::Vmap(format!(
            "{} axis specs for {} arguments",
            in_axes.len(),
            args.len()
        )));
    }
    let layout = ArgLayout::new(args);
    let mut mapped = Vec::new();
    for ((spec, arg), (leaves, fp)) in in_axes
        .iter()
        .zip(args)
        .zip(layout.leaves().iter().zip(layout.fingerprints()))
    {
        let flags = mapped_flags(spec, arg, leaves, fp)?;
        mapped.extend(
            leaves
                .iter()
                .zip(flags)
                .filter(|(l, _)| l.as_array().is_some())
                .map(|(_, m)| m),
        );
    }
    let values = layout.arrays();

    let mut batch: Option<usize> = None;
    let mut avals = Vec::with_capacity(values.len());
    for (v, &m) in values.iter().zip(&mapped) {
        if !m {
            avals.push(v.aval());
            continue;
        }
        let dims = v.shape().dims();
        let Some((&b, per)) = dims.split_first() else {
            return Err(Error::Vmap("cannot map over a rank-0 array".into()));
        };
        match batch {
            Some(first) if first != b => return Err(Error::BatchMismatch { first, second: b }),
            _ => batch = Some(b),
        }
        avals.push(Aval::new(Shape::from(per), v.dtype()));
    }
    let batch = batch.ok_or_else(|| Error::Vmap("no argument leaf is mapped".into()))?;

    let traced = trace_flat(&avals, |tracers| f.call(&layout.rebuild(tracers)?))?;
    let outputs = eval_batched(&traced, values, &mapped, batch)?;
    traced.assemble(outputs)
}

/// Interprets a per-example graph on batched inputs using the batching rules.
fn eval_batched(
    traced: &Traced,
    values: Vec<Array>,
    mapped: &[bool],
    batch: usize,
) -> Result<Vec<Array>> {
    let graph = &traced.graph;
    let mut env: Vec<Option<(Array, bool)>> = vec![None; graph.vars.len()];
    let inputs = values
        .into_iter()
        .zip(mapped.iter().copied())
        .chain(traced.captures.iter().cloned().map(|c| (c, false)));
    for (&var, value) in graph.inputs().iter().zip(inputs) {
        env[var.index()] = Some(value);
    }
    for (var, t) in graph.constants() {
        env[var.index()] = Some((Array::Concrete(t.clone()), false));
    }
    for eq in graph.equations() {
        let args: Vec<(Array, bool)> = eq
            .inputs
            .iter()
            .map(|v| env[v.index()].clone().expect("graph is in SSA order"))
            .collect();
        let out = if args.iter().any(|(_, b)| *b) {
            (batch_rule(&eq.prim, &args)?, true)
        } else {
            let refs: Vec<&Array> = args.iter().map(|(a, _)| a).collect();
            (bind(eq.prim.clone(), &refs)?, false)
        };
        env[eq.out.index()] = Some(out);
    }
    graph
        .outputs()
        .iter()
        .map(|v| {
            let (a, batched) = env[v.index()].clone().expect("outputs are defined");
            if batched {
                Ok(a)
            } else {
                let mut shape = vec![batch];
                shape.extend_from_slice(a.shape().dims());
                a.broadcast_to(shape)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// jit

static NEXT_JIT: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    function: u64,
    structure: Vec<Fingerprint>,
    avals: Vec<Aval>,
    /// Canonical text of non-array leaves (filtered jit only).
    statics: Vec<String>,
}

/// Traced graphs keyed by function identity, argument structure, and
/// per-leaf shape/dtype. Entries are never evicted.
#[derive(Default)]
pub struct JitCache {
    entries: Mutex<HashMap<CacheKey, Arc<Traced>>>,
    traces: AtomicUsize,
}

impl JitCache {
    pub fn len(&self) -> usize {
        self.entries.lock().expect("jit cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of traces performed through this cache.
    pub fn trace_count(&self) -> usize {
        self.traces.load(Ordering::SeqCst)
    }
}

/// A function that is traced once per cache key and afterwards evaluated
/// from its recorded graph.
#[derive(Clone)]
pub struct Jitted {
    id: u64,
    f: FunctionRef,
    allow_static: bool,
    cache: Arc<JitCache>,
}

pub fn jit(f: &FunctionRef) -> Jitted {
    Jitted::new(f, false)
}

impl Jitted {
    pub(crate) fn new(f: &FunctionRef, allow_static: bool) -> Self {
        Jitted {
            id: NEXT_JIT.fetch_add(1, Ordering::Relaxed),
            f: f.clone(),
            allow_static,
            cache: Arc::new(JitCache::default()),
        }
    }

    pub fn trace_count(&self) -> usize {
        self.cache.trace_count()
    }

    pub fn cache(&self) -> &JitCache {
        &self.cache
    }

    pub fn call(&self, args: &[PyTree]) -> Result<PyTree> {
        let layout = ArgLayout::new(args);
        if !self.allow_static {
            for (leaves, fp) in layout.leaves().iter().zip(layout.fingerprints()) {
                if let Some((leaf, path)) = leaves
                    .iter()
                    .zip(fp.leaf_paths())
                    .find(|(l, _)| l.as_array().is_none())
                {
                    return Err(Error::Jit(format!(
                        "argument leaf {path} is {}; jit traces array leaves only, use filter_jit",
                        leaf.kind_name()
                    )));
                }
            }
        }
        // Inside another trace the program is inlined into that trace.
        if trace_depth() > 0 {
            return self.f.call(args);
        }
        let values = layout.arrays();
        let key = CacheKey {
            function: self.id,
            structure: layout.fingerprints().to_vec(),
            avals: values.iter().map(Array::aval).collect(),
            statics: layout.non_arrays().map(Leaf::static_text).collect(),
        };
        let cached = self
            .cache
            .entries
            .lock()
            .expect("jit cache poisoned")
            .get(&key)
            .cloned();
        let traced = match cached {
            Some(t) => t,
            None => {
                let traced =
                    trace_flat(&key.avals, |tracers| self.f.call(&layout.rebuild(tracers)?))?;
                if !traced.captures.is_empty() {
                    return Err(Error::Jit("function closes over traced values".into()));
                }
                self.cache.traces.fetch_add(1, Ordering::SeqCst);
                let traced = Arc::new(traced);
                self.cache
                    .entries
                    .lock()
                    .expect("jit cache poisoned")
                    .insert(key, traced.clone());
                traced
            }
        };
        let outputs = interpret_outputs(&traced.graph, &values)?;
        traced.assemble(outputs)
    }

    /// The jitted function as a plain [`FunctionRef`], sharing this cache.
    pub fn to_function(&self) -> FunctionRef {
        let this = self.clone();
        let prefix = if self.allow_static {
            "filter_jit"
        } else {
            "jit"
        };
        FunctionRef::new(format!("{prefix}({})", self.f.name()), move |args| {
            this.call(args)
        })
    }
}
