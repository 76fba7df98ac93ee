//! Tracing pure tensor programs into graphs of primitive equations.
//!
//! User code manipulates [`Array`] values. An array is either concrete (a
//! [`Tensor`]) or a tracer standing for a variable of an in-progress trace.
//! Every primitive goes through [`bind`]: with only concrete operands it runs
//! the kernel immediately, otherwise it appends an equation to the innermost
//! trace that owns one of the operands.
//!
//! Traces form a per-thread stack. A transformation pushes a frame, runs the
//! user function on fresh tracers, pops the frame into a [`Graph`], and then
//! re-evaluates a rewritten version of that graph with [`bind`] on its own
//! arguments. When those arguments are themselves tracers of an outer trace,
//! the rewritten program lands in the outer trace, which is how transforms
//! nest.

mod batching;
mod graph;
mod primitive;
mod vjp;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::pytree::{flatten, Fingerprint, Leaf, PyTree};
use crate::tensor::{self, DType, Shape, Tensor};

pub(crate) use batching::batch_rule;
pub use graph::{eval_graph, format_graph, Equation, Graph, VarId};
pub use primitive::Primitive;
pub(crate) use vjp::vjp_rule;

/// Maximum number of simultaneously open traces (e.g. jit of grad of vmap).
pub const MAX_NESTING: usize = 3;

/// Shape and dtype of an array, concrete or traced.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Aval {
    pub shape: Shape,
    pub dtype: DType,
}

impl Aval {
    pub fn new(shape: impl Into<Shape>, dtype: DType) -> Self {
        Aval {
            shape: shape.into(),
            dtype,
        }
    }
}

impl fmt::Display for Aval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.shape, self.dtype)
    }
}

#[derive(Debug, Clone)]
pub struct Tracer {
    frame: u64,
    var: VarId,
    aval: Aval,
}

/// A tensor value as seen by traceable code.
#[derive(Debug, Clone)]
pub enum Array {
    Concrete(Tensor),
    Traced(Tracer),
}

impl From<Tensor> for Array {
    fn from(t: Tensor) -> Self {
        Array::Concrete(t)
    }
}

impl Array {
    pub fn scalar(v: f64) -> Array {
        Array::Concrete(Tensor::scalar(v))
    }

    pub fn aval(&self) -> Aval {
        match self {
            Array::Concrete(t) => Aval::new(t.shape().clone(), t.dtype()),
            Array::Traced(t) => t.aval.clone(),
        }
    }

    pub fn shape(&self) -> &Shape {
        match self {
            Array::Concrete(t) => t.shape(),
            Array::Traced(t) => &t.aval.shape,
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Array::Concrete(t) => t.dtype(),
            Array::Traced(t) => t.aval.dtype,
        }
    }

    pub fn is_traced(&self) -> bool {
        matches!(self, Array::Traced(_))
    }

    /// The concrete value. Fails on tracers: code that branches on array
    /// values cannot be traced.
    pub fn to_tensor(&self) -> Result<Tensor> {
        match self {
            Array::Concrete(t) => Ok(t.clone()),
            Array::Traced(t) => Err(Error::Concretization(t.aval.to_string())),
        }
    }

    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            Array::Concrete(t) => Some(t),
            Array::Traced(_) => None,
        }
    }

    /// Value of a concrete one-element f64 array.
    pub fn item(&self) -> Result<f64> {
        let t = self.to_tensor()?;
        t.item()
            .ok_or_else(|| Error::InvalidArgument(format!("item() on {}", t.shape())))
    }

    pub fn bitwise_eq(&self, other: &Array) -> bool {
        match (self, other) {
            (Array::Concrete(a), Array::Concrete(b)) => a.bitwise_eq(b),
            (Array::Traced(a), Array::Traced(b)) => a.frame == b.frame && a.var == b.var,
            _ => false,
        }
    }

    pub fn add(&self, other: &Array) -> Result<Array> {
        bind(Primitive::Add, &[self, other])
    }

    pub fn sub(&self, other: &Array) -> Result<Array> {
        bind(Primitive::Sub, &[self, other])
    }

    pub fn mul(&self, other: &Array) -> Result<Array> {
        bind(Primitive::Mul, &[self, other])
    }

    pub fn div(&self, other: &Array) -> Result<Array> {
        bind(Primitive::Div, &[self, other])
    }

    pub fn neg(&self) -> Result<Array> {
        bind(Primitive::Neg, &[self])
    }

    pub fn relu(&self) -> Result<Array> {
        bind(Primitive::Relu, &[self])
    }

    pub fn step(&self) -> Result<Array> {
        bind(Primitive::Step, &[self])
    }

    pub fn square(&self) -> Result<Array> {
        self.mul(self)
    }

    pub fn matmul(&self, other: &Array) -> Result<Array> {
        bind(Primitive::MatMul, &[self, other])
    }

    /// Sum over `axes`, or over everything when `None`.
    pub fn sum(&self, axes: Option<&[usize]>) -> Result<Array> {
        let (axes, _) = tensor::reduce_shape(self.shape(), axes)?;
        bind(Primitive::ReduceSum(axes), &[self])
    }

    pub fn mean(&self, axes: Option<&[usize]>) -> Result<Array> {
        let (axes, _) = tensor::reduce_shape(self.shape(), axes)?;
        bind(Primitive::ReduceMean(axes), &[self])
    }

    pub fn broadcast_to(&self, shape: impl Into<Shape>) -> Result<Array> {
        bind(Primitive::BroadcastTo(shape.into()), &[self])
    }

    pub fn transpose(&self, perm: &[usize]) -> Result<Array> {
        bind(Primitive::Transpose(perm.to_vec()), &[self])
    }

    /// Swaps the two axes of a matrix.
    pub fn t(&self) -> Result<Array> {
        self.transpose(&[1, 0])
    }

    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Array> {
        bind(Primitive::Reshape(shape.into()), &[self])
    }
}

impl fmt::Display for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Array::Concrete(t) => write!(f, "{t}"),
            Array::Traced(t) => write!(f, "Traced<{}>", t.aval),
        }
    }
}

// ---------------------------------------------------------------------------
// The per-thread trace stack.

static NEXT_FRAME: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ConstKey {
    dtype: DType,
    shape: Shape,
    bytes: Vec<u8>,
}

struct Frame {
    id: u64,
    vars: Vec<Aval>,
    inputs: Vec<VarId>,
    constants: Vec<(VarId, Tensor)>,
    const_index: HashMap<ConstKey, VarId>,
    equations: Vec<Equation>,
    /// Tracers of enclosing traces used here, with the local input bound to each.
    captures: Vec<(Array, VarId)>,
    capture_index: HashMap<(u64, VarId), VarId>,
}

impl Frame {
    fn new() -> Self {
        Frame {
            id: NEXT_FRAME.fetch_add(1, Ordering::Relaxed),
            vars: Vec::new(),
            inputs: Vec::new(),
            constants: Vec::new(),
            const_index: HashMap::new(),
            equations: Vec::new(),
            captures: Vec::new(),
            capture_index: HashMap::new(),
        }
    }

    fn new_var(&mut self, aval: Aval) -> VarId {
        let id = VarId(self.vars.len() as u32);
        self.vars.push(aval);
        id
    }

    /// Local variable for an operand. Callers guarantee tracers belong to
    /// this frame or to an enclosing one.
    fn var_for(&mut self, a: &Array) -> VarId {
        match a {
            Array::Traced(t) if t.frame == self.id => t.var,
            Array::Traced(t) => {
                if let Some(&v) = self.capture_index.get(&(t.frame, t.var)) {
                    return v;
                }
                let v = self.new_var(t.aval.clone());
                self.capture_index.insert((t.frame, t.var), v);
                self.captures.push((a.clone(), v));
                v
            }
            Array::Concrete(t) => {
                let key = ConstKey {
                    dtype: t.dtype(),
                    shape: t.shape().clone(),
                    bytes: t.to_le_bytes(),
                };
                if let Some(&v) = self.const_index.get(&key) {
                    return v;
                }
                let v = self.new_var(Aval::new(t.shape().clone(), t.dtype()));
                self.const_index.insert(key, v);
                self.constants.push((v, t.clone()));
                v
            }
        }
    }
}

thread_local! {
    static STACK: RefCell<Vec<Frame>> = const { RefCell::new(Vec::new()) };
}

/// Number of traces currently open on this thread.
pub fn trace_depth() -> usize {
    STACK.with(|s| s.borrow().len())
}

/// Applies a primitive: eagerly when all operands are concrete, otherwise by
/// recording an equation in the innermost trace that owns an operand.
pub fn bind(prim: Primitive, args: &[&Array]) -> Result<Array> {
    let traced = args.iter().any(|a| a.is_traced());
    if !traced {
        let tensors: Vec<&Tensor> = args
            .iter()
            .map(|a| a.as_tensor().expect("all concrete"))
            .collect();
        return prim.eval(&tensors).map(Array::Concrete);
    }
    let avals: Vec<Aval> = args.iter().map(|a| a.aval()).collect();
    let out_aval = prim.infer(&avals)?;
    STACK.with(|stack| {
        let mut stack = stack.borrow_mut();
        let mut target = 0;
        for a in args {
            if let Array::Traced(t) = a {
                let level = stack
                    .iter()
                    .position(|f| f.id == t.frame)
                    .ok_or(Error::TracerLeak { op: prim.name() })?;
                target = target.max(level);
            }
        }
        let frame = &mut stack[target];
        let inputs = args.iter().map(|a| frame.var_for(a)).collect();
        let out = frame.new_var(out_aval.clone());
        frame.equations.push(Equation { prim, inputs, out });
        Ok(Array::Traced(Tracer {
            frame: frame.id,
            var: out,
            aval: out_aval,
        }))
    })
}

/// Pops its frame on drop so that errors inside a traced body never leave a
/// stale trace on the stack.
struct FrameGuard {
    id: u64,
    active: bool,
}

impl FrameGuard {
    fn push() -> Result<Self> {
        STACK.with(|stack| {
            let mut stack = stack.borrow_mut();
            if stack.len() >= MAX_NESTING {
                return Err(Error::NestingTooDeep {
                    depth: stack.len() + 1,
                    max: MAX_NESTING,
                });
            }
            let frame = Frame::new();
            let id = frame.id;
            stack.push(frame);
            Ok(FrameGuard { id, active: true })
        })
    }

    fn with_frame<R>(&self, f: impl FnOnce(&mut Frame) -> R) -> R {
        STACK.with(|stack| {
            let mut stack = stack.borrow_mut();
            let frame = stack
                .iter_mut()
                .find(|fr| fr.id == self.id)
                .expect("guarded frame is on the stack");
            f(frame)
        })
    }

    fn new_input(&self, aval: Aval) -> Array {
        self.with_frame(|frame| {
            let var = frame.new_var(aval.clone());
            frame.inputs.push(var);
            Array::Traced(Tracer {
                frame: frame.id,
                var,
                aval,
            })
        })
    }

    /// Local variable for a traced function's output value.
    fn output_var(&self, a: &Array) -> Result<VarId> {
        if let Array::Traced(t) = a {
            let live = STACK.with(|s| s.borrow().iter().any(|f| f.id == t.frame));
            if !live {
                return Err(Error::TracerLeak { op: "output" });
            }
        }
        Ok(self.with_frame(|frame| frame.var_for(a)))
    }

    fn finish(mut self) -> Frame {
        self.active = false;
        STACK.with(|stack| {
            let mut stack = stack.borrow_mut();
            let top = stack.pop().expect("trace stack is not empty");
            assert_eq!(top.id, self.id, "trace frames must close in LIFO order");
            top
        })
    }
}

impl Drop for FrameGuard {
    fn drop(&mut self) {
        if self.active {
            STACK.with(|stack| {
                let mut stack = stack.borrow_mut();
                if let Some(pos) = stack.iter().position(|f| f.id == self.id) {
                    stack.truncate(pos);
                }
            });
        }
    }
}

/// Result of tracing a tree-valued function.
pub(crate) struct Traced {
    /// Declared inputs first, then one input per captured outer value.
    pub graph: Graph,
    pub captures: Vec<Array>,
    pub out_fp: Fingerprint,
    /// One slot per output leaf: `None` for array leaves (graph outputs, in
    /// order), `Some` for non-array leaves passed through unchanged.
    pub out_static: Vec<Option<Leaf>>,
}

impl Traced {
    /// Rebuilds the output tree from the graph's output values.
    pub fn assemble(&self, outputs: Vec<Array>) -> Result<PyTree> {
        let mut outs = outputs.into_iter();
        let leaves = self
            .out_static
            .iter()
            .map(|slot| match slot {
                Some(leaf) => leaf.clone(),
                None => Leaf::Array(outs.next().expect("one value per array output")),
            })
            .collect();
        crate::pytree::unflatten(&self.out_fp, leaves)
    }
}

/// Opens a trace, runs `body` on one tracer per input aval, and closes the
/// trace into a graph.
pub(crate) fn trace_flat(
    input_avals: &[Aval],
    body: impl FnOnce(&[Array]) -> Result<PyTree>,
) -> Result<Traced> {
    let guard = FrameGuard::push()?;
    let tracers: Vec<Array> = input_avals
        .iter()
        .map(|a| guard.new_input(a.clone()))
        .collect();
    let out = body(&tracers)?;
    let (leaves, out_fp) = flatten(&out);
    let mut outputs = Vec::new();
    let mut out_static = Vec::with_capacity(leaves.len());
    for leaf in leaves {
        match leaf {
            Leaf::Array(a) => {
                outputs.push(guard.output_var(&a)?);
                out_static.push(None);
            }
            other => out_static.push(Some(other)),
        }
    }
    let frame = guard.finish();
    let mut inputs = frame.inputs;
    let mut captures = Vec::with_capacity(frame.captures.len());
    for (outer, var) in frame.captures {
        inputs.push(var);
        captures.push(outer);
    }
    Ok(Traced {
        graph: Graph {
            vars: frame.vars,
            inputs,
            constants: frame.constants,
            equations: frame.equations,
            outputs,
        },
        captures,
        out_fp,
        out_static,
    })
}

/// Splits tree arguments into their array leaves (graph inputs) and a
/// rebuild function that substitutes new arrays at those positions.
pub(crate) struct ArgLayout {
    fps: Vec<Fingerprint>,
    leaves: Vec<Vec<Leaf>>,
}

impl ArgLayout {
    pub fn new(args: &[PyTree]) -> Self {
        let (leaves, fps) = args.iter().map(flatten).unzip();
        ArgLayout { fps, leaves }
    }

    pub fn arrays(&self) -> Vec<Array> {
        self.leaves
            .iter()
            .flatten()
            .filter_map(|l| l.as_array().cloned())
            .collect()
    }

    pub fn non_arrays(&self) -> impl Iterator<Item = &Leaf> {
        self.leaves
            .iter()
            .flatten()
            .filter(|l| l.as_array().is_none())
    }

    pub fn fingerprints(&self) -> &[Fingerprint] {
        &self.fps
    }

    pub fn leaves(&self) -> &[Vec<Leaf>] {
        &self.leaves
    }

    /// Arguments with the array leaves replaced, in order, by `arrays`.
    pub fn rebuild(&self, arrays: &[Array]) -> Result<Vec<PyTree>> {
        let mut it = arrays.iter();
        self.fps
            .iter()
            .zip(&self.leaves)
            .map(|(fp, leaves)| {
                let new = leaves
                    .iter()
                    .map(|l| match l {
                        Leaf::Array(_) => {
                            Leaf::Array(it.next().expect("one array per slot").clone())
                        }
                        other => other.clone(),
                    })
                    .collect();
                crate::pytree::unflatten(fp, new)
            })
            .collect()
    }
}

/// Records `f` applied to `args` as a graph. Array leaves of the arguments
/// become graph inputs in flatten order; every other leaf is baked in.
pub fn trace<F>(f: F, args: &[PyTree]) -> Result<Graph>
where
    F: FnOnce(&[PyTree]) -> Result<PyTree>,
{
    let layout = ArgLayout::new(args);
    let avals: Vec<Aval> = layout.arrays().iter().map(Array::aval).collect();
    let traced = trace_flat(&avals, |tracers| f(&layout.rebuild(tracers)?))?;
    if !traced.captures.is_empty() {
        return Err(Error::Trace(
            "function closes over values of an enclosing trace; trace it inside that transformation instead"
                .into(),
        ));
    }
    Ok(traced.graph)
}

/// Evaluates a graph by binding each equation, so tracer inputs re-record the
/// program into the enclosing trace. Returns every variable's value.
pub(crate) fn interpret(graph: &Graph, inputs: &[Array]) -> Result<Vec<Option<Array>>> {
    let mut env: Vec<Option<Array>> = vec![None; graph.vars.len()];
    for (&var, value) in graph.inputs.iter().zip(inputs) {
        env[var.index()] = Some(value.clone());
    }
    for (var, t) in &graph.constants {
        env[var.index()] = Some(Array::Concrete(t.clone()));
    }
    for eq in &graph.equations {
        let args: Vec<&Array> = eq
            .inputs
            .iter()
            .map(|v| env[v.index()].as_ref().expect("graph is in SSA order"))
            .collect();
        let out = bind(eq.prim.clone(), &args)?;
        env[eq.out.index()] = Some(out);
    }
    Ok(env)
}

pub(crate) fn interpret_outputs(graph: &Graph, inputs: &[Array]) -> Result<Vec<Array>> {
    let env = interpret(graph, inputs)?;
    Ok(graph
        .outputs
        .iter()
        .map(|v| env[v.index()].clone().expect("outputs are defined"))
        .collect())
}
