use std::any::Any;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::Array;

use super::PyTree;

type TreeFnBox = dyn Fn(&[PyTree]) -> Result<PyTree> + Send + Sync;

/// A named pure function over PyTrees. Identity is the name: two references
/// with the same name compare equal, so names must be stable and unique.
#[derive(Clone)]
pub struct FunctionRef {
    name: Arc<str>,
    func: Arc<TreeFnBox>,
}

impl FunctionRef {
    pub fn new<F>(name: impl Into<Arc<str>>, func: F) -> Self
    where
        F: Fn(&[PyTree]) -> Result<PyTree> + Send + Sync + 'static,
    {
        FunctionRef {
            name: name.into(),
            func: Arc::new(func),
        }
    }

    /// Wraps an array-to-array function such as an activation.
    pub fn unary<F>(name: impl Into<Arc<str>>, func: F) -> Self
    where
        F: Fn(&Array) -> Result<Array> + Send + Sync + 'static,
    {
        let name: Arc<str> = name.into();
        let label = name.clone();
        FunctionRef::new(name, move |args| match args {
            [PyTree::Leaf(Leaf::Array(x))] => Ok(PyTree::Leaf(Leaf::Array(func(x)?))),
            _ => Err(Error::InvalidArgument(format!(
                "`{label}` expects a single array argument"
            ))),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn call(&self, args: &[PyTree]) -> Result<PyTree> {
        (self.func)(args)
    }

    pub fn call_array(&self, x: &Array) -> Result<Array> {
        match self.call(&[PyTree::Leaf(Leaf::Array(x.clone()))])? {
            PyTree::Leaf(Leaf::Array(y)) => Ok(y),
            other => Err(Error::InvalidArgument(format!(
                "`{}` returned a non-array result: {other:?}",
                self.name
            ))),
        }
    }
}

impl PartialEq for FunctionRef {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
    }
}

impl Eq for FunctionRef {}

impl fmt::Debug for FunctionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FunctionRef({})", self.name)
    }
}

fn function_registry() -> &'static RwLock<HashMap<String, FunctionRef>> {
    static REGISTRY: OnceLock<RwLock<HashMap<String, FunctionRef>>> = OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

/// Makes a function resolvable by name (checkpoints and fingerprints store
/// names only). Re-registering the same name replaces the entry.
pub fn register_function(func: FunctionRef) {
    function_registry()
        .write()
        .expect("function registry poisoned")
        .insert(func.name().to_string(), func);
}

pub fn lookup_function(name: &str) -> Result<FunctionRef> {
    function_registry()
        .read()
        .expect("function registry poisoned")
        .get(name)
        .cloned()
        .ok_or_else(|| Error::UnknownFunction(name.to_string()))
}

static NEXT_OPAQUE: AtomicU64 = AtomicU64::new(1);

/// An uninterpreted payload compared by identity token only.
#[derive(Clone)]
pub struct Opaque {
    token: u64,
    payload: Option<Arc<dyn Any + Send + Sync>>,
}

impl Opaque {
    pub fn new(payload: impl Any + Send + Sync) -> Self {
        Opaque {
            token: NEXT_OPAQUE.fetch_add(1, Ordering::Relaxed),
            payload: Some(Arc::new(payload)),
        }
    }

    /// Rebuilds a payload-less handle with a known identity (used when loading).
    pub fn from_token(token: u64) -> Self {
        Opaque {
            token,
            payload: None,
        }
    }

    pub(crate) fn with_token(token: u64, payload: Arc<dyn Any + Send + Sync>) -> Self {
        Opaque {
            token,
            payload: Some(payload),
        }
    }

    pub fn token(&self) -> u64 {
        self.token
    }

    pub fn payload(&self) -> Option<&(dyn Any + Send + Sync)> {
        self.payload.as_deref()
    }
}

impl PartialEq for Opaque {
    fn eq(&self, other: &Self) -> bool {
        self.token == other.token
    }
}

impl Eq for Opaque {}

impl fmt::Debug for Opaque {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Opaque(#{})", self.token)
    }
}

#[derive(Clone, Debug)]
pub enum Leaf {
    Array(Array),
    Int(i64),
    Float(f64),
    Bool(bool),
    Function(FunctionRef),
    Opaque(Opaque),
    /// Placeholder for positions removed by `partition`.
    Sentinel,
}

impl Leaf {
    pub fn array(t: Tensor) -> Leaf {
        Leaf::Array(Array::from(t))
    }

    pub fn as_array(&self) -> Option<&Array> {
        match self {
            Leaf::Array(a) => Some(a),
            _ => None,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        matches!(self, Leaf::Sentinel)
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Leaf::Array(_) => "array",
            Leaf::Int(_) => "int",
            Leaf::Float(_) => "float",
            Leaf::Bool(_) => "bool",
            Leaf::Function(_) => "fn",
            Leaf::Opaque(_) => "opaque",
            Leaf::Sentinel => "sentinel",
        }
    }

    /// Exact equality: floats and tensors compare by bit pattern, traced
    /// arrays by variable identity.
    pub fn bitwise_eq(&self, other: &Leaf) -> bool {
        match (self, other) {
            (Leaf::Array(a), Leaf::Array(b)) => a.bitwise_eq(b),
            (Leaf::Int(a), Leaf::Int(b)) => a == b,
            (Leaf::Float(a), Leaf::Float(b)) => a.to_bits() == b.to_bits(),
            (Leaf::Bool(a), Leaf::Bool(b)) => a == b,
            (Leaf::Function(a), Leaf::Function(b)) => a == b,
            (Leaf::Opaque(a), Leaf::Opaque(b)) => a == b,
            (Leaf::Sentinel, Leaf::Sentinel) => true,
            _ => false,
        }
    }

    /// Canonical text for a non-array leaf held in a static payload or a
    /// cache key. Arrays render by shape and dtype only.
    pub fn static_text(&self) -> String {
        match self {
            Leaf::Array(a) => format!("array:{}{}", a.dtype(), a.shape()),
            Leaf::Int(v) => format!("i:{v}"),
            Leaf::Float(v) => format!("f:{v:?}"),
            Leaf::Bool(v) => format!("b:{v}"),
            Leaf::Function(f) => format!("fn:{}", super::fingerprint::quote_name(f.name())),
            Leaf::Opaque(o) => format!("opaque:{}", o.token),
            Leaf::Sentinel => "sentinel".to_string(),
        }
    }
}

impl PartialEq for Leaf {
    fn eq(&self, other: &Self) -> bool {
        self.bitwise_eq(other)
    }
}

impl From<Tensor> for Leaf {
    fn from(t: Tensor) -> Self {
        Leaf::array(t)
    }
}

impl From<Array> for Leaf {
    fn from(a: Array) -> Self {
        Leaf::Array(a)
    }
}

impl From<FunctionRef> for Leaf {
    fn from(f: FunctionRef) -> Self {
        Leaf::Function(f)
    }
}
