//! Nested containers of leaves: the data model every transformation works on.
//!
//! A [`PyTree`] is either a [`Leaf`] or a node: a sequence, a text-keyed
//! mapping, a fixed tuple, or a [`Record`] of a registered node kind. Trees
//! own their children, so shared substructure cannot be expressed.
//!
//! [`flatten`] turns a tree into its leaves (depth first, mapping children by
//! ascending key) plus a [`Fingerprint`]; [`unflatten`] inverts it.

mod fingerprint;
mod leaf;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, OnceLock, RwLock};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trace::Array;

pub use fingerprint::{Fingerprint, FpNode, StaticPayload};
pub use leaf::{lookup_function, register_function, FunctionRef, Leaf, Opaque};

/// An instance of a custom node kind: a tag plus named fields. How fields
/// split into children and static payload is decided by the kind's
/// [`NodeRegistration`].
#[derive(Clone, Debug)]
pub struct Record {
    tag: Arc<str>,
    fields: Arc<[(Arc<str>, PyTree)]>,
}

impl Record {
    pub fn new(tag: impl Into<Arc<str>>, fields: Vec<(Arc<str>, PyTree)>) -> Self {
        Record {
            tag: tag.into(),
            fields: fields.into(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn fields(&self) -> &[(Arc<str>, PyTree)] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&PyTree> {
        self.fields
            .iter()
            .find(|(n, _)| n.as_ref() == name)
            .map(|(_, v)| v)
    }
}

#[derive(Clone, Debug)]
pub enum PyTree {
    Leaf(Leaf),
    Seq(Vec<PyTree>),
    Map(BTreeMap<String, PyTree>),
    Tup(Vec<PyTree>),
    Record(Record),
}

impl PyTree {
    pub fn leaf(leaf: impl Into<Leaf>) -> Self {
        PyTree::Leaf(leaf.into())
    }

    pub fn array(t: Tensor) -> Self {
        PyTree::Leaf(Leaf::array(t))
    }

    /// A rank-0 F64 tensor leaf.
    pub fn scalar(v: f64) -> Self {
        PyTree::array(Tensor::scalar(v))
    }

    pub fn map<K: Into<String>>(entries: impl IntoIterator<Item = (K, PyTree)>) -> Self {
        PyTree::Map(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn as_leaf(&self) -> Option<&Leaf> {
        match self {
            PyTree::Leaf(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_array(&self) -> Option<&Array> {
        self.as_leaf().and_then(Leaf::as_array)
    }

    /// The array held by a single-leaf tree, or an error naming `what`.
    pub fn expect_array(&self, what: &str) -> Result<&Array> {
        self.as_array()
            .ok_or_else(|| Error::InvalidArgument(format!("{what}: expected an array leaf")))
    }

    pub fn as_record(&self) -> Option<&Record> {
        match self {
            PyTree::Record(r) => Some(r),
            _ => None,
        }
    }

    pub fn children(&self) -> Option<&[PyTree]> {
        match self {
            PyTree::Seq(c) | PyTree::Tup(c) => Some(c),
            _ => None,
        }
    }
}

impl From<Leaf> for PyTree {
    fn from(l: Leaf) -> Self {
        PyTree::Leaf(l)
    }
}

impl From<Array> for PyTree {
    fn from(a: Array) -> Self {
        PyTree::Leaf(Leaf::Array(a))
    }
}

impl From<Tensor> for PyTree {
    fn from(t: Tensor) -> Self {
        PyTree::array(t)
    }
}

impl From<Record> for PyTree {
    fn from(r: Record) -> Self {
        PyTree::Record(r)
    }
}

impl fmt::Display for PyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PyTree::Leaf(Leaf::Array(a)) => write!(f, "{a}"),
            PyTree::Leaf(l) => f.write_str(&l.static_text()),
            PyTree::Seq(c) => write_list(f, "[", c, "]"),
            PyTree::Tup(c) => write_list(f, "(", c, ")"),
            PyTree::Map(m) => {
                f.write_str("{")?;
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k:?}: {v}")?;
                }
                f.write_str("}")
            }
            PyTree::Record(r) => {
                write!(f, "{}(", r.tag)?;
                for (i, (k, v)) in r.fields.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{k}={v}")?;
                }
                f.write_str(")")
            }
        }
    }
}

fn write_list(f: &mut fmt::Formatter<'_>, open: &str, c: &[PyTree], close: &str) -> fmt::Result {
    f.write_str(open)?;
    for (i, v) in c.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{v}")?;
    }
    f.write_str(close)
}

// ---------------------------------------------------------------------------
// Node-kind registry.

type ToChildren = dyn Fn(&Record) -> (Vec<PyTree>, StaticPayload) + Send + Sync;
type FromChildren = dyn Fn(&StaticPayload, Vec<PyTree>) -> Result<Record> + Send + Sync;

/// How a custom node kind splits into children and static payload, and how
/// it is rebuilt from them.
pub struct NodeRegistration {
    tag: Arc<str>,
    child_names: Option<Vec<String>>,
    to_children: Box<ToChildren>,
    from_children: Box<FromChildren>,
}

impl NodeRegistration {
    pub fn new<T, F>(tag: impl Into<Arc<str>>, to_children: T, from_children: F) -> Self
    where
        T: Fn(&Record) -> (Vec<PyTree>, StaticPayload) + Send + Sync + 'static,
        F: Fn(&StaticPayload, Vec<PyTree>) -> Result<Record> + Send + Sync + 'static,
    {
        NodeRegistration {
            tag: tag.into(),
            child_names: None,
            to_children: Box::new(to_children),
            from_children: Box::new(from_children),
        }
    }

    /// Names used for children in leaf paths (error messages).
    pub fn with_child_names(mut self, names: Vec<String>) -> Self {
        self.child_names = Some(names);
        self
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }
}

impl fmt::Debug for NodeRegistration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeRegistration({})", self.tag)
    }
}

fn registry() -> &'static RwLock<HashMap<String, Arc<NodeRegistration>>> {
    static REGISTRY: OnceLock<RwLock<HashMap<String, Arc<NodeRegistration>>>> = OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

pub fn register_node_kind(reg: NodeRegistration) -> Result<()> {
    let mut map = registry().write().expect("node registry poisoned");
    if map.contains_key(reg.tag()) {
        return Err(Error::DuplicateTag(reg.tag().to_string()));
    }
    map.insert(reg.tag().to_string(), Arc::new(reg));
    Ok(())
}

pub fn is_registered(tag: &str) -> bool {
    lookup(tag).is_some()
}

fn lookup(tag: &str) -> Option<Arc<NodeRegistration>> {
    registry()
        .read()
        .expect("node registry poisoned")
        .get(tag)
        .cloned()
}

fn registered_child_names(tag: &str) -> Option<Vec<String>> {
    lookup(tag).and_then(|r| r.child_names.clone())
}

// ---------------------------------------------------------------------------
// Flatten / unflatten.

pub fn flatten(tree: &PyTree) -> (Vec<Leaf>, Fingerprint) {
    let mut leaves = Vec::new();
    let root = flatten_into(tree, &mut leaves);
    (leaves, Fingerprint::new(root))
}

/// Just the leaves, in flatten order.
pub fn leaves(tree: &PyTree) -> Vec<Leaf> {
    flatten(tree).0
}

pub fn fingerprint(tree: &PyTree) -> Fingerprint {
    flatten(tree).1
}

fn flatten_into(tree: &PyTree, leaves: &mut Vec<Leaf>) -> FpNode {
    match tree {
        PyTree::Leaf(l) => {
            leaves.push(l.clone());
            FpNode::Leaf
        }
        PyTree::Seq(c) => FpNode::Seq(c.iter().map(|t| flatten_into(t, leaves)).collect()),
        PyTree::Tup(c) => FpNode::Tup(c.iter().map(|t| flatten_into(t, leaves)).collect()),
        PyTree::Map(m) => FpNode::Map(
            m.iter()
                .map(|(k, t)| (k.clone(), flatten_into(t, leaves)))
                .collect(),
        ),
        PyTree::Record(r) => match lookup(&r.tag) {
            Some(reg) => {
                let (children, payload) = (reg.to_children)(r);
                FpNode::Reg {
                    tag: r.tag.clone(),
                    payload,
                    children: children.iter().map(|t| flatten_into(t, leaves)).collect(),
                }
            }
            None => {
                leaves.push(Leaf::Opaque(record_as_opaque(r)));
                FpNode::Leaf
            }
        },
    }
}

/// Unregistered records are opaque leaves whose identity is a digest of
/// their contents, so repeated flattens agree.
fn record_as_opaque(r: &Record) -> Opaque {
    let digest = Sha256::digest(format!("{r:?}").as_bytes());
    let token = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    Opaque::with_token(token, Arc::new(r.clone()))
}

pub fn unflatten(fp: &Fingerprint, leaves: Vec<Leaf>) -> Result<PyTree> {
    if leaves.len() != fp.num_leaves() {
        return Err(Error::LeafCount {
            expected: fp.num_leaves(),
            actual: leaves.len(),
        });
    }
    let mut iter = leaves.into_iter();
    build(fp.root(), &mut iter)
}

fn build(node: &FpNode, leaves: &mut impl Iterator<Item = Leaf>) -> Result<PyTree> {
    Ok(match node {
        FpNode::Leaf => PyTree::Leaf(leaves.next().expect("leaf count checked")),
        FpNode::Seq(c) => PyTree::Seq(c.iter().map(|n| build(n, leaves)).collect::<Result<_>>()?),
        FpNode::Tup(c) => PyTree::Tup(c.iter().map(|n| build(n, leaves)).collect::<Result<_>>()?),
        FpNode::Map(c) => PyTree::Map(
            c.iter()
                .map(|(k, n)| Ok((k.clone(), build(n, leaves)?)))
                .collect::<Result<_>>()?,
        ),
        FpNode::Reg {
            tag,
            payload,
            children,
        } => {
            let reg = lookup(tag).ok_or_else(|| Error::UnknownTag(tag.to_string()))?;
            let children = children
                .iter()
                .map(|n| build(n, leaves))
                .collect::<Result<Vec<_>>>()?;
            PyTree::Record((reg.from_children)(payload, children)?)
        }
    })
}

// ---------------------------------------------------------------------------
// Structural maps and equality.

pub fn tree_map(tree: &PyTree, mut f: impl FnMut(&Leaf) -> Leaf) -> Result<PyTree> {
    try_tree_map(tree, |l| Ok(f(l)))
}

pub fn try_tree_map(tree: &PyTree, f: impl FnMut(&Leaf) -> Result<Leaf>) -> Result<PyTree> {
    let (leaves, fp) = flatten(tree);
    let mapped = leaves.iter().map(f).collect::<Result<Vec<_>>>()?;
    unflatten(&fp, mapped)
}

/// Leafwise map over two trees with identical fingerprints.
pub fn tree_map2(
    a: &PyTree,
    b: &PyTree,
    mut f: impl FnMut(&Leaf, &Leaf) -> Result<Leaf>,
) -> Result<PyTree> {
    let (la, fa) = flatten(a);
    let (lb, fb) = flatten(b);
    if fa != fb {
        return Err(Error::Structure {
            left: fa.to_string(),
            right: fb.to_string(),
        });
    }
    let mapped = la
        .iter()
        .zip(&lb)
        .map(|(x, y)| f(x, y))
        .collect::<Result<Vec<_>>>()?;
    unflatten(&fa, mapped)
}

/// Same fingerprint and pairwise bitwise-equal leaves.
pub fn tree_equal(a: &PyTree, b: &PyTree) -> bool {
    let (la, fa) = flatten(a);
    let (lb, fb) = flatten(b);
    fa == fb && la.iter().zip(&lb).all(|(x, y)| x.bitwise_eq(y))
}
