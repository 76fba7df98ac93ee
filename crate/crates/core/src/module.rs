//! Modules: registered record nodes that are both parameters and functions.
//!
//! A [`ModuleSchema`] declares fields as child subtrees or static values and
//! a set of methods. Defining a schema registers a node kind, so module
//! values flatten, unflatten and transform like any other tree. Methods are
//! registered [`FunctionRef`]s named `Tag.method`, called with the module as
//! their first argument.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, OnceLock, RwLock};

use crate::error::{Error, Result};
use crate::pytree::{
    register_function, register_node_kind, FunctionRef, Leaf, NodeRegistration, PyTree, Record,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// Part of the tree: its leaves are flattened.
    Child,
    /// Folded into the fingerprint; must hold a non-array leaf.
    Static,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn child(name: impl Into<String>) -> Self {
        FieldSpec {
            name: name.into(),
            kind: FieldKind::Child,
        }
    }

    pub fn fixed(name: impl Into<String>) -> Self {
        FieldSpec {
            name: name.into(),
            kind: FieldKind::Static,
        }
    }
}

/// Body of a method: receives the module record and the call inputs.
pub type MethodFn = Arc<dyn Fn(&Record, &PyTree) -> Result<PyTree> + Send + Sync>;

/// Name of the forward method invoked by [`apply`].
pub const FORWARD: &str = "call";

#[derive(Debug)]
pub struct ModuleSchema {
    tag: String,
    fields: Vec<FieldSpec>,
    methods: BTreeMap<String, FunctionRef>,
}

impl ModuleSchema {
    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn method(&self, name: &str) -> Result<&FunctionRef> {
        self.methods.get(name).ok_or_else(|| Error::UnknownMethod {
            tag: self.tag.clone(),
            method: name.to_string(),
        })
    }

    pub fn method_names(&self) -> impl Iterator<Item = &str> {
        self.methods.keys().map(String::as_str)
    }

    fn spec(&self, field: &str) -> Result<&FieldSpec> {
        self.fields
            .iter()
            .find(|f| f.name == field)
            .ok_or_else(|| Error::UnknownField {
                tag: self.tag.clone(),
                field: field.to_string(),
            })
    }

    fn check_value(&self, spec: &FieldSpec, value: &PyTree) -> Result<()> {
        if spec.kind == FieldKind::Static {
            match value {
                PyTree::Leaf(l) if l.as_array().is_none() => {}
                _ => {
                    return Err(Error::Schema {
                        tag: self.tag.clone(),
                        detail: format!("static field `{}` must hold a non-array leaf", spec.name),
                    })
                }
            }
        }
        Ok(())
    }
}

fn schemas() -> &'static RwLock<HashMap<String, Arc<ModuleSchema>>> {
    static SCHEMAS: OnceLock<RwLock<HashMap<String, Arc<ModuleSchema>>>> = OnceLock::new();
    SCHEMAS.get_or_init(Default::default)
}

pub fn lookup_schema(tag: &str) -> Result<Arc<ModuleSchema>> {
    schemas()
        .read()
        .expect("schema registry poisoned")
        .get(tag)
        .cloned()
        .ok_or_else(|| Error::UnknownTag(tag.to_string()))
}

/// Defines a module kind whose forward pass is `forward`.
pub fn define_schema(
    tag: &str,
    fields: Vec<FieldSpec>,
    forward: MethodFn,
) -> Result<Arc<ModuleSchema>> {
    define_schema_with_methods(tag, fields, vec![(FORWARD.to_string(), forward)])
}

/// Defines a module kind with several named methods; `call` is the forward pass.
pub fn define_schema_with_methods(
    tag: &str,
    fields: Vec<FieldSpec>,
    methods: Vec<(String, MethodFn)>,
) -> Result<Arc<ModuleSchema>> {
    let schema_err = |detail: String| Error::Schema {
        tag: tag.to_string(),
        detail,
    };
    let mut seen = HashSet::new();
    for f in &fields {
        if !seen.insert(f.name.as_str()) {
            return Err(schema_err(format!("duplicate field `{}`", f.name)));
        }
    }
    let mut seen = HashSet::new();
    for (name, _) in &methods {
        if !seen.insert(name.as_str()) {
            return Err(schema_err(format!("duplicate method `{name}`")));
        }
    }

    let to_fields = fields.clone();
    let from_fields = fields.clone();
    let from_tag = tag.to_string();
    let child_names = fields
        .iter()
        .filter(|f| f.kind == FieldKind::Child)
        .map(|f| f.name.clone())
        .collect();
    let registration = NodeRegistration::new(
        tag,
        move |rec: &Record| {
            let mut children = Vec::new();
            let mut payload = Vec::new();
            for spec in &to_fields {
                let value = rec.field(&spec.name).expect("instances carry every field");
                match spec.kind {
                    FieldKind::Child => children.push(value.clone()),
                    FieldKind::Static => {
                        let leaf = value.as_leaf().expect("static fields hold leaves").clone();
                        payload.push((Arc::from(spec.name.as_str()), leaf));
                    }
                }
            }
            (children, payload)
        },
        move |payload, children| {
            let mut children = children.into_iter();
            let mut out = Vec::with_capacity(from_fields.len());
            for spec in &from_fields {
                let value = match spec.kind {
                    FieldKind::Child => children.next(),
                    FieldKind::Static => payload
                        .iter()
                        .find(|(n, _)| n.as_ref() == spec.name)
                        .map(|(_, l)| PyTree::Leaf(l.clone())),
                };
                let value = value.ok_or_else(|| Error::Schema {
                    tag: from_tag.clone(),
                    detail: format!("field `{}` missing while rebuilding", spec.name),
                })?;
                out.push((Arc::from(spec.name.as_str()), value));
            }
            if children.next().is_some() {
                return Err(Error::Schema {
                    tag: from_tag.clone(),
                    detail: "too many children".into(),
                });
            }
            Ok(Record::new(from_tag.as_str(), out))
        },
    )
    .with_child_names(child_names);
    register_node_kind(registration)?;

    let methods = methods
        .into_iter()
        .map(|(name, body)| {
            let owner = tag.to_string();
            let func = FunctionRef::new(format!("{tag}.{name}"), move |args| {
                let rec = args
                    .first()
                    .and_then(PyTree::as_record)
                    .filter(|r| r.tag() == owner)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "method of {owner} needs a {owner} receiver"
                        ))
                    })?;
                let unit = PyTree::Tup(vec![]);
                body(rec, args.get(1).unwrap_or(&unit))
            });
            register_function(func.clone());
            (name, func)
        })
        .collect();

    let schema = Arc::new(ModuleSchema {
        tag: tag.to_string(),
        fields,
        methods,
    });
    schemas()
        .write()
        .expect("schema registry poisoned")
        .insert(tag.to_string(), schema.clone());
    Ok(schema)
}

/// Builds a module value. Every declared field must be given exactly once.
pub fn instantiate(schema: &ModuleSchema, values: Vec<(&str, PyTree)>) -> Result<PyTree> {
    let mut given: HashMap<&str, PyTree> = HashMap::new();
    for (name, value) in values {
        let spec = schema.spec(name)?;
        schema.check_value(spec, &value)?;
        if given.insert(name, value).is_some() {
            return Err(Error::Schema {
                tag: schema.tag.clone(),
                detail: format!("field `{name}` given twice"),
            });
        }
    }
    let mut fields = Vec::with_capacity(schema.fields.len());
    for spec in &schema.fields {
        let value = given
            .remove(spec.name.as_str())
            .ok_or_else(|| Error::Schema {
                tag: schema.tag.clone(),
                detail: format!("missing field `{}`", spec.name),
            })?;
        fields.push((Arc::from(spec.name.as_str()), value));
    }
    Ok(PyTree::Record(Record::new(schema.tag.as_str(), fields)))
}

fn module_record(module: &PyTree) -> Result<&Record> {
    module
        .as_record()
        .ok_or_else(|| Error::InvalidArgument(format!("expected a module, got {module}")))
}

/// Reads a field of a module value.
pub fn field<'a>(module: &'a PyTree, name: &str) -> Result<&'a PyTree> {
    let rec = module_record(module)?;
    rec.field(name).ok_or_else(|| Error::UnknownField {
        tag: rec.tag().to_string(),
        field: name.to_string(),
    })
}

/// Runs the module's forward pass.
pub fn apply(module: &PyTree, inputs: &PyTree) -> Result<PyTree> {
    call_method(module, FORWARD, inputs)
}

pub fn call_method(module: &PyTree, method: &str, inputs: &PyTree) -> Result<PyTree> {
    let rec = module_record(module)?;
    let schema = lookup_schema(rec.tag())?;
    schema
        .method(method)?
        .call(&[module.clone(), inputs.clone()])
}

/// A [`FunctionRef`] that applies its first argument, a module, to its
/// second. Useful as the function under `vmap`.
pub fn apply_fn() -> FunctionRef {
    static APPLY: OnceLock<FunctionRef> = OnceLock::new();
    APPLY
        .get_or_init(|| {
            let f = FunctionRef::new("apply", |args| {
                let unit = PyTree::Tup(vec![]);
                apply(
                    args.first()
                        .ok_or_else(|| Error::InvalidArgument("apply needs a module".into()))?,
                    args.get(1).unwrap_or(&unit),
                )
            });
            register_function(f.clone());
            f
        })
        .clone()
}

fn bound_method_schema() -> &'static Arc<ModuleSchema> {
    static SCHEMA: OnceLock<Arc<ModuleSchema>> = OnceLock::new();
    SCHEMA.get_or_init(|| {
        define_schema(
            "BoundMethod",
            vec![FieldSpec::fixed("method"), FieldSpec::child("self")],
            Arc::new(|rec, inputs| {
                let Some(PyTree::Leaf(Leaf::Function(method))) = rec.field("method") else {
                    return Err(Error::InvalidArgument(
                        "BoundMethod without a method".into(),
                    ));
                };
                let receiver = rec.field("self").expect("BoundMethod has a receiver");
                method.call(&[receiver.clone(), inputs.clone()])
            }),
        )
        .expect("BoundMethod is defined once")
    })
}

/// A tree whose only child is `module` and whose forward pass is the named
/// method. Its leaves are exactly the module's leaves.
pub fn bind_method(module: &PyTree, method: &str) -> Result<PyTree> {
    let rec = module_record(module)?;
    let func = lookup_schema(rec.tag())?.method(method)?.clone();
    instantiate(
        bound_method_schema(),
        vec![
            ("method", PyTree::Leaf(Leaf::Function(func))),
            ("self", module.clone()),
        ],
    )
}

/// A copy of `module` with some fields replaced.
pub fn replace_fields(module: &PyTree, updates: Vec<(&str, PyTree)>) -> Result<PyTree> {
    let rec = module_record(module)?;
    let schema = lookup_schema(rec.tag())?;
    let mut fields: Vec<(Arc<str>, PyTree)> = rec.fields().to_vec();
    for (name, value) in updates {
        let spec = schema.spec(name)?;
        schema.check_value(spec, &value)?;
        let slot = fields
            .iter_mut()
            .find(|(n, _)| n.as_ref() == name)
            .expect("instances carry every field");
        slot.1 = value;
    }
    Ok(PyTree::Record(Record::new(rec.tag(), fields)))
}
