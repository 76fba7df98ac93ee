//! Layers, initialisation and plain SGD.
//!
//! Random numbers come from a splittable splitmix64 generator. A key is a
//! `(state, gamma)` pair; the `j`-th word of a key's stream is
//! `mix64(state + (j + 1) * gamma)`, and children produced by [`key_split`]
//! are derived from the parent's words at child-dependent offsets.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::filter::{filter_jit, filter_value_and_grad};
use crate::module::{apply, apply_fn, define_schema, field, instantiate, FieldSpec, ModuleSchema};
use crate::pytree::{register_function, tree_map2, FunctionRef, Leaf, PyTree, Record};
use crate::tensor::{Shape, Tensor};
use crate::trace::Array;
use crate::transforms::{vmap, AxisSpec};

// ---------------------------------------------------------------------------
// PRNG

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output function.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix_gamma(z: u64) -> u64 {
    mix64(z) | 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PrngKey {
    pub state: u64,
    pub gamma: u64,
}

impl PrngKey {
    /// The `j`-th 64-bit word of this key's stream.
    pub fn word(&self, j: u64) -> u64 {
        mix64(
            self.state
                .wrapping_add(j.wrapping_add(1).wrapping_mul(self.gamma)),
        )
    }
}

pub fn key_new(seed: u64) -> PrngKey {
    PrngKey {
        state: mix64(seed.wrapping_add(GOLDEN_GAMMA)),
        gamma: GOLDEN_GAMMA,
    }
}

pub fn key_split(key: PrngKey, n: usize) -> Result<Vec<PrngKey>> {
    if n == 0 {
        return Err(Error::InvalidArgument("key_split needs n >= 1".into()));
    }
    Ok((0..n as u64)
        .map(|i| {
            let at = |k: u64| key.state.wrapping_add(k.wrapping_mul(key.gamma));
            PrngKey {
                state: mix64(at(2 * i + 1)),
                gamma: mix_gamma(at(2 * i + 2)),
            }
        })
        .collect())
}

/// Uniform in [0, 1) from the top 53 bits of a word.
fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normals by Box-Muller: pair `p` uses words `2p` and `2p + 1`.
pub fn normal(key: PrngKey, shape: impl Into<Shape>) -> Tensor {
    let shape = shape.into();
    let n = shape.numel();
    let mut values = Vec::with_capacity(n + 1);
    let mut p = 0;
    while values.len() < n {
        let u1 = unit_f64(key.word(2 * p));
        let u2 = unit_f64(key.word(2 * p + 1));
        let r = libm::sqrt(-2.0 * libm::log(1.0 - u1));
        let theta = 2.0 * PI * u2;
        values.push(r * libm::cos(theta));
        values.push(r * libm::sin(theta));
        p += 1;
    }
    values.truncate(n);
    Tensor::from_f64(shape, values).expect("length matches shape")
}

/// Uniform in [lo, hi).
pub fn uniform(key: PrngKey, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor {
    let shape = shape.into();
    let values = (0..shape.numel() as u64)
        .map(|j| lo + (hi - lo) * unit_f64(key.word(j)))
        .collect();
    Tensor::from_f64(shape, values).expect("length matches shape")
}

// ---------------------------------------------------------------------------
// Layers

fn array_field(rec: &Record, name: &str) -> Result<Array> {
    rec.field(name)
        .and_then(PyTree::as_array)
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("{}.{name} must be an array", rec.tag())))
}

pub fn relu() -> FunctionRef {
    static RELU: OnceLock<FunctionRef> = OnceLock::new();
    RELU.get_or_init(|| {
        let f = FunctionRef::unary("relu", |x| x.relu());
        register_function(f.clone());
        f
    })
    .clone()
}

/// `x + parameter`.
pub fn adder_schema() -> &'static Arc<ModuleSchema> {
    static S: OnceLock<Arc<ModuleSchema>> = OnceLock::new();
    S.get_or_init(|| {
        define_schema(
            "Adder",
            vec![FieldSpec::child("parameter")],
            Arc::new(|rec, x| {
                let p = array_field(rec, "parameter")?;
                Ok(PyTree::from(x.expect_array("Adder input")?.add(&p)?))
            }),
        )
        .expect("Adder is defined once")
    })
}

pub fn adder(parameter: f64) -> PyTree {
    instantiate(
        adder_schema(),
        vec![("parameter", PyTree::scalar(parameter))],
    )
    .expect("valid Adder")
}

/// `weight @ x + bias` with weight of shape (out, in).
pub fn linear_schema() -> &'static Arc<ModuleSchema> {
    static S: OnceLock<Arc<ModuleSchema>> = OnceLock::new();
    S.get_or_init(|| {
        define_schema(
            "Linear",
            vec![FieldSpec::child("weight"), FieldSpec::child("bias")],
            Arc::new(|rec, x| {
                let w = array_field(rec, "weight")?;
                let b = array_field(rec, "bias")?;
                Ok(PyTree::from(
                    w.matmul(x.expect_array("Linear input")?)?.add(&b)?,
                ))
            }),
        )
        .expect("Linear is defined once")
    })
}

pub fn linear(weight: Tensor, bias: Tensor) -> Result<PyTree> {
    instantiate(
        linear_schema(),
        vec![
            ("weight", PyTree::array(weight)),
            ("bias", PyTree::array(bias)),
        ],
    )
}

pub fn linear_init(in_features: usize, out_features: usize, key: PrngKey) -> Result<PyTree> {
    if in_features == 0 || out_features == 0 {
        return Err(Error::InvalidArgument(format!(
            "Linear({in_features}, {out_features}) needs positive sizes"
        )));
    }
    let bound = 1.0 / (in_features as f64).sqrt();
    let keys = key_split(key, 2)?;
    linear(
        uniform(keys[0], [out_features, in_features], -bound, bound),
        uniform(keys[1], [out_features], -bound, bound),
    )
}

/// Layers with `activation` between them, then `+ bias`.
pub fn my_module_schema() -> &'static Arc<ModuleSchema> {
    static S: OnceLock<Arc<ModuleSchema>> = OnceLock::new();
    S.get_or_init(|| {
        define_schema(
            "MyModule",
            vec![
                FieldSpec::child("layers"),
                FieldSpec::child("activation"),
                FieldSpec::child("bias"),
            ],
            Arc::new(|rec, x| {
                let layers = rec
                    .field("layers")
                    .and_then(PyTree::children)
                    .filter(|l| !l.is_empty())
                    .ok_or_else(|| {
                        Error::InvalidArgument(
                            "MyModule.layers must be a non-empty sequence".into(),
                        )
                    })?;
                let Some(PyTree::Leaf(Leaf::Function(act))) = rec.field("activation") else {
                    return Err(Error::InvalidArgument(
                        "MyModule.activation must be a function".into(),
                    ));
                };
                let (last, hidden) = layers.split_last().expect("non-empty");
                let mut h = x.clone();
                for layer in hidden {
                    h = act.call(&[apply(layer, &h)?])?;
                }
                let out = apply(last, &h)?;
                let bias = array_field(rec, "bias")?;
                Ok(PyTree::from(
                    out.expect_array("last layer output")?.add(&bias)?,
                ))
            }),
        )
        .expect("MyModule is defined once")
    })
}

/// Linear(2, 8) -> relu -> Linear(8, 2), plus a bias of ones.
pub fn mlp_init(key: PrngKey) -> Result<PyTree> {
    let keys = key_split(key, 2)?;
    instantiate(
        my_module_schema(),
        vec![
            (
                "layers",
                PyTree::Seq(vec![
                    linear_init(2, 8, keys[0])?,
                    linear_init(8, 2, keys[1])?,
                ]),
            ),
            ("activation", PyTree::leaf(Leaf::Function(relu()))),
            ("bias", PyTree::array(Tensor::ones([2]))),
        ],
    )
}

/// Registers the kinds and functions used by the MLP (needed before
/// loading checkpoints that mention them).
pub fn register_mlp() {
    linear_schema();
    my_module_schema();
    relu();
    apply_fn();
    mse_loss();
}

/// [`register_mlp`] plus every other layer kind defined here.
pub fn register_all() {
    register_mlp();
    adder_schema();
}

/// `p - lr * g` at every array leaf; Sentinel gradient positions keep the
/// model's leaf.
pub fn sgd_step(model: &PyTree, grads: &PyTree, lr: f64) -> Result<PyTree> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    let rate = Array::scalar(lr);
    tree_map2(model, grads, |p, g| match (p, g) {
        (_, Leaf::Sentinel) => Ok(p.clone()),
        (Leaf::Array(p), Leaf::Array(g)) => Ok(Leaf::Array(p.sub(&g.mul(&rate)?)?)),
        _ => Err(Error::InvalidArgument(format!(
            "cannot apply a {} gradient to a {} leaf",
            g.kind_name(),
            p.kind_name()
        ))),
    })
}

// ---------------------------------------------------------------------------
// The regression example: a MyModule fitted to noise.

/// `(model, x, y) -> mean((y - vmap(model)(x))^2)`.
pub fn mse_loss() -> FunctionRef {
    static LOSS: OnceLock<FunctionRef> = OnceLock::new();
    LOSS.get_or_init(|| {
        let batched = vmap(&apply_fn(), vec![AxisSpec::Broadcast, AxisSpec::Mapped]);
        let f = FunctionRef::new("mse_loss", move |args| {
            let [model, x, y] = args else {
                return Err(Error::InvalidArgument(
                    "mse_loss takes (model, x, y)".into(),
                ));
            };
            let pred = batched.call(&[model.clone(), x.clone()])?;
            let diff = y.expect_array("y")?.sub(pred.expect_array("prediction")?)?;
            Ok(PyTree::from(diff.square()?.mean(None)?))
        });
        register_function(f.clone());
        f
    })
    .clone()
}

/// Inputs, targets and initial model for a seed: the seed's key is split
/// into (x_key, y_key, model_key); x and y are (batch, 2) standard normals.
pub fn regression_setup(seed: u64, batch: usize) -> Result<(PyTree, Tensor, Tensor)> {
    let keys = key_split(key_new(seed), 3)?;
    let x = normal(keys[0], [batch, 2]);
    let y = normal(keys[1], [batch, 2]);
    Ok((mlp_init(keys[2])?, x, y))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub model: PyTree,
}

/// Runs `steps` SGD steps of the jitted, filtered value-and-gradient of
/// [`mse_loss`] on 100 samples.
pub fn train(seed: u64, steps: usize, lr: f64) -> Result<TrainReport> {
    let (mut model, x, y) = regression_setup(seed, 100)?;
    let step = filter_jit(&filter_value_and_grad(&mse_loss()));
    let (x, y) = (PyTree::array(x), PyTree::array(y));
    let eval = |model: &PyTree| -> Result<(f64, PyTree)> {
        let out = step.call(&[model.clone(), x.clone(), y.clone()])?;
        let children = out.children().expect("value_and_grad returns a pair");
        Ok((
            children[0].expect_array("loss")?.item()?,
            children[1].clone(),
        ))
    };
    let (initial_loss, mut grads) = eval(&model)?;
    let mut loss = initial_loss;
    for _ in 0..steps {
        model = sgd_step(&model, &grads, lr)?;
        (loss, grads) = eval(&model)?;
    }
    Ok(TrainReport {
        initial_loss,
        final_loss: loss,
        model,
    })
}

/// Reads a named array field of a module, e.g. a Linear's weight.
pub fn weight_of(module: &PyTree, name: &str) -> Result<Tensor> {
    field(module, name)?.expect_array(name)?.to_tensor()
}
