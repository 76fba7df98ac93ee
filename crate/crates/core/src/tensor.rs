//! Dense row-major tensors and the concrete kernels behind every primitive.
//!
//! Tensors are immutable values backed by a shared buffer. Every kernel is a
//! pure function returning a new tensor; there is no implicit dtype
//! promotion, and F64 arithmetic follows IEEE-754 (division by zero yields
//! `inf`/`nan`).

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F64,
    I64,
    Bool,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::I64 => "i64",
            DType::Bool => "bool",
        }
    }

    pub fn from_name(name: &str) -> Option<DType> {
        match name {
            "f64" => Some(DType::F64),
            "i64" => Some(DType::I64),
            "bool" => Some(DType::Bool),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Self {
        Shape(dims.into())
    }

    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// Number of elements; the empty product is 1.
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl From<&[usize]> for Shape {
    fn from(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }
}

impl<const N: usize> From<[usize; N]> for Shape {
    fn from(dims: [usize; N]) -> Self {
        Shape(dims.to_vec())
    }
}

impl From<Vec<usize>> for Shape {
    fn from(dims: Vec<usize>) -> Self {
        Shape(dims)
    }
}

/// Renders like a Python tuple: `()`, `(2,)`, `(100,2)`.
impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0.as_slice() {
            [] => f.write_str("()"),
            [d] => write!(f, "({d},)"),
            dims => {
                f.write_str("(")?;
                for (i, d) in dims.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{d}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F64(Arc<[f64]>),
    I64(Arc<[i64]>),
    Bool(Arc<[bool]>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F64(_) => DType::F64,
            TensorData::I64(_) => DType::I64,
            TensorData::Bool(_) => DType::Bool,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Shape,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: impl Into<Shape>, data: TensorData) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != data.len() {
            return Err(Error::ValueCount {
                shape: shape.to_string(),
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: impl Into<Shape>, values: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(values.into()))
    }

    pub fn from_i64(shape: impl Into<Shape>, values: Vec<i64>) -> Result<Self> {
        Tensor::new(shape, TensorData::I64(values.into()))
    }

    pub fn from_bool(shape: impl Into<Shape>, values: Vec<bool>) -> Result<Self> {
        Tensor::new(shape, TensorData::Bool(values.into()))
    }

    /// Builds a tensor of any dtype from F64 values: I64 truncates, Bool is `v != 0`.
    pub fn make(shape: impl Into<Shape>, dtype: DType, values: &[f64]) -> Result<Self> {
        match dtype {
            DType::F64 => Tensor::from_f64(shape, values.to_vec()),
            DType::I64 => Tensor::from_i64(shape, values.iter().map(|&v| v as i64).collect()),
            DType::Bool => Tensor::from_bool(shape, values.iter().map(|&v| v != 0.0).collect()),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: TensorData::F64(vec![value].into()),
        }
    }

    pub fn full(shape: impl Into<Shape>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.numel();
        Tensor {
            shape,
            data: TensorData::F64(vec![value; n].into()),
        }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Shape>) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<&[bool]> {
        match &self.data {
            TensorData::Bool(v) => Some(v),
            _ => None,
        }
    }

    /// The single value of a one-element F64 tensor.
    pub fn item(&self) -> Option<f64> {
        match self.as_f64() {
            Some([v]) => Some(*v),
            _ => None,
        }
    }

    /// Little-endian element bytes; bools are one byte each.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::Bool(v) => v.iter().map(|&b| b as u8).collect(),
        }
    }

    pub fn from_le_bytes(shape: impl Into<Shape>, dtype: DType, bytes: &[u8]) -> Result<Self> {
        let shape = shape.into();
        let width = match dtype {
            DType::F64 | DType::I64 => 8,
            DType::Bool => 1,
        };
        if bytes.len() != shape.numel() * width {
            return Err(Error::ValueCount {
                shape: shape.to_string(),
                expected: shape.numel(),
                actual: bytes.len() / width,
            });
        }
        let word = |c: &[u8]| -> [u8; 8] { c.try_into().expect("chunk of 8") };
        match dtype {
            DType::F64 => Tensor::from_f64(
                shape,
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(word(c)))
                    .collect(),
            ),
            DType::I64 => Tensor::from_i64(
                shape,
                bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(word(c)))
                    .collect(),
            ),
            DType::Bool => {
                let mut values = Vec::with_capacity(bytes.len());
                for &b in bytes {
                    match b {
                        0 => values.push(false),
                        1 => values.push(true),
                        other => {
                            return Err(Error::DType {
                                op: "from_le_bytes",
                                detail: format!("invalid bool byte {other:#04x}"),
                            })
                        }
                    }
                }
                Tensor::from_bool(shape, values)
            }
        }
    }

    /// Same shape, same dtype, and bitwise-identical contents.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F64(a), TensorData::F64(b)) => a
                .iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            (TensorData::Bool(a), TensorData::Bool(b)) => a == b,
            _ => false,
        }
    }

    fn with_f64(shape: Shape, values: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.numel(), values.len());
        Tensor {
            shape,
            data: TensorData::F64(values.into()),
        }
    }

    fn f64_data(&self, op: &'static str) -> Result<&[f64]> {
        self.as_f64().ok_or_else(|| Error::DType {
            op,
            detail: format!("requires f64, got {}", self.dtype()),
        })
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.shape, self.dtype())?;
        let n = self.numel();
        if n > 8 {
            return write!(f, " <{n} elements>");
        }
        f.write_str(" [")?;
        for i in 0..n {
            if i > 0 {
                f.write_str(", ")?;
            }
            match &self.data {
                TensorData::F64(v) => write!(f, "{:?}", v[i])?,
                TensorData::I64(v) => write!(f, "{}", v[i])?,
                TensorData::Bool(v) => write!(f, "{}", v[i])?,
            }
        }
        f.write_str("]")
    }
}

// ---------------------------------------------------------------------------
// Shape rules. Shared by the eager kernels and by trace-time shape inference.

/// Broadcast two shapes with trailing-dimension alignment.
pub fn broadcast_shapes(op: &'static str, a: &Shape, b: &Shape) -> Result<Shape> {
    let rank = a.rank().max(b.rank());
    let mut out = vec![0; rank];
    for (i, slot) in out.iter_mut().enumerate() {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        *slot = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    detail: format!("cannot broadcast {a} with {b}"),
                })
            }
        };
    }
    Ok(Shape(out))
}

fn dim_from_end(s: &Shape, from_end: usize) -> usize {
    if from_end < s.rank() {
        s.0[s.rank() - 1 - from_end]
    } else {
        1
    }
}

/// Checks that `src` can be broadcast to `target` and returns nothing else.
pub fn check_broadcast_to(src: &Shape, target: &Shape) -> Result<()> {
    let ok = src.rank() <= target.rank()
        && (0..src.rank()).all(|i| {
            let s = dim_from_end(src, i);
            s == 1 || s == dim_from_end(target, i)
        });
    if ok {
        Ok(())
    } else {
        Err(Error::Shape {
            op: "broadcast_to",
            detail: format!("cannot broadcast {src} to {target}"),
        })
    }
}

pub fn matmul_shape(a: &Shape, b: &Shape) -> Result<Shape> {
    let mismatch = || Error::Shape {
        op: "matmul",
        detail: format!("inner dimensions disagree: {a} x {b}"),
    };
    match (a.dims(), b.dims()) {
        ([m, k], [k2, n]) => (k == k2).then(|| Shape(vec![*m, *n])).ok_or_else(mismatch),
        ([k], [k2, n]) => (k == k2).then(|| Shape(vec![*n])).ok_or_else(mismatch),
        ([m, k], [k2]) => (k == k2).then(|| Shape(vec![*m])).ok_or_else(mismatch),
        ([k], [k2]) => (k == k2).then(Shape::scalar).ok_or_else(mismatch),
        _ => Err(Error::Shape {
            op: "matmul",
            detail: format!("operands must have rank 1 or 2, got {a} x {b}"),
        }),
    }
}

/// Validates reduction axes and returns them sorted and deduplicated together
/// with the reduced shape. `None` reduces every axis.
pub fn reduce_shape(shape: &Shape, axes: Option<&[usize]>) -> Result<(Vec<usize>, Shape)> {
    let mut axes: Vec<usize> = match axes {
        Some(axes) => axes.to_vec(),
        None => (0..shape.rank()).collect(),
    };
    axes.sort_unstable();
    axes.dedup();
    if let Some(&bad) = axes.iter().find(|&&a| a >= shape.rank()) {
        return Err(Error::Shape {
            op: "reduce",
            detail: format!("axis {bad} out of range for shape {shape}"),
        });
    }
    let out = shape
        .dims()
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect::<Vec<_>>();
    Ok((axes, Shape(out)))
}

pub fn transpose_shape(shape: &Shape, perm: &[usize]) -> Result<Shape> {
    let mut seen = vec![false; shape.rank()];
    let valid = perm.len() == shape.rank()
        && perm
            .iter()
            .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
    if !valid {
        return Err(Error::Shape {
            op: "transpose",
            detail: format!("{perm:?} is not a permutation of the axes of {shape}"),
        });
    }
    Ok(Shape(perm.iter().map(|&p| shape.0[p]).collect()))
}

pub fn check_reshape(src: &Shape, target: &Shape) -> Result<()> {
    if src.numel() == target.numel() {
        Ok(())
    } else {
        Err(Error::Shape {
            op: "reshape",
            detail: format!(
                "cannot reshape {src} ({} elements) to {target} ({} elements)",
                src.numel(),
                target.numel()
            ),
        })
    }
}

/// For each row-major position of `out`, the flat index of the source element
/// it reads under broadcasting.
fn broadcast_index_map(src: &Shape, out: &Shape) -> Vec<usize> {
    let rank = out.rank();
    let offset = rank - src.rank();
    let src_strides = src.strides();
    // Effective stride per output axis (0 where the source is broadcast).
    let eff: Vec<usize> = (0..rank)
        .map(|i| {
            if i < offset || src.0[i - offset] == 1 {
                0
            } else {
                src_strides[i - offset]
            }
        })
        .collect();
    let n = out.numel();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out.0[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Kernels.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

pub fn elementwise_binary(op: BinaryOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dtype() != b.dtype() {
        return Err(Error::DType {
            op: op.name(),
            detail: format!("operands have {} and {}", a.dtype(), b.dtype()),
        });
    }
    let shape = broadcast_shapes(op.name(), &a.shape, &b.shape)?;
    let ia = broadcast_index_map(&a.shape, &shape);
    let ib = broadcast_index_map(&b.shape, &shape);
    match (&a.data, &b.data) {
        (TensorData::F64(x), TensorData::F64(y)) => {
            let f: fn(f64, f64) -> f64 = match op {
                BinaryOp::Add => |p, q| p + q,
                BinaryOp::Sub => |p, q| p - q,
                BinaryOp::Mul => |p, q| p * q,
                BinaryOp::Div => |p, q| p / q,
            };
            let values = ia.iter().zip(&ib).map(|(&i, &j)| f(x[i], y[j])).collect();
            Ok(Tensor::with_f64(shape, values))
        }
        (TensorData::I64(x), TensorData::I64(y)) => {
            let mut values = Vec::with_capacity(ia.len());
            for (&i, &j) in ia.iter().zip(&ib) {
                values.push(match op {
                    BinaryOp::Add => x[i].wrapping_add(y[j]),
                    BinaryOp::Sub => x[i].wrapping_sub(y[j]),
                    BinaryOp::Mul => x[i].wrapping_mul(y[j]),
                    BinaryOp::Div => x[i]
                        .checked_div(y[j])
                        .ok_or_else(|| Error::InvalidArgument("integer division by zero".into()))?,
                });
            }
            Tensor::from_i64(shape, values)
        }
        _ => Err(Error::DType {
            op: op.name(),
            detail: "arithmetic is not defined on bool".into(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Neg,
    Relu,
    /// Heaviside step: 1 where `x > 0`, else 0. The relu derivative mask.
    Step,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Relu => "relu",
            UnaryOp::Step => "step",
        }
    }
}

pub fn elementwise_unary(op: UnaryOp, a: &Tensor) -> Result<Tensor> {
    match (op, &a.data) {
        (UnaryOp::Neg, TensorData::F64(x)) => Ok(Tensor::with_f64(
            a.shape.clone(),
            x.iter().map(|v| -v).collect(),
        )),
        (UnaryOp::Neg, TensorData::I64(x)) => Tensor::from_i64(
            a.shape.clone(),
            x.iter().map(|v| v.wrapping_neg()).collect(),
        ),
        (UnaryOp::Relu, TensorData::F64(x)) => Ok(Tensor::with_f64(
            a.shape.clone(),
            x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        )),
        (UnaryOp::Step, TensorData::F64(x)) => Ok(Tensor::with_f64(
            a.shape.clone(),
            x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
        )),
        _ => Err(Error::DType {
            op: op.name(),
            detail: format!("not defined on {}", a.dtype()),
        }),
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let shape = matmul_shape(&a.shape, &b.shape)?;
    let x = a.f64_data("matmul")?;
    let y = b.f64_data("matmul")?;
    // View vectors as (1,k) rows on the left and (k,1) columns on the right.
    let (m, k) = match a.shape.dims() {
        [m, k] => (*m, *k),
        [k] => (1, *k),
        _ => unreachable!("rank checked by matmul_shape"),
    };
    let n = match b.shape.dims() {
        [_, n] => *n,
        _ => 1,
    };
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += x[i * k + p] * y[p * n + j];
            }
            out.push(acc);
        }
    }
    Ok(Tensor::with_f64(shape, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
}

pub fn reduce(op: ReduceOp, a: &Tensor, axes: Option<&[usize]>) -> Result<Tensor> {
    let (axes, out_shape) = reduce_shape(&a.shape, axes)?;
    // Output flat index for every input position, via the keep-dims shape.
    let keep: Vec<usize> = a
        .shape
        .dims()
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let keep = Shape(keep);
    let count: usize = axes.iter().map(|&ax| a.shape.0[ax]).product();
    let out_index = reduce_index_map(&a.shape, &keep);
    match (&a.data, op) {
        (TensorData::F64(x), _) => {
            let mut acc = vec![0.0f64; out_shape.numel()];
            for (i, &o) in out_index.iter().enumerate() {
                acc[o] += x[i];
            }
            if op == ReduceOp::Mean {
                let c = count as f64;
                for v in &mut acc {
                    *v /= c;
                }
            }
            Ok(Tensor::with_f64(out_shape, acc))
        }
        (TensorData::I64(x), ReduceOp::Sum) => {
            let mut acc = vec![0i64; out_shape.numel()];
            for (i, &o) in out_index.iter().enumerate() {
                acc[o] = acc[o].wrapping_add(x[i]);
            }
            Tensor::from_i64(out_shape, acc)
        }
        _ => Err(Error::DType {
            op: if op == ReduceOp::Sum {
                "reduce_sum"
            } else {
                "reduce_mean"
            },
            detail: format!("not defined on {}", a.dtype()),
        }),
    }
}

/// Maps each input position to its output position when collapsing to `keep`
/// (same rank, reduced axes set to 1).
fn reduce_index_map(src: &Shape, keep: &Shape) -> Vec<usize> {
    let keep_strides = keep.strides();
    let rank = src.rank();
    let n = src.numel();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let flat: usize = (0..rank)
            .map(|ax| {
                if keep.0[ax] == 1 {
                    0
                } else {
                    idx[ax] * keep_strides[ax]
                }
            })
            .sum();
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < src.0[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn gather(a: &Tensor, shape: Shape, index: &[usize]) -> Tensor {
    let data = match &a.data {
        TensorData::F64(x) => TensorData::F64(index.iter().map(|&i| x[i]).collect()),
        TensorData::I64(x) => TensorData::I64(index.iter().map(|&i| x[i]).collect()),
        TensorData::Bool(x) => TensorData::Bool(index.iter().map(|&i| x[i]).collect()),
    };
    Tensor { shape, data }
}

pub fn broadcast_to(a: &Tensor, target: &Shape) -> Result<Tensor> {
    check_broadcast_to(&a.shape, target)?;
    let map = broadcast_index_map(&a.shape, target);
    Ok(gather(a, target.clone(), &map))
}

pub fn transpose(a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let out_shape = transpose_shape(&a.shape, perm)?;
    let src_strides = a.shape.strides();
    // Stride in the source for each output axis.
    let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let rank = out_shape.rank();
    let n = out_shape.numel();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += eff[ax];
            if idx[ax] < out_shape.0[ax] {
                break;
            }
            flat -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Ok(gather(a, out_shape, &map))
}

pub fn reshape(a: &Tensor, target: &Shape) -> Result<Tensor> {
    check_reshape(&a.shape, target)?;
    Ok(Tensor {
        shape: target.clone(),
        data: a.data.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_f64(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn constructors() {
        assert_eq!(Tensor::ones([2]).as_f64().unwrap(), &[1.0, 1.0]);
        let z = Tensor::zeros(Shape::scalar());
        assert_eq!(z.shape().rank(), 0);
        assert_eq!(z.item(), Some(0.0));
        let err = Tensor::make([2, 2], DType::F64, &[1.0; 5]).unwrap_err();
        assert!(matches!(
            err,
            Error::ValueCount {
                expected: 4,
                actual: 5,
                ..
            }
        ));
    }

    #[test]
    fn binary_broadcast_and_errors() {
        let r =
            elementwise_binary(BinaryOp::Add, &t(&[2], &[1.0, 2.0]), &Tensor::scalar(3.0)).unwrap();
        assert_eq!(r.as_f64().unwrap(), &[4.0, 5.0]);
        let y = Tensor::ones([100, 2]);
        let p = Tensor::zeros([100, 2]);
        let d = elementwise_binary(BinaryOp::Sub, &y, &p).unwrap();
        let sq = elementwise_binary(BinaryOp::Mul, &d, &d).unwrap();
        assert_eq!(sq.shape(), &Shape::from([100, 2]));
        let err = elementwise_binary(BinaryOp::Add, &Tensor::zeros([3]), &Tensor::zeros([4]));
        assert!(matches!(err, Err(Error::Shape { .. })));
        let i = Tensor::from_i64([1], vec![1]).unwrap();
        assert!(matches!(
            elementwise_binary(BinaryOp::Add, &i, &Tensor::scalar(1.0)),
            Err(Error::DType { .. })
        ));
    }

    #[test]
    fn division_is_ieee() {
        let r =
            elementwise_binary(BinaryOp::Div, &t(&[2], &[1.0, 0.0]), &Tensor::scalar(0.0)).unwrap();
        let v = r.as_f64().unwrap();
        assert!(v[0].is_infinite() && v[1].is_nan());
    }

    #[test]
    fn unary_ops() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        let r = elementwise_unary(UnaryOp::Relu, &x).unwrap();
        assert_eq!(r.as_f64().unwrap(), &[0.0, 0.0, 2.0]);
        let s = elementwise_unary(UnaryOp::Step, &x).unwrap();
        assert_eq!(s.as_f64().unwrap(), &[0.0, 0.0, 1.0]);
        let nn =
            elementwise_unary(UnaryOp::Neg, &elementwise_unary(UnaryOp::Neg, &x).unwrap()).unwrap();
        assert!(nn.bitwise_eq(&x));
        let b = Tensor::from_bool([1], vec![true]).unwrap();
        assert!(matches!(
            elementwise_unary(UnaryOp::Relu, &b),
            Err(Error::DType { .. })
        ));
        let i = Tensor::from_i64([1], vec![1]).unwrap();
        assert!(matches!(
            elementwise_unary(UnaryOp::Relu, &i),
            Err(Error::DType { .. })
        ));
    }

    #[test]
    fn matmul_cases() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let col = t(&[2, 1], &[5.0, 6.0]);
        assert!(matmul(&eye, &col).unwrap().bitwise_eq(&col));
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let v = t(&[2], &[5.0, 6.0]);
        assert_eq!(matmul(&a, &v).unwrap().as_f64().unwrap(), &[17.0, 39.0]);
        assert_eq!(matmul(&v, &a).unwrap().as_f64().unwrap(), &[23.0, 34.0]);
        assert_eq!(matmul(&v, &v).unwrap().item(), Some(61.0));
        assert!(matches!(
            matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([4, 2])),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            matmul(&Tensor::zeros([2, 2, 2]), &Tensor::zeros([2, 2])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn reductions() {
        let x = t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        assert_eq!(reduce(ReduceOp::Mean, &x, None).unwrap().item(), Some(4.0));
        let s = reduce(ReduceOp::Sum, &x, Some(&[0])).unwrap();
        assert_eq!(s.as_f64().unwrap(), &[6.0, 10.0]);
        let s = reduce(ReduceOp::Sum, &x, Some(&[1])).unwrap();
        assert_eq!(s.as_f64().unwrap(), &[4.0, 12.0]);
        assert_eq!(
            reduce(ReduceOp::Sum, &Tensor::zeros([100, 2]), Some(&[0]))
                .unwrap()
                .shape(),
            &Shape::from([2])
        );
        assert!(matches!(
            reduce(ReduceOp::Sum, &x, Some(&[2])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn restructuring() {
        let b = broadcast_to(&Tensor::scalar(2.0), &Shape::from([3])).unwrap();
        assert_eq!(b.as_f64().unwrap(), &[2.0, 2.0, 2.0]);
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let tr = transpose(&x, &[1, 0]).unwrap();
        assert_eq!(tr.shape(), &Shape::from([3, 2]));
        assert_eq!(tr.as_f64().unwrap(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert!(matches!(
            reshape(&x, &Shape::from([7])),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(transpose(&x, &[0, 0]), Err(Error::Shape { .. })));
        assert!(broadcast_to(&Tensor::zeros([3]), &Shape::from([4])).is_err());
    }

    #[test]
    fn shape_display() {
        assert_eq!(Shape::scalar().to_string(), "()");
        assert_eq!(Shape::from([2]).to_string(), "(2,)");
        assert_eq!(Shape::from([100, 2]).to_string(), "(100,2)");
    }

    #[test]
    fn byte_roundtrip() {
        let x = t(&[3], &[1.5, -0.0, f64::NAN]);
        let y = Tensor::from_le_bytes([3], DType::F64, &x.to_le_bytes()).unwrap();
        assert!(x.bitwise_eq(&y));
    }
}
