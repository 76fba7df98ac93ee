use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{self, BinaryOp, DType, ReduceOp, Shape, Tensor, UnaryOp};

use super::Aval;

/// The instruction set of traced programs. Each primitive has an eval rule
/// (the kernels in [`crate::tensor`]), a VJP rule, and a batching rule.
///
/// `Step` is the Heaviside mask `x > 0`, used by the relu VJP rule.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Relu,
    Step,
    MatMul,
    /// Axes are sorted, unique, and in range.
    ReduceSum(Vec<usize>),
    ReduceMean(Vec<usize>),
    BroadcastTo(Shape),
    Transpose(Vec<usize>),
    Reshape(Shape),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Relu => "relu",
            Primitive::Step => "step",
            Primitive::MatMul => "matmul",
            Primitive::ReduceSum(_) => "reduce_sum",
            Primitive::ReduceMean(_) => "reduce_mean",
            Primitive::BroadcastTo(_) => "broadcast_to",
            Primitive::Transpose(_) => "transpose",
            Primitive::Reshape(_) => "reshape",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatMul => 2,
            _ => 1,
        }
    }

    fn binary_op(&self) -> Option<BinaryOp> {
        Some(match self {
            Primitive::Add => BinaryOp::Add,
            Primitive::Sub => BinaryOp::Sub,
            Primitive::Mul => BinaryOp::Mul,
            Primitive::Div => BinaryOp::Div,
            _ => return None,
        })
    }

    fn check_arity(&self, n: usize) -> Result<()> {
        if n == self.arity() {
            Ok(())
        } else {
            Err(Error::Trace(format!(
                "{} takes {} operands, got {n}",
                self.name(),
                self.arity()
            )))
        }
    }

    /// Runs the concrete kernel.
    pub fn eval(&self, args: &[&Tensor]) -> Result<Tensor> {
        self.check_arity(args.len())?;
        if let Some(op) = self.binary_op() {
            return tensor::elementwise_binary(op, args[0], args[1]);
        }
        let a = args[0];
        match self {
            Primitive::Neg => tensor::elementwise_unary(UnaryOp::Neg, a),
            Primitive::Relu => tensor::elementwise_unary(UnaryOp::Relu, a),
            Primitive::Step => tensor::elementwise_unary(UnaryOp::Step, a),
            Primitive::MatMul => tensor::matmul(a, args[1]),
            Primitive::ReduceSum(axes) => tensor::reduce(ReduceOp::Sum, a, Some(axes)),
            Primitive::ReduceMean(axes) => tensor::reduce(ReduceOp::Mean, a, Some(axes)),
            Primitive::BroadcastTo(shape) => tensor::broadcast_to(a, shape),
            Primitive::Transpose(perm) => tensor::transpose(a, perm),
            Primitive::Reshape(shape) => tensor::reshape(a, shape),
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => unreachable!(),
        }
    }

    /// Output shape and dtype; mirrors the checks the kernels perform.
    pub fn infer(&self, args: &[Aval]) -> Result<Aval> {
        self.check_arity(args.len())?;
        let dtype_err = |detail: String| Error::DType {
            op: self.name(),
            detail,
        };
        let a = &args[0];
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                let b = &args[1];
                if a.dtype != b.dtype {
                    return Err(dtype_err(format!(
                        "operands have {} and {}",
                        a.dtype, b.dtype
                    )));
                }
                if a.dtype == DType::Bool {
                    return Err(dtype_err("arithmetic is not defined on bool".into()));
                }
                let shape = tensor::broadcast_shapes(self.name(), &a.shape, &b.shape)?;
                Ok(Aval::new(shape, a.dtype))
            }
            Primitive::Neg => {
                if a.dtype == DType::Bool {
                    return Err(dtype_err("not defined on bool".into()));
                }
                Ok(a.clone())
            }
            Primitive::Relu | Primitive::Step => {
                if a.dtype != DType::F64 {
                    return Err(dtype_err(format!("not defined on {}", a.dtype)));
                }
                Ok(a.clone())
            }
            Primitive::MatMul => {
                let b = &args[1];
                if a.dtype != DType::F64 || b.dtype != DType::F64 {
                    return Err(dtype_err(format!(
                        "requires f64, got {} and {}",
                        a.dtype, b.dtype
                    )));
                }
                Ok(Aval::new(
                    tensor::matmul_shape(&a.shape, &b.shape)?,
                    DType::F64,
                ))
            }
            Primitive::ReduceSum(axes) | Primitive::ReduceMean(axes) => {
                let mean = matches!(self, Primitive::ReduceMean(_));
                if a.dtype == DType::Bool || (mean && a.dtype != DType::F64) {
                    return Err(dtype_err(format!("not defined on {}", a.dtype)));
                }
                let (_, shape) = tensor::reduce_shape(&a.shape, Some(axes))?;
                Ok(Aval::new(shape, a.dtype))
            }
            Primitive::BroadcastTo(target) => {
                tensor::check_broadcast_to(&a.shape, target)?;
                Ok(Aval::new(target.clone(), a.dtype))
            }
            Primitive::Transpose(perm) => {
                Ok(Aval::new(tensor::transpose_shape(&a.shape, perm)?, a.dtype))
            }
            Primitive::Reshape(target) => {
                tensor::check_reshape(&a.shape, target)?;
                Ok(Aval::new(target.clone(), a.dtype))
            }
        }
    }

    fn params(&self) -> Option<String> {
        match self {
            Primitive::ReduceSum(axes) | Primitive::ReduceMean(axes) => {
                Some(format!("axes={axes:?}"))
            }
            Primitive::BroadcastTo(shape) | Primitive::Reshape(shape) => {
                Some(format!("shape={shape}"))
            }
            Primitive::Transpose(perm) => Some(format!("perm={perm:?}")),
            _ => None,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `name(%a, %b; params)` as used in graph listings.
pub(super) fn format_call(prim: &Primitive, operands: &str) -> String {
    match prim.params() {
        Some(p) => format!("{}({operands}; {p})", prim.name()),
        None => format!("{}({operands})", prim.name()),
    }
}
