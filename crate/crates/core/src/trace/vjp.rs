//! Reverse-mode rules: given the cotangent of a primitive's output, produce
//! cotangents for the operands that need them.

use crate::error::Result;
use crate::tensor::Shape;

use super::{Array, Primitive};

/// Sums `g` down to `shape`, undoing trailing-aligned broadcasting.
pub(crate) fn unbroadcast(g: Array, shape: &Shape) -> Result<Array> {
    if g.shape() == shape {
        return Ok(g);
    }
    let lead = g.shape().rank() - shape.rank();
    let mut axes: Vec<usize> = (0..lead).collect();
    for (i, &d) in shape.dims().iter().enumerate() {
        if d == 1 && g.shape().dims()[lead + i] != 1 {
            axes.push(lead + i);
        }
    }
    let summed = if axes.is_empty() {
        g
    } else {
        g.sum(Some(&axes))?
    };
    reshape_to(summed, shape)
}

pub(crate) fn reshape_to(a: Array, shape: &Shape) -> Result<Array> {
    if a.shape() == shape {
        Ok(a)
    } else {
        a.reshape(shape.clone())
    }
}

/// Returns one entry per operand; `None` where `needs` is false or where the
/// cotangent is identically zero.
pub(crate) fn vjp_rule(
    prim: &Primitive,
    args: &[&Array],
    out: &Array,
    ct: &Array,
    needs: &[bool],
) -> Result<Vec<Option<Array>>> {
    let a = args[0];
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let mut grads: Vec<Option<Array>> = vec![None; args.len()];
    match prim {
        Primitive::Add => {
            if want(0) {
                grads[0] = Some(unbroadcast(ct.clone(), a.shape())?);
            }
            if want(1) {
                grads[1] = Some(unbroadcast(ct.clone(), args[1].shape())?);
            }
        }
        Primitive::Sub => {
            if want(0) {
                grads[0] = Some(unbroadcast(ct.clone(), a.shape())?);
            }
            if want(1) {
                grads[1] = Some(unbroadcast(ct.neg()?, args[1].shape())?);
            }
        }
        Primitive::Mul => {
            let b = args[1];
            if want(0) {
                grads[0] = Some(unbroadcast(ct.mul(b)?, a.shape())?);
            }
            if want(1) {
                grads[1] = Some(unbroadcast(ct.mul(a)?, b.shape())?);
            }
        }
        Primitive::Div => {
            let b = args[1];
            if want(0) {
                grads[0] = Some(unbroadcast(ct.div(b)?, a.shape())?);
            }
            if want(1) {
                // d(a/b)/db = -(a/b)/b
                grads[1] = Some(unbroadcast(ct.mul(out)?.div(b)?.neg()?, b.shape())?);
            }
        }
        Primitive::Neg => {
            if want(0) {
                grads[0] = Some(ct.neg()?);
            }
        }
        Primitive::Relu => {
            if want(0) {
                grads[0] = Some(ct.mul(&a.step()?)?);
            }
        }
        // Piecewise constant.
        Primitive::Step => {}
        Primitive::MatMul => {
            let b = args[1];
            let (ga, gb) = matmul_vjp(a, b, ct, want(0), want(1))?;
            grads[0] = ga;
            grads[1] = gb;
        }
        Primitive::ReduceSum(axes) | Primitive::ReduceMean(axes) => {
            if want(0) {
                let shape = a.shape();
                let keep: Vec<usize> = shape
                    .dims()
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
                    .collect();
                let mut g = reshape_to(ct.clone(), &Shape::new(keep))?;
                if g.shape() != shape {
                    g = g.broadcast_to(shape.clone())?;
                }
                if matches!(prim, Primitive::ReduceMean(_)) {
                    let count: usize = axes.iter().map(|&ax| shape.dims()[ax]).product();
                    g = g.div(&Array::scalar(count as f64))?;
                }
                grads[0] = Some(g);
            }
        }
        Primitive::BroadcastTo(_) => {
            if want(0) {
                grads[0] = Some(unbroadcast(ct.clone(), a.shape())?);
            }
        }
        Primitive::Transpose(perm) => {
            if want(0) {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                grads[0] = Some(ct.transpose(&inverse)?);
            }
        }
        Primitive::Reshape(_) => {
            if want(0) {
                grads[0] = Some(reshape_to(ct.clone(), a.shape())?);
            }
        }
    }
    Ok(grads)
}

fn matmul_vjp(
    a: &Array,
    b: &Array,
    ct: &Array,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Array>, Option<Array>)> {
    let mut ga = None;
    let mut gb = None;
    match (a.shape().dims(), b.shape().dims()) {
        // (m,k) x (k,n)
        ([_, _], [_, _]) => {
            if need_a {
                ga = Some(ct.matmul(&b.t()?)?);
            }
            if need_b {
                gb = Some(a.t()?.matmul(ct)?);
            }
        }
        // (k,) x (k,n) -> (n,)
        ([k], [_, n]) => {
            if need_a {
                ga = Some(b.matmul(ct)?);
            }
            if need_b {
                gb = Some(a.reshape([*k, 1])?.matmul(&ct.reshape([1, *n])?)?);
            }
        }
        // (m,k) x (k,) -> (m,)
        ([m, _], [k]) => {
            if need_a {
                ga = Some(ct.reshape([*m, 1])?.matmul(&b.reshape([1, *k])?)?);
            }
            if need_b {
                gb = Some(ct.matmul(a)?);
            }
        }
        // (k,) x (k,) -> ()
        _ => {
            if need_a {
                ga = Some(ct.mul(b)?);
            }
            if need_b {
                gb = Some(ct.mul(a)?);
            }
        }
    }
    Ok((ga, gb))
}
