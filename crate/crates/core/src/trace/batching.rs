//! Batching rules. A batched value carries the batch on axis 0; every rule
//! receives at least one batched operand and returns a batched result.

use crate::error::Result;
use crate::tensor::{self, Shape};

use super::{Array, Primitive};

/// Per-example shape of an operand.
fn example_shape(a: &Array, batched: bool) -> Shape {
    if batched {
        Shape::from(&a.shape().dims()[1..])
    } else {
        a.shape().clone()
    }
}

/// Inserts unit axes after the batch axis until the per-example rank is `rank`.
fn lift_rank(a: &Array, rank: usize) -> Result<Array> {
    let dims = a.shape().dims();
    let per = dims.len() - 1;
    if per >= rank {
        return Ok(a.clone());
    }
    let mut shape = vec![dims[0]];
    shape.extend(std::iter::repeat_n(1, rank - per));
    shape.extend_from_slice(&dims[1..]);
    a.reshape(shape)
}

pub(crate) fn batch_rule(prim: &Primitive, args: &[(Array, bool)]) -> Result<Array> {
    let (a, a_batched) = &args[0];
    match prim {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
            let (b, b_batched) = &args[1];
            let out = tensor::broadcast_shapes(
                prim.name(),
                &example_shape(a, *a_batched),
                &example_shape(b, *b_batched),
            )?;
            let x = if *a_batched {
                lift_rank(a, out.rank())?
            } else {
                a.clone()
            };
            let y = if *b_batched {
                lift_rank(b, out.rank())?
            } else {
                b.clone()
            };
            super::bind(prim.clone(), &[&x, &y])
        }
        Primitive::Neg | Primitive::Relu | Primitive::Step => super::bind(prim.clone(), &[a]),
        Primitive::ReduceSum(axes) => a.sum(Some(&shifted(axes))),
        Primitive::ReduceMean(axes) => a.mean(Some(&shifted(axes))),
        Primitive::BroadcastTo(target) => {
            let b = a.shape().dims()[0];
            let lifted = lift_rank(a, target.rank())?;
            let mut full = vec![b];
            full.extend_from_slice(target.dims());
            let full = Shape::new(full);
            if lifted.shape() == &full {
                Ok(lifted)
            } else {
                lifted.broadcast_to(full)
            }
        }
        Primitive::Transpose(perm) => {
            let mut p = vec![0];
            p.extend(perm.iter().map(|&i| i + 1));
            a.transpose(&p)
        }
        Primitive::Reshape(target) => {
            let mut shape = vec![a.shape().dims()[0]];
            shape.extend_from_slice(target.dims());
            a.reshape(shape)
        }
        Primitive::MatMul => {
            let (b, b_batched) = &args[1];
            batch_matmul(a, *a_batched, b, *b_batched)
        }
    }
}

fn shifted(axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| a + 1).collect()
}

/// Rewrites a batched matrix product into rank-2 products where one side is
/// unbatched, and into multiply-and-sum when both sides are.
fn batch_matmul(a: &Array, a_batched: bool, b: &Array, b_batched: bool) -> Result<Array> {
    let ad = a.shape().dims().to_vec();
    let bd = b.shape().dims().to_vec();
    match (a_batched, b_batched) {
        (true, false) => match (ad.as_slice(), bd.as_slice()) {
            // (B,k) @ (k,n) and (B,k) @ (k,) are already rank-2 products.
            ([_, _], _) => a.matmul(b),
            ([batch, m, k], [_, n]) => a
                .reshape([batch * m, *k])?
                .matmul(b)?
                .reshape([*batch, *m, *n]),
            ([batch, m, k], [_]) => a.reshape([batch * m, *k])?.matmul(b)?.reshape([*batch, *m]),
            _ => a.matmul(b),
        },
        (false, true) => match (ad.as_slice(), bd.as_slice()) {
            // per-example (m,k) @ (k,): (B,k) @ (k,m)
            ([_, _], [_, _]) => b.matmul(&a.t()?),
            // per-example (k,) @ (k,): (B,k) @ (k,)
            ([_], [_, _]) => b.matmul(a),
            ([m, k], [batch, _, n]) => {
                let cols = b.transpose(&[1, 0, 2])?.reshape([*k, batch * n])?;
                a.matmul(&cols)?
                    .reshape([*m, *batch, *n])?
                    .transpose(&[1, 0, 2])
            }
            ([k], [batch, _, n]) => {
                let cols = b.transpose(&[1, 0, 2])?.reshape([*k, batch * n])?;
                a.matmul(&cols)?.reshape([*batch, *n])
            }
            _ => a.matmul(b),
        },
        _ => match (ad.as_slice(), bd.as_slice()) {
            ([_, _], [_, _]) => a.mul(b)?.sum(Some(&[1])),
            ([batch, _, k], [_, _]) => a.mul(&b.reshape([*batch, 1, *k])?)?.sum(Some(&[2])),
            ([batch, k], [_, _, _]) => a.reshape([*batch, *k, 1])?.mul(b)?.sum(Some(&[1])),
            ([batch, m, k], [_, _, n]) => {
                let lhs = a.reshape([*batch, *m, *k, 1])?;
                let rhs = b.reshape([*batch, 1, *k, *n])?;
                lhs.mul(&rhs)?.sum(Some(&[2]))
            }
            _ => a.matmul(b),
        },
    }
}
