//! Graph recording, interpretation, and per-primitive VJP and batching rules
//! checked against finite differences and per-example loops.

use std::sync::Arc;

use treegrad::trace::{eval_graph, trace_depth, MAX_NESTING};
use treegrad::{grad, trace, vmap, Array, AxisSpec, Error, FunctionRef, PyTree, Shape, Tensor};

type Op = Arc<dyn Fn(&[Array]) -> treegrad::Result<Array> + Send + Sync>;

fn filled(dims: &[usize], seed: u64, offset: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let values = (0..n)
        .map(|i| {
            let h = (i as u64 + 1)
                .wrapping_mul(0x9E37_79B9)
                .wrapping_add(seed * 7919)
                % 2000;
            h as f64 / 1000.0 - 1.0 + offset
        })
        .collect();
    Tensor::from_f64(dims.to_vec(), values).unwrap()
}

struct Case {
    name: &'static str,
    op: Op,
    inputs: Vec<Tensor>,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    op: impl Fn(&[Array]) -> treegrad::Result<Array> + Send + Sync + 'static,
) -> Case {
    Case {
        name,
        op: Arc::new(op),
        inputs,
    }
}

fn corpus() -> Vec<Case> {
    vec![
        case(
            "add",
            vec![filled(&[2, 3], 1, 0.0), filled(&[3], 2, 0.0)],
            |a| a[0].add(&a[1]),
        ),
        case(
            "sub",
            vec![filled(&[2, 3], 3, 0.0), filled(&[2, 1], 4, 0.0)],
            |a| a[0].sub(&a[1]),
        ),
        case(
            "mul",
            vec![filled(&[3], 5, 0.0), filled(&[2, 3], 6, 0.0)],
            |a| a[0].mul(&a[1]),
        ),
        case(
            "div",
            vec![filled(&[2, 3], 7, 0.0), filled(&[3], 8, 3.0)],
            |a| a[0].div(&a[1]),
        ),
        case("neg", vec![filled(&[4], 9, 0.0)], |a| a[0].neg()),
        case(
            "relu",
            vec![Tensor::from_f64([4], vec![-1.5, -0.25, 0.3, 2.0]).unwrap()],
            |a| a[0].relu(),
        ),
        case(
            "step",
            vec![Tensor::from_f64([4], vec![-1.5, -0.25, 0.3, 2.0]).unwrap()],
            |a| a[0].step(),
        ),
        case(
            "matmul_mm",
            vec![filled(&[2, 3], 10, 0.0), filled(&[3, 4], 11, 0.0)],
            |a| a[0].matmul(&a[1]),
        ),
        case(
            "matmul_vm",
            vec![filled(&[3], 12, 0.0), filled(&[3, 2], 13, 0.0)],
            |a| a[0].matmul(&a[1]),
        ),
        case(
            "matmul_mv",
            vec![filled(&[2, 3], 14, 0.0), filled(&[3], 15, 0.0)],
            |a| a[0].matmul(&a[1]),
        ),
        case(
            "matmul_vv",
            vec![filled(&[3], 16, 0.0), filled(&[3], 17, 0.0)],
            |a| a[0].matmul(&a[1]),
        ),
        case("sum_axis", vec![filled(&[2, 3, 2], 18, 0.0)], |a| {
            a[0].sum(Some(&[1]))
        }),
        case("sum_all", vec![filled(&[2, 3], 19, 0.0)], |a| {
            a[0].sum(None)
        }),
        case("mean_axes", vec![filled(&[2, 3, 2], 20, 0.0)], |a| {
            a[0].mean(Some(&[0, 2]))
        }),
        case("broadcast_to", vec![filled(&[3, 1], 21, 0.0)], |a| {
            a[0].broadcast_to([2, 3, 4])
        }),
        case("transpose", vec![filled(&[2, 3, 4], 22, 0.0)], |a| {
            a[0].transpose(&[2, 0, 1])
        }),
        case("reshape", vec![filled(&[2, 3], 23, 0.0)], |a| {
            a[0].reshape([3, 2])
        }),
        case(
            "chain",
            vec![filled(&[2, 2], 24, 0.0), filled(&[2], 25, 2.0)],
            |a| {
                a[0].matmul(&a[1])?
                    .relu()?
                    .mul(&a[1])?
                    .div(&a[1].add(&Array::scalar(1.0))?)
            },
        ),
    ]
}

fn args_tree(inputs: &[Tensor]) -> PyTree {
    PyTree::Tup(inputs.iter().cloned().map(PyTree::array).collect())
}

fn arrays_of(tree: &PyTree) -> Vec<Array> {
    tree.children()
        .unwrap()
        .iter()
        .map(|c| c.as_array().unwrap().clone())
        .collect()
}

/// `inputs -> sum(op(inputs) * w)` with fixed non-trivial weights `w`.
fn scalarised(op: Op, out_shape: Shape) -> FunctionRef {
    let w = Array::from(filled(out_shape.dims(), 99, 0.5));
    FunctionRef::new("scalarised", move |args| {
        let y = op(&arrays_of(&args[0]))?;
        Ok(PyTree::from(y.mul(&w)?.sum(None)?))
    })
}

fn eval_scalar(f: &FunctionRef, inputs: &[Tensor]) -> f64 {
    f.call(&[args_tree(inputs)])
        .unwrap()
        .as_array()
        .unwrap()
        .item()
        .unwrap()
}

#[test]
fn vjp_rules_match_central_differences() {
    let eps = 1e-6;
    for c in corpus() {
        let concrete: Vec<Array> = c.inputs.iter().cloned().map(Array::from).collect();
        let out_shape = (c.op)(&concrete).unwrap().shape().clone();
        let f = scalarised(c.op.clone(), out_shape);
        let g = grad(&f).call(&[args_tree(&c.inputs)]).unwrap();
        let grads: Vec<Tensor> = arrays_of(&g)
            .iter()
            .map(|a| a.to_tensor().unwrap())
            .collect();
        for (i, input) in c.inputs.iter().enumerate() {
            assert_eq!(grads[i].shape(), input.shape(), "{}", c.name);
            for j in 0..input.numel() {
                let shifted = |delta: f64| {
                    let mut inputs = c.inputs.clone();
                    let mut v = inputs[i].as_f64().unwrap().to_vec();
                    v[j] += delta;
                    inputs[i] = Tensor::from_f64(input.shape().clone(), v).unwrap();
                    eval_scalar(&f, &inputs)
                };
                let fd = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                let ad = grads[i].as_f64().unwrap()[j];
                let rel = (ad - fd).abs() / fd.abs().max(1.0);
                assert!(
                    rel <= 1e-5,
                    "{} input {i} coord {j}: ad {ad} fd {fd}",
                    c.name
                );
            }
        }
    }
}

fn stack(parts: &[Tensor]) -> Tensor {
    let mut dims = vec![parts.len()];
    dims.extend_from_slice(parts[0].shape().dims());
    let values = parts
        .iter()
        .flat_map(|p| p.as_f64().unwrap().to_vec())
        .collect();
    Tensor::from_f64(dims, values).unwrap()
}

#[test]
fn batching_rules_match_per_example_loop() {
    let batch = 3;
    for c in corpus() {
        let n = c.inputs.len();
        // Every non-empty subset of batched operands.
        for mask in 1..(1u32 << n) {
            let mapped: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
            let examples: Vec<Vec<Tensor>> = (0..batch)
                .map(|b| {
                    c.inputs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            if mapped[i] {
                                filled(
                                    t.shape().dims(),
                                    100 + b as u64 * 10 + i as u64,
                                    0.1 * i as f64
                                        + if c.name == "div" && i == 1 { 3.0 } else { 0.0 },
                                )
                            } else {
                                t.clone()
                            }
                        })
                        .collect()
                })
                .collect();
            let op = c.op.clone();
            let f = FunctionRef::new("op", move |args| {
                let arrays: Vec<Array> =
                    args.iter().map(|a| a.as_array().unwrap().clone()).collect();
                Ok(PyTree::from(op(&arrays)?))
            });
            let args: Vec<PyTree> = (0..n)
                .map(|i| {
                    if mapped[i] {
                        let parts: Vec<Tensor> = examples.iter().map(|e| e[i].clone()).collect();
                        PyTree::array(stack(&parts))
                    } else {
                        PyTree::array(c.inputs[i].clone())
                    }
                })
                .collect();
            let axes = mapped
                .iter()
                .map(|&m| {
                    if m {
                        AxisSpec::Mapped
                    } else {
                        AxisSpec::Broadcast
                    }
                })
                .collect();
            let batched = vmap(&f, axes).call(&args).unwrap();
            let batched = batched.as_array().unwrap().to_tensor().unwrap();
            let looped: Vec<Tensor> = examples
                .iter()
                .map(|e| {
                    let arrays: Vec<Array> = e.iter().cloned().map(Array::from).collect();
                    (c.op)(&arrays).unwrap().to_tensor().unwrap()
                })
                .collect();
            let expected = stack(&looped);
            assert_eq!(batched.shape(), expected.shape(), "{} mask {mask}", c.name);
            for (x, y) in batched
                .as_f64()
                .unwrap()
                .iter()
                .zip(expected.as_f64().unwrap())
            {
                assert!((x - y).abs() <= 1e-12, "{} mask {mask}: {x} vs {y}", c.name);
            }
        }
    }
}

#[test]
fn eval_graph_matches_direct_evaluation() {
    for c in corpus() {
        let args: Vec<PyTree> = c.inputs.iter().cloned().map(PyTree::array).collect();
        let op = c.op.clone();
        let graph = trace(
            move |a| {
                let arrays: Vec<Array> = a.iter().map(|t| t.as_array().unwrap().clone()).collect();
                Ok(PyTree::from(op(&arrays)?))
            },
            &args,
        )
        .unwrap();
        graph.validate().unwrap();
        let out = eval_graph(&graph, &c.inputs).unwrap();
        let concrete: Vec<Array> = c.inputs.iter().cloned().map(Array::from).collect();
        let direct = (c.op)(&concrete).unwrap().to_tensor().unwrap();
        assert!(out[0].bitwise_eq(&direct), "{}", c.name);
    }
}

#[test]
fn graph_listing_is_stable() {
    let x = PyTree::array(Tensor::from_f64([2], vec![1.0, 2.0]).unwrap());
    let f = |a: &[PyTree]| -> treegrad::Result<PyTree> {
        let x = a[0].as_array().unwrap();
        Ok(PyTree::from(x.add(&Array::scalar(1.0))?.relu()?.sum(None)?))
    };
    let g = trace(f, std::slice::from_ref(&x)).unwrap();
    let expected = "input %0: (2,) f64\n\
                    const %1: () f64 = [1.0]\n\
                    %2: (2,) f64 = add(%0, %1)\n\
                    %3: (2,) f64 = relu(%2)\n\
                    %4: () f64 = reduce_sum(%3; axes=[0])\n\
                    output %4\n";
    assert_eq!(g.to_string(), expected);
    assert_eq!(trace(f, &[x]).unwrap().to_string(), expected);
    assert_eq!(g.primitive_names(), vec!["add", "relu", "reduce_sum"]);
}

#[test]
fn constants_are_deduplicated() {
    let x = PyTree::array(Tensor::zeros([2]));
    let g = trace(
        |a| {
            let x = a[0].as_array().unwrap();
            let one = Array::scalar(1.0);
            Ok(PyTree::from(x.add(&one)?.mul(&Array::scalar(1.0))?))
        },
        &[x],
    )
    .unwrap();
    assert_eq!(g.constants().len(), 1);
}

#[test]
fn eval_graph_rejects_wrong_inputs() {
    let x = PyTree::array(Tensor::zeros([2]));
    let g = trace(|a| Ok(PyTree::from(a[0].as_array().unwrap().neg()?)), &[x]).unwrap();
    let err = eval_graph(&g, &[Tensor::zeros([3])]).unwrap_err();
    assert!(matches!(err, Error::GraphInput { index: 0, .. }));
    assert!(eval_graph(&g, &[]).is_err());
}

#[test]
fn concretizing_a_tracer_fails() {
    let x = PyTree::array(Tensor::zeros([2]));
    let err = trace(
        |a| Ok(PyTree::scalar(a[0].as_array().unwrap().item()?)),
        &[x],
    )
    .unwrap_err();
    assert!(matches!(err, Error::Concretization(_)));
    assert_eq!(trace_depth(), 0);
}

#[test]
fn leaked_tracer_is_reported() {
    let stash = std::sync::Mutex::new(None);
    let x = PyTree::array(Tensor::zeros([2]));
    trace(
        |a| {
            *stash.lock().unwrap() = Some(a[0].as_array().unwrap().clone());
            Ok(a[0].clone())
        },
        &[x],
    )
    .unwrap();
    let leaked = stash.lock().unwrap().take().unwrap();
    let err = leaked.add(&Array::scalar(1.0)).unwrap_err();
    assert_eq!(err, Error::TracerLeak { op: "add" });
}

#[test]
fn nesting_beyond_limit_errors() {
    fn nest(depth: usize) -> treegrad::Result<treegrad::Graph> {
        let x = PyTree::array(Tensor::zeros([1]));
        trace(
            move |a| {
                if depth > 1 {
                    nest(depth - 1)?;
                }
                Ok(a[0].clone())
            },
            &[x],
        )
    }
    assert!(nest(MAX_NESTING).is_ok());
    let err = nest(MAX_NESTING + 1).unwrap_err();
    assert_eq!(
        err,
        Error::NestingTooDeep {
            depth: MAX_NESTING + 1,
            max: MAX_NESTING
        }
    );
    assert_eq!(trace_depth(), 0);
}
