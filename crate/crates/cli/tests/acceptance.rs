//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.

use std::process::{Command, ExitCode};
use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::{Config, TestRunner};
use treegrad::checkpoint;
use treegrad::filter::{filter_grad, partition_with_path, LeafPredicate};
use treegrad::module::{
    apply_fn, bind_method, define_schema, field, instantiate, FieldSpec, ModuleSchema,
};
use treegrad::nn::{self, adder, key_new, linear_init, mse_loss, regression_setup, sgd_step};
use treegrad::pytree::{fingerprint, leaves, tree_equal, Opaque};
use treegrad::{
    apply, combine, filter_jit, flatten, grad, partition, trace, vmap, AxisSpec, DType,
    FunctionRef, Leaf, PyTree, Tensor,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn appendix() -> (PyTree, PyTree, PyTree) {
    let (m, x, y) = regression_setup(0, 100).expect("setup");
    (m, PyTree::array(x), PyTree::array(y))
}

fn scalar(t: &PyTree) -> f64 {
    t.as_array().and_then(|a| a.item().ok()).expect("scalar")
}

fn with_leaf(tree: &PyTree, index: usize, coord: usize, delta: f64) -> PyTree {
    let (mut l, fp) = flatten(tree);
    let t = l[index].as_array().unwrap().to_tensor().unwrap();
    let mut v = t.as_f64().unwrap().to_vec();
    v[coord] += delta;
    l[index] = Leaf::array(Tensor::from_f64(t.shape().clone(), v).unwrap());
    treegrad::unflatten(&fp, l).unwrap()
}

fn gradient_correctness() -> Outcome {
    let (m, x, y) = appendix();
    let loss = mse_loss();
    let g = filter_grad(&loss)
        .call(&[m.clone(), x.clone(), y.clone()])
        .map_err(|e| e.to_string())?;
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (i, (ml, gl)) in leaves(&m).iter().zip(leaves(&g)).enumerate() {
        let Leaf::Array(_) = ml else { continue };
        let gt = gl.as_array().unwrap().to_tensor().unwrap();
        for (j, &ad) in gt.as_f64().unwrap().iter().enumerate() {
            let up = scalar(
                &loss
                    .call(&[with_leaf(&m, i, j, eps), x.clone(), y.clone()])
                    .unwrap(),
            );
            let down = scalar(
                &loss
                    .call(&[with_leaf(&m, i, j, -eps), x.clone(), y.clone()])
                    .unwrap(),
            );
            let fd = (up - down) / (2.0 * eps);
            let rel = (ad - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(rel);
            coords += 1;
        }
    }
    check(worst <= 1e-4, || {
        format!("max relative error {worst:.3e} over {coords} coordinates")
    })?;
    Ok(format!(
        "{coords} coordinates, max relative error {worst:.3e}"
    ))
}

fn adder_law() -> Outcome {
    let f = FunctionRef::new("adder_call", |a| apply(&a[0], &a[1]));
    let m = adder(1.5);
    let g = grad(&f)
        .call(&[m.clone(), PyTree::scalar(2.0)])
        .map_err(|e| e.to_string())?;
    check(g.as_record().map(|r| r.tag()) == Some("Adder"), || {
        format!("gradient is {g}")
    })?;
    check(fingerprint(&g) == fingerprint(&m), || {
        "fingerprint differs".into()
    })?;
    let p = scalar(field(&g, "parameter").unwrap());
    check(p == 1.0, || format!("parameter gradient {p}"))?;
    Ok("gradient is an Adder with parameter 1.0".into())
}

fn vmap_equivalence() -> Outcome {
    let (m, x, _) = appendix();
    let forward = vmap(&apply_fn(), vec![AxisSpec::Broadcast, AxisSpec::Mapped]);
    let batched = forward
        .call(&[m.clone(), x.clone()])
        .map_err(|e| e.to_string())?;
    let bt = batched.as_array().unwrap().to_tensor().unwrap();
    let xt = x.as_array().unwrap().to_tensor().unwrap();
    let xv = xt.as_f64().unwrap();
    let mut worst: f64 = 0.0;
    for b in 0..100 {
        let row = Tensor::from_f64([2], xv[2 * b..2 * b + 2].to_vec()).unwrap();
        let one = apply(&m, &PyTree::array(row))
            .unwrap()
            .as_array()
            .unwrap()
            .to_tensor()
            .unwrap();
        for j in 0..2 {
            worst = worst.max((bt.as_f64().unwrap()[2 * b + j] - one.as_f64().unwrap()[j]).abs());
        }
    }
    check(worst <= 1e-12, || format!("max abs difference {worst:.3e}"))?;
    let g = trace(|a| forward.call(a), &[m, x]).map_err(|e| e.to_string())?;
    let matmuls: Vec<_> = g
        .equations()
        .iter()
        .filter(|e| e.prim.name() == "matmul")
        .collect();
    check(matmuls.len() == 2, || {
        format!("{} matmul equations for 2 Linear layers", matmuls.len())
    })?;
    for eq in &matmuls {
        let lhs = &g.aval(eq.inputs[0]).shape;
        check(lhs.dims().first() == Some(&100) && lhs.rank() == 2, || {
            format!("matmul left operand {lhs}")
        })?;
    }
    Ok(format!(
        "max abs difference {worst:.1e}; 2 matmuls with (100,k) left operands"
    ))
}

fn jit_transparency() -> Outcome {
    let (m, x, y) = appendix();
    let loss = mse_loss();
    let j = filter_jit(&loss);
    let direct = loss
        .call(&[m.clone(), x.clone(), y.clone()])
        .map_err(|e| e.to_string())?;
    let first = j
        .call(&[m.clone(), x.clone(), y.clone()])
        .map_err(|e| e.to_string())?;
    let second = j.call(&[m.clone(), x, y]).map_err(|e| e.to_string())?;
    check(
        tree_equal(&direct, &first) && tree_equal(&first, &second),
        || "jitted loss differs".into(),
    )?;
    check(j.trace_count() == 1, || {
        format!("trace count {} after two calls", j.trace_count())
    })?;
    let (_, x2, y2) = regression_setup(0, 64).unwrap();
    j.call(&[m, PyTree::array(x2), PyTree::array(y2)])
        .map_err(|e| e.to_string())?;
    check(j.trace_count() == 2, || {
        format!("trace count {} after batch change", j.trace_count())
    })?;
    Ok("bitwise equal; trace counts 1 then 2".into())
}

fn composition() -> Outcome {
    let (m, x, y) = appendix();
    let g = filter_grad(&mse_loss());
    let plain = g
        .call(&[m.clone(), x.clone(), y.clone()])
        .map_err(|e| e.to_string())?;
    let jitted = filter_jit(&g).call(&[m, x, y]).map_err(|e| e.to_string())?;
    check(tree_equal(&plain, &jitted), || {
        "gradient trees differ".into()
    })?;
    Ok("jit(filter_grad(loss)) == filter_grad(loss) bitwise".into())
}

fn law_node() -> &'static Arc<ModuleSchema> {
    static S: OnceLock<Arc<ModuleSchema>> = OnceLock::new();
    S.get_or_init(|| {
        define_schema(
            "AcceptanceNode",
            vec![
                FieldSpec::child("a"),
                FieldSpec::fixed("k"),
                FieldSpec::child("b"),
            ],
            Arc::new(|rec, _| Ok(rec.field("a").unwrap().clone())),
        )
        .unwrap()
    })
}

fn tree_strategy() -> impl Strategy<Value = PyTree> {
    let leaf = prop_oneof![
        prop::collection::vec(-3.0f64..3.0, 0..4).prop_map(|v| {
            let n = v.len();
            PyTree::array(Tensor::from_f64([n], v).unwrap())
        }),
        (-5.0f64..5.0).prop_map(PyTree::scalar),
        prop::collection::vec(-9i64..9, 1..3).prop_map(|v| {
            let n = v.len();
            PyTree::array(Tensor::from_i64([n], v).unwrap())
        }),
        any::<i64>().prop_map(|v| PyTree::leaf(Leaf::Int(v))),
        (-1e3f64..1e3).prop_map(|v| PyTree::leaf(Leaf::Float(v))),
        any::<bool>().prop_map(|v| PyTree::leaf(Leaf::Bool(v))),
        Just(PyTree::leaf(Leaf::Function(nn::relu()))),
        (0u64..4).prop_map(|t| PyTree::leaf(Leaf::Opaque(Opaque::from_token(t)))),
    ];
    leaf.prop_recursive(4, 50, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(PyTree::Seq),
            prop::collection::vec(inner.clone(), 0..4).prop_map(PyTree::Tup),
            prop::collection::btree_map("[a-d]{1,2}", inner.clone(), 0..4).prop_map(PyTree::map),
            (inner.clone(), inner.clone(), -3i64..3).prop_map(|(a, b, k)| {
                instantiate(
                    law_node(),
                    vec![("a", a), ("k", PyTree::leaf(Leaf::Int(k))), ("b", b)],
                )
                .unwrap()
            }),
            inner.prop_map(|p| instantiate(nn::adder_schema(), vec![("parameter", p)]).unwrap()),
        ]
    })
    .prop_filter("at most 50 leaves", |t| leaves(t).len() <= 50)
}

fn depth(t: &PyTree) -> usize {
    match t {
        PyTree::Leaf(_) => 0,
        PyTree::Map(m) => 1 + m.values().map(depth).max().unwrap_or(0),
        PyTree::Record(r) => 1 + r.fields().iter().map(|(_, v)| depth(v)).max().unwrap_or(0),
        PyTree::Seq(c) | PyTree::Tup(c) => 1 + c.iter().map(depth).max().unwrap_or(0),
    }
}

fn kind_predicate(mask: u8) -> LeafPredicate {
    LeafPredicate::new(format!("mask{mask}"), move |l| {
        let bit = match l {
            Leaf::Array(a) if a.dtype() == DType::F64 => 0,
            Leaf::Array(_) => 1,
            Leaf::Int(v) => return mask & 4 != 0 && v % 2 == 0,
            Leaf::Float(_) => 3,
            Leaf::Bool(_) => 4,
            Leaf::Function(_) => 5,
            Leaf::Opaque(_) => 6,
            Leaf::Sentinel => 7,
        };
        mask & (1 << bit) != 0
    })
}

const CASES: u32 = 1000;

fn filtering_laws() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let count = std::cell::Cell::new(0u32);
    let modules = std::cell::Cell::new(0u32);
    runner
        .run(&(tree_strategy(), any::<u8>()), |(t, mask)| {
            count.set(count.get() + 1);
            if format!("{}", fingerprint(&t)).contains("Reg<") {
                modules.set(modules.get() + 1);
            }
            prop_assert!(depth(&t) <= 5 && leaves(&t).len() <= 50);
            let (m, c) = partition(&t, &kind_predicate(mask));
            prop_assert_eq!(fingerprint(&m), fingerprint(&t));
            prop_assert_eq!(fingerprint(&c), fingerprint(&t));
            prop_assert!(tree_equal(&combine(&m, &c).unwrap(), &t));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "{} trees ({} with module nodes)",
        count.get(),
        modules.get()
    ))
}

fn filter_grad_structure() -> Outcome {
    let (m, x, y) = appendix();
    let g = filter_grad(&mse_loss())
        .call(&[m.clone(), x, y])
        .map_err(|e| e.to_string())?;
    check(fingerprint(&g) == fingerprint(&m), || {
        "fingerprint differs".into()
    })?;
    let (gl, fp) = flatten(&g);
    let sentinels: Vec<String> = gl
        .iter()
        .zip(fp.leaf_paths())
        .filter(|(l, _)| l.is_sentinel())
        .map(|(_, p)| p)
        .collect();
    check(sentinels == [".activation"], || {
        format!("Sentinel at {sentinels:?}")
    })?;
    Ok("MyModule fingerprint; Sentinel only at .activation".into())
}

fn frozen_parameters() -> Outcome {
    let (m, x, y) = appendix();
    let frozen_path = ".layers[0].weight";
    let (frozen, mut params) = partition_with_path(&m, |p, _| p == frozen_path);
    let loss = mse_loss();
    let split = FunctionRef::new("split_loss", move |a| {
        loss.call(&[combine(&a[0], &a[1])?, a[2].clone(), a[3].clone()])
    });
    let g = filter_grad(&split);
    for _ in 0..10 {
        let grads = g
            .call(&[params.clone(), frozen.clone(), x.clone(), y.clone()])
            .map_err(|e| e.to_string())?;
        params = sgd_step(&params, &grads, 0.1).map_err(|e| e.to_string())?;
    }
    let after = combine(&params, &frozen).map_err(|e| e.to_string())?;
    let (before, fp) = flatten(&m);
    for ((b, a), path) in before.iter().zip(leaves(&after)).zip(fp.leaf_paths()) {
        match path.as_str() {
            p if p == frozen_path => check(a.bitwise_eq(b), || "frozen weight changed".into())?,
            ".activation" => {}
            p => check(!a.bitwise_eq(b), || format!("{p} did not change"))?,
        }
    }
    Ok("frozen weight bitwise unchanged after 10 steps; other arrays changed".into())
}

fn run_train() -> Result<(String, f64, f64), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_treegrad"))
        .args(["train", "--seed", "0", "--steps", "200", "--lr", "0.1"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let text = String::from_utf8(out.stdout).map_err(|e| e.to_string())?;
    let get = |key: &str| -> Result<f64, String> {
        text.lines()
            .find_map(|l| l.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("missing {key} in {text:?}"))
    };
    let (i, f) = (get("initial_loss=")?, get("final_loss=")?);
    Ok((text, i, f))
}

fn training_sanity() -> Outcome {
    let (a, initial, fin) = run_train()?;
    let (b, _, _) = run_train()?;
    check(a == b, || "two runs differ".into())?;
    let ratio = fin / initial;
    check(fin < 0.5 * initial, || {
        format!("final_loss {fin:.6} / initial_loss {initial:.6} = {ratio:.4}, needs < 0.5 (runs are bitwise reproducible)")
    })?;
    Ok(format!("ratio {ratio:.4}; runs bitwise identical"))
}

fn bound_method_law() -> Outcome {
    let mut corpus = vec![
        adder(1.5),
        linear_init(3, 2, key_new(1)).unwrap(),
        nn::mlp_init(key_new(0)).unwrap(),
    ];
    let mut runner = TestRunner::new(Config {
        cases: 200,
        failure_persistence: None,
        ..Config::default()
    });
    for _ in 0..200 {
        let t = tree_strategy().new_tree(&mut runner).unwrap().current();
        corpus.push(
            instantiate(
                law_node(),
                vec![
                    ("a", t.clone()),
                    ("k", PyTree::leaf(Leaf::Int(0))),
                    ("b", t),
                ],
            )
            .unwrap(),
        );
    }
    corpus.push(bind_method(&corpus[0], "call").unwrap());
    for m in &corpus {
        let b = bind_method(m, "call").map_err(|e| e.to_string())?;
        check(leaves(&b) == leaves(m), || {
            format!("leaves differ for {}", fingerprint(m))
        })?;
    }
    Ok(format!("{} modules", corpus.len()))
}

fn checkpoint_roundtrip() -> Outcome {
    let model = nn::train(0, 200, 0.1).map_err(|e| e.to_string())?.model;
    let text = checkpoint::save(&model).map_err(|e| e.to_string())?;
    let back = checkpoint::load(&text).map_err(|e| e.to_string())?;
    check(tree_equal(&back, &model), || "loaded model differs".into())?;
    let pos = text.find(" array f64 (8,2) ").unwrap() + 20;
    let mut bytes = text.into_bytes();
    bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
    let corrupted = String::from_utf8(bytes).unwrap();
    match checkpoint::load(&corrupted) {
        Err(e) => Ok(format!("roundtrip tree_equal; corruption rejected ({e})")),
        Ok(_) => Err("corrupted checkpoint loaded".into()),
    }
}

fn main() -> ExitCode {
    nn::register_all();
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_correctness),
        ("Adder law", adder_law),
        ("vmap equivalence", vmap_equivalence),
        ("jit transparency and caching", jit_transparency),
        ("composition", composition),
        ("filtering laws", filtering_laws),
        ("filter_grad structure", filter_grad_structure),
        ("frozen parameters", frozen_parameters),
        ("training sanity", training_sanity),
        ("bound-method law", bound_method_law),
        ("checkpoint roundtrip", checkpoint_roundtrip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
