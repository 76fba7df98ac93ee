use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::primitive::format_call;
use super::{interpret_outputs, Array, Aval, Primitive};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub u32);

impl VarId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "%{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Equation {
    pub prim: Primitive,
    pub inputs: Vec<VarId>,
    pub out: VarId,
}

/// A traced program in SSA form. Inputs and constants are available from
/// the start; equations are in dependency order.
#[derive(Debug, Clone)]
pub struct Graph {
    pub(crate) vars: Vec<Aval>,
    pub(crate) inputs: Vec<VarId>,
    pub(crate) constants: Vec<(VarId, Tensor)>,
    pub(crate) equations: Vec<Equation>,
    pub(crate) outputs: Vec<VarId>,
}

impl Graph {
    pub fn inputs(&self) -> &[VarId] {
        &self.inputs
    }

    pub fn constants(&self) -> &[(VarId, Tensor)] {
        &self.constants
    }

    pub fn equations(&self) -> &[Equation] {
        &self.equations
    }

    pub fn outputs(&self) -> &[VarId] {
        &self.outputs
    }

    pub fn aval(&self, var: VarId) -> &Aval {
        &self.vars[var.index()]
    }

    pub fn input_avals(&self) -> Vec<Aval> {
        self.inputs.iter().map(|&v| self.aval(v).clone()).collect()
    }

    /// Primitive names in equation order.
    pub fn primitive_names(&self) -> Vec<&'static str> {
        self.equations.iter().map(|e| e.prim.name()).collect()
    }

    pub fn count(&self, name: &str) -> usize {
        self.equations
            .iter()
            .filter(|e| e.prim.name() == name)
            .count()
    }

    /// Checks single assignment, define-before-use, and that every recorded
    /// aval agrees with the primitive shape rules.
    pub fn validate(&self) -> Result<()> {
        let mut defined = vec![false; self.vars.len()];
        fn define(defined: &mut [bool], v: VarId) -> Result<()> {
            let slot = defined
                .get_mut(v.index())
                .ok_or_else(|| Error::Trace(format!("{v} is out of range")))?;
            if std::mem::replace(slot, true) {
                return Err(Error::Trace(format!("{v} is assigned twice")));
            }
            Ok(())
        }
        for &v in &self.inputs {
            define(&mut defined, v)?;
        }
        for (v, t) in &self.constants {
            define(&mut defined, *v)?;
            if self.aval(*v) != &Aval::new(t.shape().clone(), t.dtype()) {
                return Err(Error::Trace(format!(
                    "constant {v} disagrees with its aval"
                )));
            }
        }
        for eq in &self.equations {
            let mut avals = Vec::with_capacity(eq.inputs.len());
            for &v in &eq.inputs {
                if !defined.get(v.index()).copied().unwrap_or(false) {
                    return Err(Error::Trace(format!("{v} used before definition")));
                }
                avals.push(self.aval(v).clone());
            }
            define(&mut defined, eq.out)?;
            let inferred = eq.prim.infer(&avals)?;
            if &inferred != self.aval(eq.out) {
                return Err(Error::Trace(format!(
                    "{} records {} but the shape rule gives {inferred}",
                    eq.out,
                    self.aval(eq.out)
                )));
            }
        }
        for &v in &self.outputs {
            if !defined.get(v.index()).copied().unwrap_or(false) {
                return Err(Error::Trace(format!("output {v} is never defined")));
            }
        }
        Ok(())
    }
}

/// Stable SSA listing:
///
/// ```text
/// input %0: (2,) f64
/// const %1: () f64 = [1.0]
/// %2: (2,) f64 = add(%0, %1)
/// output %2
/// ```
impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &v in &self.inputs {
            writeln!(f, "input {v}: {}", self.aval(v))?;
        }
        for (v, t) in &self.constants {
            let aval = self.aval(*v);
            if t.numel() <= 8 {
                let values = t.to_string();
                let body = values.split_once('[').map(|(_, rest)| rest).unwrap_or("");
                writeln!(f, "const {v}: {aval} = [{body}")?;
            } else {
                writeln!(f, "const {v}: {aval} = <{} elements>", t.numel())?;
            }
        }
        for eq in &self.equations {
            let operands = eq
                .inputs
                .iter()
                .map(VarId::to_string)
                .collect::<Vec<_>>()
                .join(", ");
            writeln!(
                f,
                "{}: {} = {}",
                eq.out,
                self.aval(eq.out),
                format_call(&eq.prim, &operands)
            )?;
        }
        let outs = self
            .outputs
            .iter()
            .map(VarId::to_string)
            .collect::<Vec<_>>()
            .join(", ");
        writeln!(f, "output {outs}")
    }
}

pub fn format_graph(graph: &Graph) -> String {
    graph.to_string()
}

/// Interprets a graph on concrete inputs.
pub fn eval_graph(graph: &Graph, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    if inputs.len() != graph.inputs.len() {
        return Err(Error::Trace(format!(
            "graph declares {} inputs, got {}",
            graph.inputs.len(),
            inputs.len()
        )));
    }
    for (index, (&v, t)) in graph.inputs.iter().zip(inputs).enumerate() {
        let actual = Aval::new(t.shape().clone(), t.dtype());
        if &actual != graph.aval(v) {
            return Err(Error::GraphInput {
                index,
                declared: graph.aval(v).to_string(),
                actual: actual.to_string(),
            });
        }
    }
    let arrays: Vec<Array> = inputs.iter().cloned().map(Array::Concrete).collect();
    interpret_outputs(graph, &arrays)?
        .into_iter()
        .map(|a| a.to_tensor())
        .collect()
}
