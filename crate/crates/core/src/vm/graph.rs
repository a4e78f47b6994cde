//! Computation graphs: a fixed, shape-checked, topologically ordered list of
//! tensor operations.

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::fixed::FixedPoint;
use super::tensor::element_count;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("unsupported op `{0}`")]
    UnsupportedOp(String),
    #[error("graph contains a cycle through `{0}`")]
    Cycle(String),
    #[error("unknown value `{0}`")]
    UnknownValue(String),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("invalid graph: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    /// Sum over the last dimension.
    Last,
    /// Sum over the first dimension of a matrix (column sums).
    First,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    Matmul {
        #[serde(default)]
        transpose_a: bool,
        #[serde(default)]
        transpose_b: bool,
    },
    AddBias,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    ScalarMul {
        factor: FixedPoint,
    },
    Relu,
    /// Passes the gradient where the pre-activation is positive.
    ReluGrad,
    SigmoidLut,
    SumReduce {
        axis: Axis,
    },
    Argmax,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::AddBias => "add-bias",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ScalarMul { .. } => "scalar-mul",
            Op::Relu => "relu",
            Op::ReluGrad => "relu-grad",
            Op::SigmoidLut => "sigmoid-lut",
            Op::SumReduce { .. } => "sum-reduce",
            Op::Argmax => "argmax",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Matmul { .. } | Op::AddBias | Op::Add | Op::Sub | Op::Mul | Op::ReluGrad => 2,
            _ => 1,
        }
    }

    /// Static output shape, or a shape error.
    pub fn infer_shape(&self, ins: &[&[u32]]) -> Result<Vec<u32>, GraphError> {
        let mismatch = |detail: String| GraphError::ShapeMismatch {
            op: self.name().to_string(),
            detail,
        };
        if ins.len() != self.arity() {
            return Err(mismatch(format!(
                "expected {} inputs, got {}",
                self.arity(),
                ins.len()
            )));
        }
        match self {
            Op::Matmul {
                transpose_a,
                transpose_b,
            } => {
                let (a, b) = (ins[0], ins[1]);
                if a.len() != 2 || b.len() != 2 {
                    return Err(mismatch(format!(
                        "matmul needs matrices, got {a:?} and {b:?}"
                    )));
                }
                let (m, ka) = if *transpose_a {
                    (a[1], a[0])
                } else {
                    (a[0], a[1])
                };
                let (kb, n) = if *transpose_b {
                    (b[1], b[0])
                } else {
                    (b[0], b[1])
                };
                if ka != kb {
                    return Err(mismatch(format!("({m}x{ka})·({kb}x{n})")));
                }
                Ok(vec![m, n])
            }
            Op::AddBias => {
                let (a, b) = (ins[0], ins[1]);
                let cols = a.last().copied().unwrap_or(1);
                if element_count(b) != cols as usize || b.len() > 2 || (b.len() == 2 && b[0] != 1) {
                    return Err(mismatch(format!(
                        "bias {b:?} does not broadcast over {a:?}"
                    )));
                }
                Ok(a.to_vec())
            }
            Op::Add | Op::Sub | Op::Mul | Op::ReluGrad => {
                if ins[0] != ins[1] {
                    return Err(mismatch(format!("{:?} vs {:?}", ins[0], ins[1])));
                }
                Ok(ins[0].to_vec())
            }
            Op::ScalarMul { .. } | Op::Relu | Op::SigmoidLut => Ok(ins[0].to_vec()),
            Op::SumReduce { axis } => {
                let a = ins[0];
                match (axis, a.len()) {
                    (_, 0) => Err(mismatch("cannot reduce a scalar".into())),
                    (Axis::Last, _) => Ok(a[..a.len() - 1].to_vec()),
                    (Axis::First, 2) => Ok(vec![a[1]]),
                    (Axis::First, _) => {
                        Err(mismatch(format!("column sums need a matrix, got {a:?}")))
                    }
                }
            }
            Op::Argmax => {
                let a = ins[0];
                if a.is_empty() || a.len() > 2 {
                    return Err(mismatch(format!(
                        "argmax needs a vector or matrix, got {a:?}"
                    )));
                }
                Ok(a[..a.len() - 1].to_vec())
            }
        }
    }
}

/// Reference to a value: graph inputs come first, then node outputs in order.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct ValueRef(pub u32);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<ValueRef>,
    pub shape: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub shape: Vec<u32>,
}

/// A shape-checked graph whose node order is the execution order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompGraph {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
    outputs: Vec<(String, ValueRef)>,
}

impl CompGraph {
    pub fn inputs(&self) -> &[GraphInput] {
        &self.inputs
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[(String, ValueRef)] {
        &self.outputs
    }

    pub fn value_count(&self) -> usize {
        self.inputs.len() + self.nodes.len()
    }

    pub fn shape_of(&self, v: ValueRef) -> &[u32] {
        let i = v.0 as usize;
        if i < self.inputs.len() {
            &self.inputs[i].shape
        } else {
            &self.nodes[i - self.inputs.len()].shape
        }
    }

    pub fn node_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn input_index(&self, name: &str) -> Option<usize> {
        self.inputs.iter().position(|i| i.name == name)
    }
}

/// Incremental builder. Values can only reference earlier values, so every
/// graph it produces is acyclic by construction.
#[derive(Default, Debug)]
pub struct GraphBuilder {
    inputs: Vec<GraphInput>,
    nodes: Vec<Node>,
    outputs: Vec<(String, ValueRef)>,
    names: HashMap<String, ValueRef>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn shape(&self, v: ValueRef) -> Result<&[u32], GraphError> {
        let i = v.0 as usize;
        if i < self.inputs.len() {
            Ok(&self.inputs[i].shape)
        } else {
            self.nodes
                .get(i - self.inputs.len())
                .map(|n| n.shape.as_slice())
                .ok_or_else(|| GraphError::UnknownValue(format!("#{}", v.0)))
        }
    }

    pub fn input(&mut self, name: &str, shape: &[u32]) -> Result<ValueRef, GraphError> {
        if !self.nodes.is_empty() {
            return Err(GraphError::Invalid(
                "inputs must be declared before nodes".into(),
            ));
        }
        if self.names.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        let r = ValueRef(self.inputs.len() as u32);
        self.inputs.push(GraphInput {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        self.names.insert(name.to_string(), r);
        Ok(r)
    }

    pub fn node(
        &mut self,
        name: &str,
        op: Op,
        inputs: &[ValueRef],
    ) -> Result<ValueRef, GraphError> {
        if self.names.contains_key(name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        let shapes = inputs
            .iter()
            .map(|&v| self.shape(v))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = op.infer_shape(&shapes)?;
        let r = ValueRef((self.inputs.len() + self.nodes.len()) as u32);
        self.nodes.push(Node {
            name: name.to_string(),
            op,
            inputs: inputs.to_vec(),
            shape,
        });
        self.names.insert(name.to_string(), r);
        Ok(r)
    }

    pub fn lookup(&self, name: &str) -> Option<ValueRef> {
        self.names.get(name).copied()
    }

    pub fn matmul(&mut self, name: &str, a: ValueRef, b: ValueRef) -> Result<ValueRef, GraphError> {
        self.node(
            name,
            Op::Matmul {
                transpose_a: false,
                transpose_b: false,
            },
            &[a, b],
        )
    }

    pub fn output(&mut self, name: &str, v: ValueRef) -> Result<(), GraphError> {
        self.shape(v)?;
        if self.outputs.iter().any(|(n, _)| n == name) {
            return Err(GraphError::DuplicateName(name.to_string()));
        }
        self.outputs.push((name.to_string(), v));
        Ok(())
    }

    pub fn build(self) -> Result<CompGraph, GraphError> {
        if self.outputs.is_empty() {
            return Err(GraphError::Invalid("graph has no outputs".into()));
        }
        Ok(CompGraph {
            inputs: self.inputs,
            nodes: self.nodes,
            outputs: self.outputs,
        })
    }
}

/// Declarative graph description with nodes wired by name, in any order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub inputs: Vec<GraphInput>,
    pub nodes: Vec<NodeSpec>,
    pub outputs: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
    pub inputs: Vec<String>,
}

/// Freezes a [`GraphSpec`] into a [`CompGraph`]. Node order is Kahn's
/// algorithm with ties broken by declaration order.
pub fn build_graph(spec: &GraphSpec) -> Result<CompGraph, GraphError> {
    let mut declared: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        if declared.insert(&n.name, i).is_some() || spec.inputs.iter().any(|x| x.name == n.name) {
            return Err(GraphError::DuplicateName(n.name.clone()));
        }
    }
    let is_input = |name: &str| spec.inputs.iter().any(|x| x.name == name);
    let mut indegree = vec![0usize; spec.nodes.len()];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); spec.nodes.len()];
    for (i, n) in spec.nodes.iter().enumerate() {
        for src in &n.inputs {
            if let Some(&j) = declared.get(src.as_str()) {
                indegree[i] += 1;
                consumers[j].push(i);
            } else if !is_input(src) {
                return Err(GraphError::UnknownValue(src.clone()));
            }
        }
    }
    let mut ready: VecDeque<usize> = (0..spec.nodes.len())
        .filter(|&i| indegree[i] == 0)
        .collect();
    let mut order = Vec::with_capacity(spec.nodes.len());
    while let Some(i) = ready.pop_front() {
        order.push(i);
        let mut newly: Vec<usize> = Vec::new();
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                newly.push(c);
            }
        }
        newly.sort_unstable();
        ready.extend(newly);
        ready.make_contiguous().sort_unstable();
    }
    if order.len() != spec.nodes.len() {
        let stuck = (0..spec.nodes.len()).find(|i| !order.contains(i)).unwrap();
        return Err(GraphError::Cycle(spec.nodes[stuck].name.clone()));
    }

    let mut b = GraphBuilder::new();
    for input in &spec.inputs {
        b.input(&input.name, &input.shape)?;
    }
    for i in order {
        let n = &spec.nodes[i];
        let ins = n
            .inputs
            .iter()
            .map(|s| {
                b.lookup(s)
                    .ok_or_else(|| GraphError::UnknownValue(s.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        b.node(&n.name, n.op.clone(), &ins)?;
    }
    for out in &spec.outputs {
        let v = b
            .lookup(out)
            .ok_or_else(|| GraphError::UnknownValue(out.clone()))?;
        b.output(out, v)?;
    }
    b.build()
}

/// Layer-level model description, `{layers: [{kind, rows, cols}], seed}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: String,
    #[serde(default)]
    pub rows: u32,
    #[serde(default)]
    pub cols: u32,
}

impl LayerSpec {
    pub fn dense(rows: u32, cols: u32) -> Self {
        LayerSpec {
            kind: "dense".into(),
            rows,
            cols,
        }
    }

    pub fn activation(kind: &str) -> Self {
        LayerSpec {
            kind: kind.into(),
            rows: 0,
            cols: 0,
        }
    }
}

impl ModelSpec {
    /// Dense layers of the given widths with relu between them.
    pub fn mlp(widths: &[u32], seed: u64) -> Self {
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::activation("relu"));
            }
            layers.push(LayerSpec::dense(w[0], w[1]));
        }
        ModelSpec { layers, seed }
    }

    pub fn input_width(&self) -> Option<u32> {
        self.layers
            .iter()
            .find(|l| l.kind == "dense")
            .map(|l| l.rows)
    }

    pub fn output_width(&self) -> Option<u32> {
        self.layers
            .iter()
            .rev()
            .find(|l| l.kind == "dense")
            .map(|l| l.cols)
    }

    /// Parameter names and shapes in canonical order: `w{i}`, `b{i}` per dense layer.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<u32>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().filter(|l| l.kind == "dense").enumerate() {
            out.push((format!("w{i}"), vec![l.rows, l.cols]));
            out.push((format!("b{i}"), vec![l.cols]));
        }
        out
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let mut width: Option<u32> = None;
        let mut has_dense = false;
        for l in &self.layers {
            match l.kind.as_str() {
                "dense" => {
                    if l.rows == 0 || l.cols == 0 {
                        return Err(GraphError::Invalid("dense layer with zero width".into()));
                    }
                    if let Some(w) = width {
                        if w != l.rows {
                            return Err(GraphError::ShapeMismatch {
                                op: "matmul".into(),
                                detail: format!(
                                    "layer expects {} inputs but previous layer produces {w}",
                                    l.rows
                                ),
                            });
                        }
                    }
                    width = Some(l.cols);
                    has_dense = true;
                }
                "relu" | "sigmoid" | "argmax" => {}
                other => return Err(GraphError::UnsupportedOp(other.to_string())),
            }
        }
        if !has_dense {
            return Err(GraphError::Invalid("model has no dense layers".into()));
        }
        Ok(())
    }

    /// Appends the forward pass for `x` (shape `[batch, in]`) to `b`, reading
    /// parameters from inputs named `{params}w{i}` / `{params}b{i}` and naming
    /// nodes under `scope`.
    pub fn append_forward(
        &self,
        b: &mut GraphBuilder,
        params: &str,
        scope: &str,
        x: ValueRef,
    ) -> Result<ForwardValues, GraphError> {
        self.validate()?;
        let mut cur = x;
        let mut fw = ForwardValues::default();
        let mut dense_idx = 0usize;
        for (li, l) in self.layers.iter().enumerate() {
            match l.kind.as_str() {
                "dense" => {
                    let w = b
                        .lookup(&format!("{params}w{dense_idx}"))
                        .ok_or_else(|| GraphError::UnknownValue(format!("{params}w{dense_idx}")))?;
                    let bias = b
                        .lookup(&format!("{params}b{dense_idx}"))
                        .ok_or_else(|| GraphError::UnknownValue(format!("{params}b{dense_idx}")))?;
                    fw.layer_inputs.push(cur);
                    let z = b.matmul(&format!("{scope}l{li}.matmul"), cur, w)?;
                    cur = b.node(&format!("{scope}l{li}.bias"), Op::AddBias, &[z, bias])?;
                    fw.pre_activations.push(cur);
                    dense_idx += 1;
                }
                "relu" => cur = b.node(&format!("{scope}l{li}.relu"), Op::Relu, &[cur])?,
                "sigmoid" => {
                    cur = b.node(&format!("{scope}l{li}.sigmoid"), Op::SigmoidLut, &[cur])?
                }
                "argmax" => cur = b.node(&format!("{scope}l{li}.argmax"), Op::Argmax, &[cur])?,
                other => return Err(GraphError::UnsupportedOp(other.to_string())),
            }
        }
        fw.output = cur;
        Ok(fw)
    }

    /// Inference graph over a `[batch, in]` input named `x`, output `y`.
    pub fn inference_graph(&self, batch: u32) -> Result<CompGraph, GraphError> {
        self.validate()?;
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[batch, self.input_width().unwrap()])?;
        for (name, shape) in self.parameter_shapes() {
            b.input(&name, &shape)?;
        }
        let fw = self.append_forward(&mut b, "", "", x)?;
        b.output("y", fw.output)?;
        b.build()
    }
}

#[derive(Debug, Default, Clone)]
pub struct ForwardValues {
    /// Input to each dense layer.
    pub layer_inputs: Vec<ValueRef>,
    /// Output of each dense layer before its activation.
    pub pre_activations: Vec<ValueRef>,
    pub output: ValueRef,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_node_order() {
        let g = ModelSpec::mlp(&[4, 8, 2], 0).inference_graph(1).unwrap();
        assert_eq!(
            g.node_kinds(),
            ["matmul", "add-bias", "relu", "matmul", "add-bias"]
        );
        assert_eq!(g.shape_of(g.outputs()[0].1), &[1, 2]);
    }

    #[test]
    fn matmul_inner_dimension_mismatch() {
        let mut b = GraphBuilder::new();
        let a = b.input("a", &[2, 3]).unwrap();
        let c = b.input("c", &[4, 2]).unwrap();
        assert!(matches!(
            b.matmul("m", a, c),
            Err(GraphError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn model_width_mismatch_and_unknown_layer() {
        let spec = ModelSpec {
            layers: vec![LayerSpec::dense(4, 8), LayerSpec::dense(3, 2)],
            seed: 0,
        };
        assert!(matches!(
            spec.validate(),
            Err(GraphError::ShapeMismatch { .. })
        ));
        let spec = ModelSpec {
            layers: vec![LayerSpec::dense(4, 8), LayerSpec::activation("conv2d")],
            seed: 0,
        };
        assert_eq!(
            spec.validate(),
            Err(GraphError::UnsupportedOp("conv2d".into()))
        );
    }

    #[test]
    fn spec_nodes_are_topologically_sorted() {
        let json = r#"{
            "inputs": [{"name": "x", "shape": [1, 2]}],
            "nodes": [
                {"name": "b", "op": "relu", "inputs": ["a"]},
                {"name": "a", "op": "add", "inputs": ["x", "x"]}
            ],
            "outputs": ["b"]
        }"#;
        let spec: GraphSpec = serde_json::from_str(json).unwrap();
        let g = build_graph(&spec).unwrap();
        assert_eq!(g.node_kinds(), ["add", "relu"]);
    }

    #[test]
    fn cyclic_spec_is_rejected() {
        let json = r#"{
            "inputs": [{"name": "x", "shape": [2]}],
            "nodes": [
                {"name": "a", "op": "add", "inputs": ["x", "b"]},
                {"name": "b", "op": "relu", "inputs": ["a"]}
            ],
            "outputs": ["b"]
        }"#;
        let spec: GraphSpec = serde_json::from_str(json).unwrap();
        assert!(matches!(build_graph(&spec), Err(GraphError::Cycle(_))));
    }

    #[test]
    fn unsupported_op_in_json() {
        let json = r#"{"name": "c", "op": "conv2d", "inputs": ["x"]}"#;
        assert!(serde_json::from_str::<NodeSpec>(json).is_err());
    }
}
