use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// One node of a computation graph. Operands are indices of earlier nodes,
/// so any `Vec<Op>` built through `Graph` is already in topological order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Op {
    /// Leaf bound at evaluation time. `trainable` marks optimizer targets.
    Input { name: String, trainable: bool },
    /// Leaf with a value frozen into the graph.
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Strict rank-2 matrix product.
    MatMul(NodeId, NodeId),
    /// NCHW convolution, stride 1, zero "same" padding, odd kernel sides.
    Conv2d { image: NodeId, kernel: NodeId },
    Relu(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    /// Elementwise x^p for a fixed exponent; p = 0.5 gives sqrt.
    PowConst { input: NodeId, exponent: f64 },
    /// Reductions over all elements; outputs are rank-0 scalars.
    Sum(NodeId),
    Mean(NodeId),
    L1Norm(NodeId),
    L2NormSq(NodeId),
    /// Reshape with every dimension fixed.
    Reshape { input: NodeId, shape: Vec<usize> },
    /// Reshape that preserves the leading (batch) dimension.
    ReshapeTail { input: NodeId, tail: Vec<usize> },
    /// Slice [from, to) along axis 1.
    SliceAxis1 { input: NodeId, from: usize, to: usize },
    /// Concatenate along axis 1; all other axes must match.
    ConcatAxis1(NodeId, NodeId),
    /// Forward: 1.0 where x > 0.5 else 0.0. Backward: identity
    /// (straight-through), so binary decisions stay differentiable.
    BinarizeSte(NodeId),
    /// Forward on [B,C,H,W]: one-hot of the argmax over axis 1 per (b,h,w),
    /// ties resolved to the lowest channel. Backward: identity.
    PlaneArgmaxOneHot(NodeId),
}

impl Op {
    pub fn operands(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input { .. } | Const(_) => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | ConcatAxis1(a, b) => {
                vec![*a, *b]
            }
            Conv2d { image, kernel } => vec![*image, *kernel],
            Relu(a) | Sigmoid(a) | Ln(a) | Abs(a) | Sum(a) | Mean(a) | L1Norm(a)
            | L2NormSq(a) | BinarizeSte(a) | PlaneArgmaxOneHot(a) => vec![*a],
            PowConst { input, .. }
            | Reshape { input, .. }
            | ReshapeTail { input, .. }
            | SliceAxis1 { input, .. } => vec![*input],
        }
    }

    pub fn label(&self) -> &'static str {
        use Op::*;
        match self {
            Input { .. } => "Input",
            Const(_) => "Const",
            Add(..) => "Add",
            Sub(..) => "Sub",
            Mul(..) => "Mul",
            MatMul(..) => "MatMul",
            Conv2d { .. } => "Conv2d",
            Relu(_) => "Relu",
            Sigmoid(_) => "Sigmoid",
            Ln(_) => "Ln",
            Abs(_) => "Abs",
            PowConst { .. } => "PowConst",
            Sum(_) => "Sum",
            Mean(_) => "Mean",
            L1Norm(_) => "L1Norm",
            L2NormSq(_) => "L2NormSq",
            Reshape { .. } => "Reshape",
            ReshapeTail { .. } => "ReshapeTail",
            SliceAxis1 { .. } => "SliceAxis1",
            ConcatAxis1(..) => "ConcatAxis1",
            BinarizeSte(_) => "BinarizeSte",
            PlaneArgmaxOneHot(_) => "PlaneArgmaxOneHot",
        }
    }

    fn remapped(&self, map: &[NodeId]) -> Op {
        use Op::*;
        match self {
            Input { name, trainable } => Input {
                name: name.clone(),
                trainable: *trainable,
            },
            Const(t) => Const(t.clone()),
            Add(a, b) => Add(map[*a], map[*b]),
            Sub(a, b) => Sub(map[*a], map[*b]),
            Mul(a, b) => Mul(map[*a], map[*b]),
            MatMul(a, b) => MatMul(map[*a], map[*b]),
            Conv2d { image, kernel } => Conv2d {
                image: map[*image],
                kernel: map[*kernel],
            },
            Relu(a) => Relu(map[*a]),
            Sigmoid(a) => Sigmoid(map[*a]),
            Ln(a) => Ln(map[*a]),
            Abs(a) => Abs(map[*a]),
            PowConst { input, exponent } => PowConst {
                input: map[*input],
                exponent: *exponent,
            },
            Sum(a) => Sum(map[*a]),
            Mean(a) => Mean(map[*a]),
            L1Norm(a) => L1Norm(map[*a]),
            L2NormSq(a) => L2NormSq(map[*a]),
            Reshape { input, shape } => Reshape {
                input: map[*input],
                shape: shape.clone(),
            },
            ReshapeTail { input, tail } => ReshapeTail {
                input: map[*input],
                tail: tail.clone(),
            },
            SliceAxis1 { input, from, to } => SliceAxis1 {
                input: map[*input],
                from: *from,
                to: *to,
            },
            ConcatAxis1(a, b) => ConcatAxis1(map[*a], map[*b]),
            BinarizeSte(a) => BinarizeSte(map[*a]),
            PlaneArgmaxOneHot(a) => PlaneArgmaxOneHot(map[*a]),
        }
    }
}

/// Append-only DAG plus a name registry for the nodes other code needs to
/// find again (inputs, outputs, probe taps). Node ids are stable.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Graph {
    pub ops: Vec<Op>,
    named: BTreeMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for operand in op.operands() {
            assert!(operand < self.ops.len(), "operand {operand} not yet defined");
        }
        self.ops.push(op);
        self.ops.len() - 1
    }

    pub fn input(&mut self, name: &str, trainable: bool) -> NodeId {
        assert!(
            self.find_input(name).is_none(),
            "duplicate input name {name}"
        );
        let id = self.push(Op::Input {
            name: name.into(),
            trainable,
        });
        self.named.insert(name.into(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn constant_scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn conv2d(&mut self, image: NodeId, kernel: NodeId) -> NodeId {
        self.push(Op::Conv2d { image, kernel })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Ln(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Abs(a))
    }

    pub fn pow_const(&mut self, input: NodeId, exponent: f64) -> NodeId {
        self.push(Op::PowConst { input, exponent })
    }

    pub fn sqrt(&mut self, input: NodeId) -> NodeId {
        self.pow_const(input, 0.5)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn l1_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L1Norm(a))
    }

    pub fn l2_norm_sq(&mut self, a: NodeId) -> NodeId {
        self.push(Op::L2NormSq(a))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape { input, shape })
    }

    pub fn reshape_tail(&mut self, input: NodeId, tail: Vec<usize>) -> NodeId {
        self.push(Op::ReshapeTail { input, tail })
    }

    pub fn slice_axis1(&mut self, input: NodeId, from: usize, to: usize) -> NodeId {
        self.push(Op::SliceAxis1 { input, from, to })
    }

    pub fn concat_axis1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatAxis1(a, b))
    }

    pub fn binarize_ste(&mut self, a: NodeId) -> NodeId {
        self.push(Op::BinarizeSte(a))
    }

    pub fn plane_argmax_one_hot(&mut self, a: NodeId) -> NodeId {
        self.push(Op::PlaneArgmaxOneHot(a))
    }

    /// Register a lookup name for an existing node.
    pub fn register(&mut self, name: &str, id: NodeId) {
        assert!(id < self.ops.len(), "cannot name missing node {id}");
        self.named.insert(name.into(), id);
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.named
            .get(name)
            .copied()
            .ok_or_else(|| Error::Graph(format!("no node named {name}")))
    }

    pub fn names(&self) -> &BTreeMap<String, NodeId> {
        &self.named
    }

    pub fn find_input(&self, name: &str) -> Option<NodeId> {
        self.ops.iter().position(
            |op| matches!(op, Op::Input { name: n, .. } if n == name),
        )
    }

    /// All `Input` leaves as (name, trainable, id).
    pub fn inputs(&self) -> Vec<(String, bool, NodeId)> {
        self.ops
            .iter()
            .enumerate()
            .filter_map(|(id, op)| match op {
                Op::Input { name, trainable } => Some((name.clone(), *trainable, id)),
                _ => None,
            })
            .collect()
    }

    /// Structural checks for graphs that arrive via deserialization.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, op) in self.ops.iter().enumerate() {
            for operand in op.operands() {
                if operand >= id {
                    return Err(Error::Graph(format!(
                        "node {id} ({}) references later node {operand}",
                        op.label()
                    )));
                }
            }
            if let Op::Input { name, .. } = op {
                if !seen.insert(name.clone()) {
                    return Err(Error::Graph(format!("duplicate input name {name}")));
                }
            }
        }
        for (name, &id) in &self.named {
            if id >= self.ops.len() {
                return Err(Error::Graph(format!("name {name} points at missing node")));
            }
        }
        Ok(())
    }

    /// Nodes from which any of `roots` is reachable, roots included.
    pub fn ancestors(&self, roots: &[NodeId]) -> Vec<bool> {
        let mut mark = vec![false; self.ops.len()];
        let mut stack: Vec<NodeId> = roots.to_vec();
        while let Some(id) = stack.pop() {
            if mark[id] {
                continue;
            }
            mark[id] = true;
            stack.extend(self.ops[id].operands());
        }
        mark
    }

    /// Copy this graph into `dst`, returning the destination id of every
    /// source node. `Input` leaves are resolved in order: `input_map` wires
    /// them to existing `dst` nodes, `freeze` turns them into constants, and
    /// anything left becomes a fresh input named `prefix` + original name.
    pub fn inline_into(
        &self,
        dst: &mut Graph,
        input_map: &BTreeMap<String, NodeId>,
        freeze: &BTreeMap<String, Tensor>,
        prefix: &str,
    ) -> Result<Vec<NodeId>> {
        let mut map: Vec<NodeId> = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let dst_id = match op {
                Op::Input { name, trainable } => {
                    if let Some(&target) = input_map.get(name) {
                        if target >= dst.ops.len() {
                            return Err(Error::Graph(format!(
                                "input map for {name} points at missing node {target}"
                            )));
                        }
                        target
                    } else if let Some(value) = freeze.get(name) {
                        dst.constant(value.clone())
                    } else {
                        dst.input(&format!("{prefix}{name}"), *trainable)
                    }
                }
                other => dst.push(other.remapped(&map)),
            };
            map.push(dst_id);
        }
        Ok(map)
    }

    /// Subgraph computing `node` from the original inputs. Input names and
    /// flags survive; every registered name whose node is kept survives too.
    pub fn extract_up_to(&self, node: NodeId, output_name: &str) -> Result<Graph> {
        if node >= self.ops.len() {
            return Err(Error::Graph(format!("no node {node} to extract")));
        }
        let keep = self.ancestors(&[node]);
        let mut out = Graph::new();
        let mut map: Vec<Option<NodeId>> = vec![None; self.ops.len()];
        for (id, op) in self.ops.iter().enumerate() {
            if !keep[id] {
                continue;
            }
            let dense: Vec<NodeId> = map
                .iter()
                .map(|m| m.unwrap_or(usize::MAX))
                .collect();
            map[id] = Some(out.push(op.remapped(&dense)));
        }
        for (name, &id) in &self.named {
            if let Some(new_id) = map[id] {
                out.named.insert(name.clone(), new_id);
            }
        }
        out.named.insert(output_name.into(), map[node].unwrap());
        Ok(out)
    }

    /// Subgraph computing `output` when `cut` is replaced by a fresh input
    /// named `new_input`. Fails unless `cut` cleanly separates `output` from
    /// everything upstream of `cut` (leaf nodes excepted).
    pub fn extract_from(
        &self,
        cut: NodeId,
        new_input: &str,
        output: NodeId,
        output_name: &str,
    ) -> Result<Graph> {
        if cut >= self.ops.len() || output >= self.ops.len() {
            return Err(Error::Graph("extract_from node out of range".into()));
        }
        // Reverse reachability from `output`, treating `cut` as a leaf.
        let mut needed = vec![false; self.ops.len()];
        let mut stack = vec![output];
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            if id != cut {
                stack.extend(self.ops[id].operands());
            }
        }
        let upstream = self.ancestors(&[cut]);
        for id in 0..self.ops.len() {
            if needed[id] && id != cut && upstream[id] && !self.ops[id].operands().is_empty() {
                return Err(Error::Graph(format!(
                    "node {cut} does not separate the graph: node {id} feeds both sides"
                )));
            }
        }
        let mut out = Graph::new();
        let mut map: Vec<Option<NodeId>> = vec![None; self.ops.len()];
        map[cut] = Some(out.input(new_input, false));
        for (id, op) in self.ops.iter().enumerate() {
            if !needed[id] || id == cut {
                continue;
            }
            let dense: Vec<NodeId> = map
                .iter()
                .map(|m| m.unwrap_or(usize::MAX))
                .collect();
            map[id] = Some(out.push(op.remapped(&dense)));
        }
        for (name, &id) in &self.named {
            if id != cut {
                if let Some(new_id) = map[id] {
                    out.named.insert(name.clone(), new_id);
                }
            }
        }
        out.named.insert(output_name.into(), map[output].unwrap());
        Ok(out)
    }
}
