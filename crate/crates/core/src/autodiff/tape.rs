use thiserror::Error;

use super::matrix::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("expected {expected} leaf values, got {got}")]
    LeafCount { expected: usize, got: usize },
    #[error("leaf {leaf} expects {expected} entries, got {got}")]
    LeafShape {
        leaf: usize,
        expected: usize,
        got: usize,
    },
    #[error("leaf {leaf} contains a non-finite value")]
    NonFiniteLeaf { leaf: usize },
    #[error("{op} domain violation at node {node}: argument {value}")]
    Domain {
        op: &'static str,
        node: usize,
        value: f64,
    },
    #[error("{op} produced a non-finite value at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("output index {index} out of range ({count} outputs)")]
    OutputIndex { index: usize, count: usize },
    #[error("output {index} has shape {rows}x{cols}; backward needs a 1x1 output")]
    NotScalar {
        index: usize,
        rows: usize,
        cols: usize,
    },
    #[error("trace has {got} node values but tape has {expected} nodes")]
    TraceMismatch { expected: usize, got: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(usize),
    Const(Matrix),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    RowSum(NodeId),
    SelectCols(NodeId, Vec<usize>),
    ConcatCols(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::SelectCols(..) => "select_cols",
            Op::ConcatCols(_) => "concat_cols",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    needs_grad: bool,
}

/// A recorded computation graph over matrix-valued nodes.
///
/// Nodes are appended in topological order. The tape stores operations, not
/// values, so one recording can be re-evaluated at many leaf values; each
/// evaluation produces a [`Trace`] that the reverse sweep consumes.
///
/// Binary elementwise operations broadcast any operand dimension of size 1.
/// Shape errors are programming errors and panic at record time.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<NodeId>,
    outputs: Vec<NodeId>,
}

/// Cached forward values for every node of one tape evaluation.
#[derive(Clone, Debug)]
pub struct Trace {
    values: Vec<Matrix>,
}

/// Per-leaf partial derivatives, one matrix per leaf in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector {
    pub partials: Vec<Matrix>,
}

impl GradVector {
    pub fn leaf(&self, k: usize) -> &Matrix {
        &self.partials[k]
    }

    /// All partials concatenated in leaf order.
    pub fn flatten(&self) -> Vec<f64> {
        self.partials
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    if a == b || b == 1 {
        a
    } else if a == 1 {
        b
    } else {
        panic!("cannot broadcast dimensions {a} and {b}")
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_shape(&self, k: usize) -> (usize, usize) {
        let n = &self.nodes[self.leaves[k].0];
        (n.rows, n.cols)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn output_count(&self) -> usize {
        self.outputs.len()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf(_) => true,
            Op::Const(_) => false,
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b) => self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad,
            Op::Neg(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::SelectCols(a, _) => self.nodes[a.0].needs_grad,
            Op::ConcatCols(parts) => parts.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            rows,
            cols,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares an input whose value is supplied at evaluation time.
    pub fn leaf(&mut self, rows: usize, cols: usize) -> NodeId {
        let slot = self.leaves.len();
        let id = self.push(Op::Leaf(slot), rows, cols);
        self.leaves.push(id);
        id
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        let (r, c) = value.shape();
        self.push(Op::Const(value), r, c)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Matrix::scalar(value))
    }

    /// Marks a node as an output and returns its output index.
    pub fn mark_output(&mut self, id: NodeId) -> usize {
        self.outputs.push(id);
        self.outputs.len() - 1
    }

    fn binary(&mut self, a: NodeId, b: NodeId, make: fn(NodeId, NodeId) -> Op) -> NodeId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let rows = broadcast_dim(ar, br);
        let cols = broadcast_dim(ac, bc);
        self.push(make(a, b), rows, cols)
    }

    fn unary(&mut self, a: NodeId, make: fn(NodeId) -> Op) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(make(a), r, c)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Div)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul inner dimension mismatch: {ar}x{ac} * {br}x{bc}");
        self.push(Op::MatMul(a, b), ar, bc)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sin)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Cos)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square)
    }

    /// Square root; the reverse sweep uses 0 as the derivative at 0.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt)
    }

    /// Sum of all entries, giving a 1x1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, 1)
    }

    /// Sum across columns, giving a `rows x 1` node.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        self.push(Op::RowSum(a), r, 1)
    }

    /// Gathers columns of `a` by index; indices may repeat.
    pub fn select_cols(&mut self, a: NodeId, cols: Vec<usize>) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(
            cols.iter().all(|&j| j < c),
            "column index out of range for {r}x{c} node"
        );
        let n = cols.len();
        self.push(Op::SelectCols(a, cols), r, n)
    }

    /// Concatenates nodes with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero nodes");
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for p in &parts {
            let (r, c) = self.shape(*p);
            assert_eq!(r, rows, "concat_cols row mismatch");
            cols += c;
        }
        self.push(Op::ConcatCols(parts), rows, cols)
    }

    /// `k * a` for a constant `k`.
    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let c = self.scalar(k);
        self.mul(a, c)
    }

    fn value<'a>(&'a self, trace: &'a Trace, id: NodeId) -> &'a Matrix {
        match &self.nodes[id.0].op {
            Op::Const(m) => m,
            _ => &trace.values[id.0],
        }
    }

    /// Evaluates every node at the given leaf values.
    pub fn forward<V: AsRef<[f64]>>(&self, leaf_values: &[V]) -> Result<Trace> {
        if leaf_values.len() != self.leaves.len() {
            return Err(AutodiffError::LeafCount {
                expected: self.leaves.len(),
                got: leaf_values.len(),
            });
        }
        let mut trace = Trace {
            values: Vec::with_capacity(self.nodes.len()),
        };
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = self.eval_node(idx, node, &trace, leaf_values)?;
            trace.values.push(v);
        }
        Ok(trace)
    }

    /// Evaluates the tape and returns the values of the marked outputs.
    pub fn evaluate<V: AsRef<[f64]>>(&self, leaf_values: &[V]) -> Result<Vec<Matrix>> {
        let trace = self.forward(leaf_values)?;
        Ok(self
            .outputs
            .iter()
            .map(|&id| self.value(&trace, id).clone())
            .collect())
    }

    pub fn output_value<'a>(&'a self, trace: &'a Trace, index: usize) -> Result<&'a Matrix> {
        let id = *self
            .outputs
            .get(index)
            .ok_or(AutodiffError::OutputIndex {
                index,
                count: self.outputs.len(),
            })?;
        Ok(self.value(trace, id))
    }

    /// Value of any node in an evaluated trace.
    pub fn node_value<'a>(&'a self, trace: &'a Trace, id: NodeId) -> &'a Matrix {
        self.value(trace, id)
    }

    fn eval_node<V: AsRef<[f64]>>(
        &self,
        idx: usize,
        node: &Node,
        trace: &Trace,
        leaf_values: &[V],
    ) -> Result<Matrix> {
        let name = node.op.name();
        let out = match &node.op {
            Op::Leaf(slot) => {
                let vals = leaf_values[*slot].as_ref();
                if vals.len() != node.rows * node.cols {
                    return Err(AutodiffError::LeafShape {
                        leaf: *slot,
                        expected: node.rows * node.cols,
                        got: vals.len(),
                    });
                }
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(AutodiffError::NonFiniteLeaf { leaf: *slot });
                }
                Matrix::from_vec(node.rows, node.cols, vals.to_vec())
            }
            // Constants are read from the node itself.
            Op::Const(_) => return Ok(Matrix::zeros(0, 0)),
            Op::Add(a, b) => self.broadcast_eval(node, *a, *b, trace, |x, y| x + y),
            Op::Sub(a, b) => self.broadcast_eval(node, *a, *b, trace, |x, y| x - y),
            Op::Mul(a, b) => self.broadcast_eval(node, *a, *b, trace, |x, y| x * y),
            Op::Div(a, b) => {
                if let Some(&d) = self.value(trace, *b).as_slice().iter().find(|&&d| d == 0.0) {
                    return Err(AutodiffError::Domain {
                        op: name,
                        node: idx,
                        value: d,
                    });
                }
                self.broadcast_eval(node, *a, *b, trace, |x, y| x / y)
            }
            Op::Neg(a) => self.map_unary(trace, *a, |x| -x),
            Op::MatMul(a, b) => {
                let mut out = Matrix::zeros(node.rows, node.cols);
                matmul_acc(self.value(trace, *a), self.value(trace, *b), &mut out);
                out
            }
            Op::Relu(a) => self.map_unary(trace, *a, |x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => self.map_unary(trace, *a, sigmoid),
            Op::Softplus(a) => self.map_unary(trace, *a, softplus),
            Op::Exp(a) => self.map_unary(trace, *a, f64::exp),
            Op::Log(a) => {
                let x = self.value(trace, *a);
                if let Some(&bad) = x.as_slice().iter().find(|&&v| v <= 0.0) {
                    return Err(AutodiffError::Domain {
                        op: name,
                        node: idx,
                        value: bad,
                    });
                }
                x.map(f64::ln)
            }
            Op::Sin(a) => self.map_unary(trace, *a, f64::sin),
            Op::Cos(a) => self.map_unary(trace, *a, f64::cos),
            Op::Square(a) => self.map_unary(trace, *a, |x| x * x),
            Op::Sqrt(a) => {
                let x = self.value(trace, *a);
                if let Some(&bad) = x.as_slice().iter().find(|&&v| v < 0.0) {
                    return Err(AutodiffError::Domain {
                        op: name,
                        node: idx,
                        value: bad,
                    });
                }
                x.map(f64::sqrt)
            }
            Op::Sum(a) => Matrix::scalar(self.value(trace, *a).as_slice().iter().sum()),
            Op::RowSum(a) => {
                let x = self.value(trace, *a);
                let sums: Vec<f64> = (0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect();
                Matrix::from_vec(x.rows(), 1, sums)
            }
            Op::SelectCols(a, cols) => {
                let x = self.value(trace, *a);
                let mut out = Matrix::zeros(node.rows, node.cols);
                for r in 0..node.rows {
                    let src = x.row_slice(r);
                    for (k, &c) in cols.iter().enumerate() {
                        out.set(r, k, src[c]);
                    }
                }
                out
            }
            Op::ConcatCols(parts) => {
                let mut data = Vec::with_capacity(node.rows * node.cols);
                for r in 0..node.rows {
                    for p in parts {
                        data.extend_from_slice(self.value(trace, *p).row_slice(r));
                    }
                }
                Matrix::from_vec(node.rows, node.cols, data)
            }
        };
        if !out.all_finite() {
            return Err(AutodiffError::NonFinite { op: name, node: idx });
        }
        Ok(out)
    }

    fn map_unary(&self, trace: &Trace, a: NodeId, f: impl Fn(f64) -> f64) -> Matrix {
        self.value(trace, a).map(f)
    }

    /// `g * d(input, output)` for an elementwise unary node.
    fn map_elementwise(
        &self,
        trace: &Trace,
        idx: usize,
        g: &Matrix,
        a: NodeId,
        d: impl Fn(f64, f64) -> f64,
    ) -> Matrix {
        let x = self.value(trace, a);
        let out = &trace.values[idx];
        let data = g
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .zip(out.as_slice())
            .map(|((&gv, &xv), &ov)| gv * d(xv, ov))
            .collect();
        Matrix::from_vec(g.rows(), g.cols(), data)
    }

    fn broadcast_eval(
        &self,
        node: &Node,
        a: NodeId,
        b: NodeId,
        trace: &Trace,
        f: impl Fn(f64, f64) -> f64,
    ) -> Matrix {
        let av = self.value(trace, a);
        let bv = self.value(trace, b);
        if av.shape() == bv.shape() {
            let data = av
                .as_slice()
                .iter()
                .zip(bv.as_slice())
                .map(|(&x, &y)| f(x, y))
                .collect();
            return Matrix::from_vec(node.rows, node.cols, data);
        }
        // Row-vector operand, as in a bias add.
        if bv.rows() == 1 && av.cols() == node.cols && bv.cols() == node.cols {
            let brow = bv.as_slice();
            let mut data = Vec::with_capacity(node.rows * node.cols);
            for r in 0..node.rows {
                data.extend(av.row_slice(r).iter().zip(brow).map(|(&x, &y)| f(x, y)));
            }
            return Matrix::from_vec(node.rows, node.cols, data);
        }
        let mut out = Matrix::zeros(node.rows, node.cols);
        for r in 0..node.rows {
            let ar = if av.rows() == 1 { 0 } else { r };
            let br = if bv.rows() == 1 { 0 } else { r };
            for c in 0..node.cols {
                let ac = if av.cols() == 1 { 0 } else { c };
                let bc = if bv.cols() == 1 { 0 } else { c };
                out.set(r, c, f(av.get(ar, ac), bv.get(br, bc)));
            }
        }
        out
    }

    /// Reverse sweep from a scalar output; returns partials for every leaf.
    pub fn backward(&self, trace: &Trace, output_index: usize) -> Result<GradVector> {
        let id = *self
            .outputs
            .get(output_index)
            .ok_or(AutodiffError::OutputIndex {
                index: output_index,
                count: self.outputs.len(),
            })?;
        let (rows, cols) = self.shape(id);
        if (rows, cols) != (1, 1) {
            return Err(AutodiffError::NotScalar {
                index: output_index,
                rows,
                cols,
            });
        }
        self.backward_seeded(trace, id, Matrix::scalar(1.0))
    }

    /// Reverse sweep from an arbitrary node with a caller-supplied adjoint seed.
    pub fn backward_seeded(&self, trace: &Trace, from: NodeId, seed: Matrix) -> Result<GradVector> {
        if trace.values.len() != self.nodes.len() {
            return Err(AutodiffError::TraceMismatch {
                expected: self.nodes.len(),
                got: trace.values.len(),
            });
        }
        assert_eq!(seed.shape(), self.shape(from), "seed shape mismatch");
        let mut adj: Vec<Option<Matrix>> = vec![None; from.0 + 1];
        adj[from.0] = Some(seed);

        for idx in (0..=from.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf(_) = node.op {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(idx, node, &g, trace, &mut adj);
        }

        let partials = self
            .leaves
            .iter()
            .map(|&leaf| {
                let (r, c) = self.shape(leaf);
                adj.get_mut(leaf.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(r, c))
            })
            .collect();
        Ok(GradVector { partials })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], id: NodeId, contrib: Matrix) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(acc) => {
                for (a, c) in acc.as_mut_slice().iter_mut().zip(contrib.as_slice()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Reduces an output-shaped gradient onto a (possibly broadcast) operand.
    fn reduce_to(&self, id: NodeId, full: Matrix) -> Matrix {
        let (r, c) = self.shape(id);
        if full.shape() == (r, c) {
            return full;
        }
        let mut out = Matrix::zeros(r, c);
        if r == 1 && c == full.cols() {
            let acc = out.as_mut_slice();
            for i in 0..full.rows() {
                for (o, &v) in acc.iter_mut().zip(full.row_slice(i)) {
                    *o += v;
                }
            }
            return out;
        }
        for i in 0..full.rows() {
            let ri = if r == 1 { 0 } else { i };
            for j in 0..full.cols() {
                let cj = if c == 1 { 0 } else { j };
                let v = out.get(ri, cj) + full.get(i, j);
                out.set(ri, cj, v);
            }
        }
        out
    }

    /// Elementwise binary backward: `da = g * fa(x, y)`, `db = g * fb(x, y)`
    /// evaluated over the broadcast output shape.
    #[allow(clippy::too_many_arguments)]
    fn binary_backward(
        &self,
        node: &Node,
        a: NodeId,
        b: NodeId,
        g: &Matrix,
        trace: &Trace,
        adj: &mut [Option<Matrix>],
        fa: impl Fn(f64, f64) -> f64,
        fb: impl Fn(f64, f64) -> f64,
    ) {
        let av = self.value(trace, a);
        let bv = self.value(trace, b);
        let need_a = self.nodes[a.0].needs_grad;
        let need_b = self.nodes[b.0].needs_grad;
        let mut ga = Matrix::zeros(node.rows, node.cols);
        let mut gb = Matrix::zeros(node.rows, node.cols);
        for r in 0..node.rows {
            let ar = if av.rows() == 1 { 0 } else { r };
            let br = if bv.rows() == 1 { 0 } else { r };
            for c in 0..node.cols {
                let ac = if av.cols() == 1 { 0 } else { c };
                let bc = if bv.cols() == 1 { 0 } else { c };
                let (x, y) = (av.get(ar, ac), bv.get(br, bc));
                let gv = g.get(r, c);
                if need_a {
                    ga.set(r, c, gv * fa(x, y));
                }
                if need_b {
                    gb.set(r, c, gv * fb(x, y));
                }
            }
        }
        if need_a {
            let ga = self.reduce_to(a, ga);
            self.accumulate(adj, a, ga);
        }
        if need_b {
            let gb = self.reduce_to(b, gb);
            self.accumulate(adj, b, gb);
        }
    }

    fn propagate(
        &self,
        idx: usize,
        node: &Node,
        g: &Matrix,
        trace: &Trace,
        adj: &mut [Option<Matrix>],
    ) {
        match &node.op {
            Op::Leaf(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let ga = self.reduce_to(a, g.clone());
                    self.accumulate(adj, a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.reduce_to(b, g.clone());
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let ga = self.reduce_to(a, g.clone());
                    self.accumulate(adj, a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.reduce_to(b, g.map(|v| -v));
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Mul(a, b) => {
                self.binary_backward(node, *a, *b, g, trace, adj, |_, y| y, |x, _| x)
            }
            Op::Div(a, b) => self.binary_backward(
                node,
                *a,
                *b,
                g,
                trace,
                adj,
                |_, y| 1.0 / y,
                |x, y| -x / (y * y),
            ),
            Op::Neg(a) => self.accumulate(adj, *a, g.map(|v| -v)),
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].needs_grad {
                    let (r, c) = self.shape(a);
                    let mut ga = Matrix::zeros(r, c);
                    matmul_nt_acc(g, self.value(trace, b), &mut ga);
                    self.accumulate(adj, a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let (r, c) = self.shape(b);
                    let mut gb = Matrix::zeros(r, c);
                    matmul_tn_acc(self.value(trace, a), g, &mut gb);
                    self.accumulate(adj, b, gb);
                }
            }
            Op::Relu(a) => {
                let ga = self.map_elementwise(trace, idx, g, *a, |x, _| if x > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(adj, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = self.map_elementwise(trace, idx, g, *a, |_, s| s * (1.0 - s));
                self.accumulate(adj, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = self.map_elementwise(trace, idx, g, *a, |x, _| sigmoid(x));
                self.accumulate(adj, *a, ga);
            }
            Op::Exp(a) => {
                let ga = self.map_elementwise(trace, idx, g, *a, |_, e| e);
                self.accumulate(adj, *a, ga);
            }
            Op::Log(a) => {
                let ga = self.map_elementwise(trace, idx, g, *a, |x, _| 1.0 / x);
                self.accumulate(adj, *a, ga);
            }
            Op::Sin(a) => {
                let ga = self.map_elementwise(trace, idx, g, *a, |x, _| x.cos());
                self.accumulate(adj, *a, ga);
            }
            Op::Cos(a) => {
                let ga = self.map_elementwise(trace, idx, g, *a, |x, _| -x.sin());
                self.accumulate(adj, *a, ga);
            }
            Op::Square(a) => {
                let ga = self.map_elementwise(trace, idx, g, *a, |x, _| 2.0 * x);
                self.accumulate(adj, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = self.map_elementwise(trace, idx, g, *a, |_, s| if s > 0.0 { 0.5 / s } else { 0.0 });
                self.accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(adj, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    for j in 0..c {
                        ga.set(i, j, gi);
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::SelectCols(a, cols) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for (k, &j) in cols.iter().enumerate() {
                        let v = ga.get(i, j) + g.get(i, k);
                        ga.set(i, j, v);
                    }
                }
                self.accumulate(adj, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    if self.nodes[p.0].needs_grad {
                        let mut gp = Matrix::zeros(r, c);
                        for i in 0..r {
                            for j in 0..c {
                                gp.set(i, j, g.get(i, offset + j));
                            }
                        }
                        self.accumulate(adj, *p, gp);
                    }
                    offset += c;
                }
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Maximum relative error between reverse-mode partials of a scalar output
/// and central finite differences, over every leaf entry.
///
/// The relative error of one entry is `|a - n| / max(1, |a|, |n|)`.
pub fn gradcheck<V: AsRef<[f64]>>(
    tape: &Tape,
    leaf_values: &[V],
    output_index: usize,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidStep(step));
    }
    let trace = tape.forward(leaf_values)?;
    let grads = tape.backward(&trace, output_index)?;
    let mut work: Vec<Vec<f64>> = leaf_values.iter().map(|v| v.as_ref().to_vec()).collect();
    let eval = |vals: &[Vec<f64>]| -> Result<f64> {
        let t = tape.forward(vals)?;
        Ok(tape.output_value(&t, output_index)?.get(0, 0))
    };
    let mut worst = 0.0_f64;
    for leaf in 0..work.len() {
        for k in 0..work[leaf].len() {
            let orig = work[leaf][k];
            work[leaf][k] = orig + step;
            let up = eval(&work)?;
            work[leaf][k] = orig - step;
            let down = eval(&work)?;
            work[leaf][k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.partials[leaf].as_slice()[k];
            let denom = 1.0_f64.max(analytic.abs()).max(numeric.abs());
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
