//! Tape of primitive matrix operations with reverse-mode differentiation.
//!
//! Every node holds a 2-D `f64` array. The backward pass is itself expressed
//! with graph operations, so the gradients it returns are ordinary nodes that
//! can be differentiated again. This is what lets an outer loss see through
//! an inner gradient-descent step.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Index list shared between a gather/scatter node and its adjoint.
pub type Indices = Rc<[usize]>;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `[1, m]` repeated to `[n, m]`.
    BroadcastRows(NodeId, usize),
    /// `[n, 1]` repeated to `[n, m]`.
    BroadcastCols(NodeId, usize),
    /// `[1, 1]` repeated to any shape.
    BroadcastScalar(NodeId, (usize, usize)),
    /// Column sums, `[n, m] -> [1, m]`.
    SumRows(NodeId),
    /// Row sums, `[n, m] -> [n, 1]`.
    SumCols(NodeId),
    SumAll(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Recip(NodeId),
    /// max(x, 0); the derivative at 0 is taken to be 0.
    Relu(NodeId),
    /// Elementwise product with a constant array.
    MaskMul(NodeId, Rc<Array2<f64>>),
    GatherRows(NodeId, Indices),
    ScatterRows(NodeId, Indices, usize),
    /// `out[r, 0] = x[r, idx[r]]`.
    GatherElems(NodeId, Indices),
    ScatterElems(NodeId, Indices, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::SumAll(..) => "sum",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Relu(..) => "relu",
            Op::MaskMul(..) => "mask_mul",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::GatherElems(..) => "gather_elems",
            Op::ScatterElems(..) => "scatter_elems",
        }
    }

    fn inputs(&self) -> [Option<NodeId>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => [Some(a), Some(b)],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::BroadcastScalar(a, _)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Relu(a)
            | Op::MaskMul(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _, _)
            | Op::GatherElems(a, _)
            | Op::ScatterElems(a, _, _) => [Some(a), None],
        }
    }
}

fn compute<'a>(op: &Op, val: impl Fn(NodeId) -> &'a Array2<f64>) -> Array2<f64> {
    match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::Add(a, b) => val(*a) + val(*b),
        Op::Sub(a, b) => val(*a) - val(*b),
        Op::Mul(a, b) => val(*a) * val(*b),
        Op::Neg(a) => val(*a).mapv(|x| -x),
        Op::Scale(a, c) => val(*a).mapv(|x| x * c),
        Op::AddScalar(a, c) => val(*a).mapv(|x| x + c),
        Op::MatMul(a, b) => val(*a).dot(val(*b)),
        Op::Transpose(a) => val(*a).t().to_owned(),
        Op::BroadcastRows(a, n) => {
            let a = val(*a);
            a.broadcast((*n, a.ncols()))
                .expect("row broadcast")
                .to_owned()
        }
        Op::BroadcastCols(a, m) => {
            let a = val(*a);
            a.broadcast((a.nrows(), *m))
                .expect("column broadcast")
                .to_owned()
        }
        Op::BroadcastScalar(a, shape) => Array2::from_elem(*shape, val(*a)[[0, 0]]),
        Op::SumRows(a) => val(*a).sum_axis(Axis(0)).insert_axis(Axis(0)),
        Op::SumCols(a) => val(*a).sum_axis(Axis(1)).insert_axis(Axis(1)),
        Op::SumAll(a) => Array2::from_elem((1, 1), val(*a).sum()),
        Op::Exp(a) => val(*a).mapv(f64::exp),
        Op::Log(a) => val(*a).mapv(f64::ln),
        Op::Sqrt(a) => val(*a).mapv(f64::sqrt),
        Op::Recip(a) => val(*a).mapv(f64::recip),
        Op::Relu(a) => val(*a).mapv(|x| if x > 0.0 { x } else { 0.0 }),
        Op::MaskMul(a, mask) => val(*a) * &**mask,
        Op::GatherRows(a, idx) => val(*a).select(Axis(0), idx),
        Op::ScatterRows(a, idx, n) => {
            let a = val(*a);
            let mut out = Array2::zeros((*n, a.ncols()));
            for (src, &dst) in idx.iter().enumerate() {
                let mut row = out.row_mut(dst);
                row += &a.row(src);
            }
            out
        }
        Op::GatherElems(a, idx) => {
            let a = val(*a);
            Array2::from_shape_fn((a.nrows(), 1), |(r, _)| a[[r, idx[r]]])
        }
        Op::ScatterElems(a, idx, cols) => {
            let a = val(*a);
            let mut out = Array2::zeros((a.nrows(), *cols));
            for (r, &c) in idx.iter().enumerate() {
                out[[r, c]] = a[[r, 0]];
            }
            out
        }
    }
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
}

/// An append-only record of operations.
///
/// Nodes are only ever appended, so node ids are a topological order. Values
/// are checked for finiteness as they are created; the first offending node is
/// remembered and reported by [`Graph::check_finite`].
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    first_non_finite: Cell<Option<NodeId>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            first_non_finite: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input, parameter, or constant.
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        let id = self.push(value, Op::Leaf);
        Var { graph: self, id }
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    /// Re-wrap a node id recorded earlier on this graph.
    pub fn var(&self, id: NodeId) -> Var<'_> {
        assert!(id < self.len(), "node {id} does not exist");
        Var { graph: self, id }
    }

    pub fn value(&self, id: NodeId) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes.borrow()[id].op.name()
    }

    /// Error out if any node recorded so far holds a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite.get() {
            None => Ok(()),
            Some(node) => Err(Error::NumericFailure {
                node,
                op: self.op_name(node),
                context: String::from("graph evaluation"),
            }),
        }
    }

    /// Recompute every node from the recorded leaves.
    pub fn replay(&self) -> Vec<Array2<f64>> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf => (*node.value).clone(),
                ref op => compute(op, |i| &values[i]),
            };
            values.push(v);
        }
        values
    }

    fn push(&self, value: Array2<f64>, op: Op) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if self.first_non_finite.get().is_none() && !value.iter().all(|x| x.is_finite()) {
            self.first_non_finite.set(Some(id));
        }
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        id
    }

    fn apply(&self, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            compute(&op, |i| &*nodes[i].value)
        };
        let id = self.push(value, op);
        Var { graph: self, id }
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes.borrow()[id].value.dim()
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned gradients are graph nodes and can be differentiated again.
    /// `None` means the variable does not influence `output`.
    pub fn grad<'g>(&'g self, output: Var<'g>, wrt: &[Var<'g>]) -> Vec<Option<Var<'g>>> {
        assert_eq!(
            self.shape(output.id),
            (1, 1),
            "gradients are defined for scalar outputs only"
        );
        let n = output.id + 1;
        let mut needs = vec![false; n];
        for w in wrt {
            if w.id < n {
                needs[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..n {
                if !needs[i] {
                    needs[i] = nodes[i].op.inputs().iter().flatten().any(|&j| needs[j]);
                }
            }
        }
        let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
        if needs[output.id] {
            adjoint[output.id] = Some(self.scalar(1.0).id);
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !needs[i] {
                continue;
            }
            let op = self.nodes.borrow()[i].op.clone();
            self.backprop(i, &op, self.var(g), &needs, &mut adjoint);
        }
        wrt.iter()
            .map(|w| adjoint.get(w.id).copied().flatten().map(|id| self.var(id)))
            .collect()
    }

    fn backprop<'g>(
        &'g self,
        out: NodeId,
        op: &Op,
        g: Var<'g>,
        needs: &[bool],
        adjoint: &mut [Option<NodeId>],
    ) {
        let mut acc = |input: NodeId, contribution: &dyn Fn() -> Var<'g>| {
            if !needs[input] {
                return;
            }
            let c = contribution();
            adjoint[input] = Some(match adjoint[input] {
                None => c.id,
                Some(prev) => (self.var(prev) + c).id,
            });
        };
        let v = |id| self.var(id);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &|| g);
                acc(b, &|| g);
            }
            Op::Sub(a, b) => {
                acc(a, &|| g);
                acc(b, &|| -g);
            }
            Op::Mul(a, b) => {
                acc(a, &|| g * v(b));
                acc(b, &|| g * v(a));
            }
            Op::Neg(a) => acc(a, &|| -g),
            Op::Scale(a, c) => acc(a, &|| g.scale(c)),
            Op::AddScalar(a, _) => acc(a, &|| g),
            Op::MatMul(a, b) => {
                acc(a, &|| g.matmul(v(b).t()));
                acc(b, &|| v(a).t().matmul(g));
            }
            Op::Transpose(a) => acc(a, &|| g.t()),
            Op::BroadcastRows(a, _) => acc(a, &|| g.sum_rows()),
            Op::BroadcastCols(a, _) => acc(a, &|| g.sum_cols()),
            Op::BroadcastScalar(a, _) => acc(a, &|| g.sum()),
            Op::SumRows(a) => {
                let n = self.shape(a).0;
                acc(a, &|| g.broadcast_rows(n));
            }
            Op::SumCols(a) => {
                let m = self.shape(a).1;
                acc(a, &|| g.broadcast_cols(m));
            }
            Op::SumAll(a) => {
                let shape = self.shape(a);
                acc(a, &|| g.expand(shape));
            }
            Op::Exp(a) => acc(a, &|| g * v(out)),
            Op::Log(a) => acc(a, &|| g * v(a).recip()),
            Op::Sqrt(a) => acc(a, &|| (g * v(out).recip()).scale(0.5)),
            Op::Recip(a) => acc(a, &|| -(g * v(out) * v(out))),
            Op::Relu(a) => {
                let mask = self.value(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = Rc::new(mask);
                acc(a, &|| g.mask_mul(Rc::clone(&mask)));
            }
            Op::MaskMul(a, ref mask) => acc(a, &|| g.mask_mul(Rc::clone(mask))),
            Op::GatherRows(a, ref idx) => {
                let n = self.shape(a).0;
                acc(a, &|| g.scatter_rows(Rc::clone(idx), n));
            }
            Op::ScatterRows(a, ref idx, _) => acc(a, &|| g.gather_rows(Rc::clone(idx))),
            Op::GatherElems(a, ref idx) => {
                let cols = self.shape(a).1;
                acc(a, &|| g.scatter_elems(Rc::clone(idx), cols));
            }
            Op::ScatterElems(a, ref idx, _) => acc(a, &|| g.gather_elems(Rc::clone(idx))),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<'g> Var<'g> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn value(self) -> Rc<Array2<f64>> {
        self.graph.value(self.id)
    }

    pub fn shape(self) -> (usize, usize) {
        self.graph.shape(self.id)
    }

    pub fn rows(self) -> usize {
        self.shape().0
    }

    pub fn cols(self) -> usize {
        self.shape().1
    }

    /// Value of a `[1, 1]` node.
    pub fn item(self) -> f64 {
        let v = self.value();
        assert_eq!(v.dim(), (1, 1), "item() needs a scalar node");
        v[[0, 0]]
    }

    /// A new leaf holding this node's value, cut off from its history.
    pub fn detach(self) -> Var<'g> {
        self.graph.leaf((*self.value()).clone())
    }

    fn same_shape(self, other: Var<'g>, what: &str) {
        debug_assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch");
    }

    pub fn matmul(self, rhs: Var<'g>) -> Var<'g> {
        assert_eq!(self.cols(), rhs.rows(), "matmul: inner dimensions differ");
        self.graph.apply(Op::MatMul(self.id, rhs.id))
    }

    pub fn t(self) -> Var<'g> {
        self.graph.apply(Op::Transpose(self.id))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        self.graph.apply(Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.graph.apply(Op::AddScalar(self.id, c))
    }

    pub fn sum(self) -> Var<'g> {
        self.graph.apply(Op::SumAll(self.id))
    }

    pub fn sum_rows(self) -> Var<'g> {
        self.graph.apply(Op::SumRows(self.id))
    }

    pub fn sum_cols(self) -> Var<'g> {
        self.graph.apply(Op::SumCols(self.id))
    }

    /// Column means as a `[1, m]` row.
    pub fn mean_rows(self) -> Var<'g> {
        let n = self.rows() as f64;
        self.sum_rows().scale(1.0 / n)
    }

    /// Row means as an `[n, 1]` column.
    pub fn mean_cols(self) -> Var<'g> {
        let m = self.cols() as f64;
        self.sum_cols().scale(1.0 / m)
    }

    pub fn broadcast_rows(self, n: usize) -> Var<'g> {
        assert_eq!(self.rows(), 1, "broadcast_rows needs a single row");
        self.graph.apply(Op::BroadcastRows(self.id, n))
    }

    pub fn broadcast_cols(self, m: usize) -> Var<'g> {
        assert_eq!(self.cols(), 1, "broadcast_cols needs a single column");
        self.graph.apply(Op::BroadcastCols(self.id, m))
    }

    pub fn expand(self, shape: (usize, usize)) -> Var<'g> {
        assert_eq!(self.shape(), (1, 1), "expand needs a scalar");
        self.graph.apply(Op::BroadcastScalar(self.id, shape))
    }

    /// Add a `[1, m]` row to every row.
    pub fn add_row(self, row: Var<'g>) -> Var<'g> {
        self + row.broadcast_rows(self.rows())
    }

    /// Multiply every row elementwise by a `[1, m]` row.
    pub fn mul_row(self, row: Var<'g>) -> Var<'g> {
        self * row.broadcast_rows(self.rows())
    }

    pub fn exp(self) -> Var<'g> {
        self.graph.apply(Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'g> {
        self.graph.apply(Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        self.graph.apply(Op::Sqrt(self.id))
    }

    pub fn recip(self) -> Var<'g> {
        self.graph.apply(Op::Recip(self.id))
    }

    pub fn relu(self) -> Var<'g> {
        self.graph.apply(Op::Relu(self.id))
    }

    pub fn square(self) -> Var<'g> {
        self * self
    }

    pub fn mask_mul(self, mask: Rc<Array2<f64>>) -> Var<'g> {
        assert_eq!(self.shape(), mask.dim(), "mask_mul: shape mismatch");
        self.graph.apply(Op::MaskMul(self.id, mask))
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(self, idx: Indices) -> Var<'g> {
        let n = self.rows();
        assert!(
            idx.iter().all(|&i| i < n),
            "gather_rows: index out of range"
        );
        self.graph.apply(Op::GatherRows(self.id, idx))
    }

    /// Sum row `k` into row `idx[k]` of an `n`-row zero matrix.
    pub fn scatter_rows(self, idx: Indices, n: usize) -> Var<'g> {
        assert_eq!(idx.len(), self.rows(), "scatter_rows: index count");
        assert!(
            idx.iter().all(|&i| i < n),
            "scatter_rows: index out of range"
        );
        self.graph.apply(Op::ScatterRows(self.id, idx, n))
    }

    /// Pick one entry per row: `out[r] = self[r, idx[r]]`.
    pub fn gather_elems(self, idx: Indices) -> Var<'g> {
        assert_eq!(idx.len(), self.rows(), "gather_elems: index count");
        let m = self.cols();
        assert!(
            idx.iter().all(|&i| i < m),
            "gather_elems: index out of range"
        );
        self.graph.apply(Op::GatherElems(self.id, idx))
    }

    pub fn scatter_elems(self, idx: Indices, cols: usize) -> Var<'g> {
        assert_eq!(self.cols(), 1, "scatter_elems needs a column");
        assert_eq!(idx.len(), self.rows(), "scatter_elems: index count");
        assert!(
            idx.iter().all(|&i| i < cols),
            "scatter_elems: index out of range"
        );
        self.graph.apply(Op::ScatterElems(self.id, idx, cols))
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.same_shape(rhs, "add");
        self.graph.apply(Op::Add(self.id, rhs.id))
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.same_shape(rhs, "sub");
        self.graph.apply(Op::Sub(self.id, rhs.id))
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.same_shape(rhs, "mul");
        self.graph.apply(Op::Mul(self.id, rhs.id))
    }
}

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.graph.apply(Op::Neg(self.id))
    }
}
