//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] owns every tensor of a computation as a node in an
//! append-only arena; a [`Value`] is just the index of a node. Recording
//! an operation pushes one node whose operands all have smaller indices,
//! so the arena order *is* a topological order and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! Two node classes exist:
//!
//! * **persistent** nodes (created with [`Tape::persistent`] before any
//!   other node) hold trainable parameters and survive [`Tape::reset`];
//! * **transient** nodes (constants and op results) are truncated by
//!   `reset`, which is called once per training/inference step.
//!
//! The op set is deliberately small: elementwise arithmetic, (batched)
//! matrix product, full reductions, a handful of nonlinearities including
//! the trigonometric pair needed by axis-angle rotations, `concat`,
//! `slice`, `broadcast` and a zero-cost `reshape`. `div` and `log` clamp
//! their denominators/inputs at [`CLAMP_EPS`] and propagate zero gradient
//! from the clamped region, so a forward pass never manufactures an
//! infinity on its own.
//!
//! Gradient correctness of every op — and of every composite built from
//! them — is certified by [`gradient_check`], a central-difference probe
//! used both by unit tests and by the `grad-check` CLI command.

use ndarray::{ArrayD, Axis, IxDyn, Zip};
use std::collections::HashMap;

use crate::error::{Error, Result};

/// Inputs to `div` and `log` are clamped to this magnitude; the clamped
/// region contributes zero gradient.
pub const CLAMP_EPS: f64 = 1e-12;

/// Handle to a tape node. Plain index, freely copyable; only meaningful
/// together with the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(usize);

impl Value {
    /// Raw node index (stable for persistent nodes across resets).
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds accepted by [`Tape::record`]. The structural ops
/// (`concat`, `slice`, `broadcast`, `reshape`) carry extra parameters and
/// have dedicated methods instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sum,
    Mean,
    Exp,
    Log,
    Tanh,
    Relu,
    Square,
    Sin,
    Cos,
    Sqrt,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Sum(usize),
    Mean(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Sin(usize),
    Cos(usize),
    Sqrt(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Broadcast { src: usize },
    Reshape { src: usize },
}

struct Node {
    data: ArrayD<f64>,
    op: Op,
}

/// Append-only computation arena with a reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
    n_persistent: usize,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn clamp_signed(x: f64) -> f64 {
    if x.abs() >= CLAMP_EPS {
        x
    } else if x >= 0.0 {
        CLAMP_EPS
    } else {
        -CLAMP_EPS
    }
}

/// Owned reshape that tolerates any input layout.
fn reshape_owned(a: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(shape))
        .expect("element count checked by caller")
}

/// Plain or batched matrix product; shapes validated by the caller.
fn matmul_data(x: &ArrayD<f64>, y: &ArrayD<f64>) -> ArrayD<f64> {
    if x.ndim() == 2 {
        let a = x.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = y.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        a.dot(&b).into_dyn()
    } else {
        let a = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let b = y.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (n, m, k) = (a.shape()[0], a.shape()[1], b.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((n, m, k));
        for i in 0..n {
            out.index_axis_mut(Axis(0), i)
                .assign(&a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i)));
        }
        out.into_dyn()
    }
}

/// Forward value of one op from its parents. This is the single
/// definition of every op's arithmetic: recording calls it to fill a
/// new node, [`Tape::replay_from`] calls it to refresh an existing one,
/// so the two can never drift apart. `out_shape` carries the target
/// shape for the structural ops (slice extent, broadcast/reshape
/// target); it is the node's own shape, which replay never changes.
fn eval_op(op: &Op, nodes: &[Node], out_shape: &[usize]) -> ArrayD<f64> {
    match op {
        Op::Leaf => unreachable!("leaves hold data, they are not computed"),
        Op::Add(a, b) => &nodes[*a].data + &nodes[*b].data,
        Op::Sub(a, b) => &nodes[*a].data - &nodes[*b].data,
        Op::Mul(a, b) => &nodes[*a].data * &nodes[*b].data,
        Op::Div(a, b) => Zip::from(&nodes[*a].data)
            .and(&nodes[*b].data)
            .map_collect(|&x, &y| x / clamp_signed(y)),
        Op::MatMul(a, b) => matmul_data(&nodes[*a].data, &nodes[*b].data),
        Op::Sum(a) => ArrayD::from_elem(IxDyn(&[]), nodes[*a].data.sum()),
        Op::Mean(a) => {
            let d = &nodes[*a].data;
            ArrayD::from_elem(IxDyn(&[]), d.sum() / d.len().max(1) as f64)
        }
        Op::Exp(a) => nodes[*a].data.mapv(f64::exp),
        Op::Log(a) => nodes[*a].data.mapv(|x| x.max(CLAMP_EPS).ln()),
        Op::Tanh(a) => nodes[*a].data.mapv(f64::tanh),
        Op::Relu(a) => nodes[*a].data.mapv(|x| x.max(0.0)),
        Op::Square(a) => nodes[*a].data.mapv(|x| x * x),
        Op::Sin(a) => nodes[*a].data.mapv(f64::sin),
        Op::Cos(a) => nodes[*a].data.mapv(f64::cos),
        Op::Sqrt(a) => nodes[*a].data.mapv(|x| x.max(0.0).sqrt()),
        Op::Concat { parts, axis } => {
            let views: Vec<_> = parts.iter().map(|&p| nodes[p].data.view()).collect();
            ndarray::concatenate(Axis(*axis), &views).expect("validated when recorded")
        }
        Op::Slice { src, axis, start } => {
            let len = out_shape[*axis];
            nodes[*src]
                .data
                .slice_axis(Axis(*axis), ndarray::Slice::from(*start..*start + len))
                .to_owned()
        }
        Op::Broadcast { src } => nodes[*src]
            .data
            .broadcast(IxDyn(out_shape))
            .expect("validated when recorded")
            .to_owned(),
        Op::Reshape { src } => reshape_owned(&nodes[*src].data, out_shape),
    }
}

/// Calls `f` with each parent index of `op`.
fn visit_parents(op: &Op, mut f: impl FnMut(usize)) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
            f(*a);
            f(*b);
        }
        Op::Sum(a)
        | Op::Mean(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Tanh(a)
        | Op::Relu(a)
        | Op::Square(a)
        | Op::Sin(a)
        | Op::Cos(a)
        | Op::Sqrt(a) => f(*a),
        Op::Concat { parts, .. } => parts.iter().copied().for_each(f),
        Op::Slice { src, .. } | Op::Broadcast { src } | Op::Reshape { src } => f(*src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            n_persistent: 0,
            backward_done: false,
        }
    }

    /// Number of live nodes (persistent + transient).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of persistent (parameter) nodes.
    pub fn n_persistent(&self) -> usize {
        self.n_persistent
    }

    /// Creates a persistent leaf. Must be called before any transient
    /// node exists; persistent nodes survive [`Tape::reset`].
    ///
    /// # Panics
    /// If transient nodes have already been recorded.
    pub fn persistent(&mut self, data: ArrayD<f64>) -> Value {
        assert!(
            self.nodes.len() == self.n_persistent,
            "persistent nodes must be created before any transient node \
             ({} transient nodes already live)",
            self.nodes.len() - self.n_persistent
        );
        self.nodes.push(Node { data, op: Op::Leaf });
        self.grads.push(None);
        self.n_persistent += 1;
        Value(self.nodes.len() - 1)
    }

    /// Creates a transient leaf (an input or constant for this step).
    pub fn constant(&mut self, data: ArrayD<f64>) -> Value {
        self.push(data, Op::Leaf)
    }

    /// Transient 0-d scalar leaf.
    pub fn scalar(&mut self, x: f64) -> Value {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    /// Borrow a node's forward data.
    pub fn data(&self, v: Value) -> &ArrayD<f64> {
        &self.nodes[v.0].data
    }

    /// Borrow a node's gradient, if backward reached it.
    pub fn grad(&self, v: Value) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Overwrites a leaf's data in place (parameter updates, probes).
    ///
    /// # Panics
    /// If the node is not a leaf or the shape changes.
    pub fn set_data(&mut self, v: Value, data: ArrayD<f64>) {
        assert!(
            matches!(self.nodes[v.0].op, Op::Leaf),
            "set_data is only valid on leaf nodes"
        );
        assert_eq!(
            self.nodes[v.0].data.shape(),
            data.shape(),
            "set_data must preserve the shape"
        );
        self.nodes[v.0].data = data;
    }

    /// Overwrites one flat element of a leaf (finite-difference probes).
    ///
    /// # Panics
    /// If the node is not a leaf.
    pub fn set_element(&mut self, v: Value, idx: usize, x: f64) {
        assert!(
            matches!(self.nodes[v.0].op, Op::Leaf),
            "set_element is only valid on leaf nodes"
        );
        let flat = self.nodes[v.0]
            .data
            .as_slice_mut()
            .expect("leaf arrays are contiguous");
        flat[idx] = x;
    }

    /// Recomputes, in place, the forward value of every node that
    /// (transitively) depends on `leaf`, after its data changed. The
    /// graph itself — node count, ops, shapes — is untouched, so this
    /// is much cheaper than re-recording the computation, and nodes
    /// outside the leaf's dependency cone are skipped entirely.
    /// Gradients are not touched. Returns how many nodes were
    /// recomputed.
    ///
    /// # Panics
    /// If `leaf` is not a leaf node.
    pub fn replay_from(&mut self, leaf: Value) -> usize {
        assert!(
            matches!(self.nodes[leaf.0].op, Op::Leaf),
            "replay starts at a leaf whose data changed"
        );
        let n = self.nodes.len();
        let mut dirty = vec![false; n];
        dirty[leaf.0] = true;
        let mut recomputed = 0;
        for i in leaf.0 + 1..n {
            // Parents always precede their node in the arena.
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let mut touched = false;
            visit_parents(&node.op, |p| touched |= dirty[p]);
            if !touched {
                continue;
            }
            node.data = eval_op(&node.op, head, node.data.shape());
            dirty[i] = true;
            recomputed += 1;
        }
        recomputed
    }

    /// Drops every transient node and all gradients; persistent nodes
    /// keep their data. Call between steps.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.n_persistent);
        self.grads.truncate(self.n_persistent);
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, data: ArrayD<f64>, op: Op) -> Value {
        debug_assert!(
            data.iter().all(|x| x.is_finite()) || true,
            "op produced non-finite data"
        );
        self.nodes.push(Node { data, op });
        self.grads.push(None);
        Value(self.nodes.len() - 1)
    }

    fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].data.shape()
    }

    // ---- op recording -------------------------------------------------

    /// Records one non-structural op through a uniform dispatcher.
    /// Shape mismatches come back as [`Error::Shape`] with both shapes in
    /// the message; the dedicated methods below panic with the same text.
    pub fn record(&mut self, kind: OpKind, operands: &[Value]) -> Result<Value> {
        let need = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
            _ => 1,
        };
        if operands.len() != need {
            return Err(Error::Shape {
                op: op_name(kind),
                detail: format!("expected {need} operands, got {}", operands.len()),
            });
        }
        match kind {
            OpKind::Add => self.try_binary_ew(kind, operands[0], operands[1]),
            OpKind::Sub => self.try_binary_ew(kind, operands[0], operands[1]),
            OpKind::Mul => self.try_binary_ew(kind, operands[0], operands[1]),
            OpKind::Div => self.try_binary_ew(kind, operands[0], operands[1]),
            OpKind::MatMul => self.try_matmul(operands[0], operands[1]),
            _ => Ok(self.unary(kind, operands[0])),
        }
    }

    fn try_binary_ew(&mut self, kind: OpKind, a: Value, b: Value) -> Result<Value> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: op_name(kind),
                detail: format!(
                    "elementwise operands must match: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            });
        }
        let op = match kind {
            OpKind::Add => Op::Add(a.0, b.0),
            OpKind::Sub => Op::Sub(a.0, b.0),
            OpKind::Mul => Op::Mul(a.0, b.0),
            OpKind::Div => Op::Div(a.0, b.0),
            _ => unreachable!(),
        };
        let data = eval_op(&op, &self.nodes, &[]);
        Ok(self.push(data, op))
    }

    /// Elementwise sum; shapes must match exactly (broadcast explicitly).
    pub fn add(&mut self, a: Value, b: Value) -> Value {
        self.try_binary_ew(OpKind::Add, a, b).unwrap_or_else(die)
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Value {
        self.try_binary_ew(OpKind::Sub, a, b).unwrap_or_else(die)
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Value {
        self.try_binary_ew(OpKind::Mul, a, b).unwrap_or_else(die)
    }

    /// Elementwise quotient. Denominators are clamped to at least
    /// [`CLAMP_EPS`] in magnitude; where the clamp is active the
    /// denominator receives zero gradient.
    pub fn div(&mut self, a: Value, b: Value) -> Value {
        self.try_binary_ew(OpKind::Div, a, b).unwrap_or_else(die)
    }

    fn try_matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Shape {
            op: "matmul",
            detail: format!("cannot multiply {sa:?} by {sb:?}"),
        };
        match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => {}
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => {}
            _ => return Err(err()),
        }
        let op = Op::MatMul(a.0, b.0);
        let data = eval_op(&op, &self.nodes, &[]);
        Ok(self.push(data, op))
    }

    /// Matrix product: `[m,k]·[k,n]`, or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Value {
        self.try_matmul(a, b).unwrap_or_else(die)
    }

    fn unary(&mut self, kind: OpKind, a: Value) -> Value {
        let op = match kind {
            OpKind::Sum => Op::Sum(a.0),
            OpKind::Mean => Op::Mean(a.0),
            OpKind::Exp => Op::Exp(a.0),
            OpKind::Log => Op::Log(a.0),
            OpKind::Tanh => Op::Tanh(a.0),
            OpKind::Relu => Op::Relu(a.0),
            OpKind::Square => Op::Square(a.0),
            OpKind::Sin => Op::Sin(a.0),
            OpKind::Cos => Op::Cos(a.0),
            OpKind::Sqrt => Op::Sqrt(a.0),
            _ => unreachable!("binary kinds handled elsewhere"),
        };
        let data = eval_op(&op, &self.nodes, &[]);
        self.push(data, op)
    }

    /// Full reduction to a 0-d scalar.
    pub fn sum(&mut self, a: Value) -> Value {
        self.unary(OpKind::Sum, a)
    }

    /// Arithmetic mean over all elements (0-d scalar).
    pub fn mean(&mut self, a: Value) -> Value {
        self.unary(OpKind::Mean, a)
    }

    pub fn exp(&mut self, a: Value) -> Value {
        self.unary(OpKind::Exp, a)
    }

    /// Natural log of `max(x, CLAMP_EPS)`; clamped region has zero
    /// gradient.
    pub fn log(&mut self, a: Value) -> Value {
        self.unary(OpKind::Log, a)
    }

    pub fn tanh(&mut self, a: Value) -> Value {
        self.unary(OpKind::Tanh, a)
    }

    pub fn relu(&mut self, a: Value) -> Value {
        self.unary(OpKind::Relu, a)
    }

    pub fn square(&mut self, a: Value) -> Value {
        self.unary(OpKind::Square, a)
    }

    pub fn sin(&mut self, a: Value) -> Value {
        self.unary(OpKind::Sin, a)
    }

    pub fn cos(&mut self, a: Value) -> Value {
        self.unary(OpKind::Cos, a)
    }

    /// `sqrt(max(x, 0))`; negative inputs map to 0 with zero gradient.
    /// Feed `x + eps` when the argument can reach exact zero.
    pub fn sqrt(&mut self, a: Value) -> Value {
        self.unary(OpKind::Sqrt, a)
    }

    /// Concatenates along `axis`; all other dims must match.
    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Value {
        assert!(!parts.is_empty(), "concat needs at least one operand");
        let first = self.shape(parts[0]).to_vec();
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            assert!(
                compatible,
                "shape mismatch in concat: {s:?} vs {first:?} along axis {axis}"
            );
        }
        let ids = parts.iter().map(|p| p.0).collect();
        let op = Op::Concat { parts: ids, axis };
        let data = eval_op(&op, &self.nodes, &[]);
        self.push(data, op)
    }

    /// Contiguous half-open range `[start, end)` along one axis.
    pub fn slice(&mut self, src: Value, axis: usize, start: usize, end: usize) -> Value {
        let s = self.shape(src);
        assert!(
            axis < s.len() && start < end && end <= s[axis],
            "shape mismatch in slice: range {start}..{end} on axis {axis} of {s:?}"
        );
        let mut out_shape = s.to_vec();
        out_shape[axis] = end - start;
        let op = Op::Slice {
            src: src.0,
            axis,
            start,
        };
        let data = eval_op(&op, &self.nodes, &out_shape);
        self.push(data, op)
    }

    /// Broadcast to `target` shape with trailing-axis alignment (missing
    /// leading axes are added; size-1 axes expand). The gradient sums
    /// back over the expanded axes.
    pub fn broadcast_to(&mut self, src: Value, target: &[usize]) -> Value {
        assert!(
            self.nodes[src.0].data.broadcast(IxDyn(target)).is_some(),
            "shape mismatch in broadcast: {:?} cannot expand to {target:?}",
            self.shape(src)
        );
        let op = Op::Broadcast { src: src.0 };
        let data = eval_op(&op, &self.nodes, target);
        self.push(data, op)
    }

    /// Reinterprets the buffer with a new shape (same element count).
    pub fn reshape(&mut self, src: Value, shape: &[usize]) -> Value {
        let n: usize = shape.iter().product();
        assert_eq!(
            self.nodes[src.0].data.len(),
            n,
            "shape mismatch in reshape: {:?} has {} elements, target {shape:?} has {n}",
            self.shape(src),
            self.nodes[src.0].data.len(),
        );
        let op = Op::Reshape { src: src.0 };
        let data = eval_op(&op, &self.nodes, shape);
        self.push(data, op)
    }

    // ---- reverse sweep -------------------------------------------------

    /// Runs the reverse sweep from a 0-d `root`, accumulating gradients
    /// into every node that contributed to it. Calling it a second time
    /// without [`Tape::reset`] is an error (the graph is consumed).
    pub fn backward(&mut self, root: Value) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward called twice without reset; gradients would double-accumulate".into(),
            ));
        }
        if self.nodes[root.0].data.ndim() != 0 {
            return Err(Error::Tape(format!(
                "backward root must be a 0-d scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.grads[root.0] = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));

        for i in (0..=root.0).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let nodes = &self.nodes;
            let grads = &mut self.grads;
            let acc = |grads: &mut Vec<Option<ArrayD<f64>>>, idx: usize, c: ArrayD<f64>| {
                match &mut grads[idx] {
                    Some(g0) => *g0 += &c,
                    None => grads[idx] = Some(c),
                }
            };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(grads, *a, g.clone());
                    acc(grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(grads, *a, g.clone());
                    acc(grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    acc(grads, *a, &g * &nodes[*b].data);
                    acc(grads, *b, &g * &nodes[*a].data);
                }
                Op::Div(a, b) => {
                    let da = &nodes[*a].data;
                    let db = &nodes[*b].data;
                    let ga = Zip::from(&g).and(db).map_collect(|&gi, &y| gi / clamp_signed(y));
                    let gb = Zip::from(&g).and(da).and(db).map_collect(|&gi, &x, &y| {
                        if y.abs() >= CLAMP_EPS {
                            -gi * x / (y * y)
                        } else {
                            0.0
                        }
                    });
                    acc(grads, *a, ga);
                    acc(grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let da = &nodes[*a].data;
                    let db = &nodes[*b].data;
                    if da.ndim() == 2 {
                        let x = da.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                        let y = db.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                        let gm = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                        acc(grads, *a, gm.dot(&y.t()).into_dyn());
                        acc(grads, *b, x.t().dot(&gm).into_dyn());
                    } else {
                        let x = da.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                        let y = db.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                        let gm = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                        let nb = x.shape()[0];
                        let mut ga = ndarray::Array3::zeros((nb, x.shape()[1], x.shape()[2]));
                        let mut gb = ndarray::Array3::zeros((nb, y.shape()[1], y.shape()[2]));
                        for k in 0..nb {
                            let (xk, yk, gk) = (
                                x.index_axis(Axis(0), k),
                                y.index_axis(Axis(0), k),
                                gm.index_axis(Axis(0), k),
                            );
                            ga.index_axis_mut(Axis(0), k).assign(&gk.dot(&yk.t()));
                            gb.index_axis_mut(Axis(0), k).assign(&xk.t().dot(&gk));
                        }
                        acc(grads, *a, ga.into_dyn());
                        acc(grads, *b, gb.into_dyn());
                    }
                }
                Op::Sum(a) => {
                    let gv = g[[]];
                    acc(grads, *a, ArrayD::from_elem(nodes[*a].data.raw_dim(), gv));
                }
                Op::Mean(a) => {
                    let n = nodes[*a].data.len().max(1) as f64;
                    let gv = g[[]] / n;
                    acc(grads, *a, ArrayD::from_elem(nodes[*a].data.raw_dim(), gv));
                }
                Op::Exp(a) => acc(grads, *a, &g * &nodes[i].data),
                Op::Log(a) => {
                    let ga = Zip::from(&g).and(&nodes[*a].data).map_collect(|&gi, &x| {
                        if x >= CLAMP_EPS {
                            gi / x
                        } else {
                            0.0
                        }
                    });
                    acc(grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = Zip::from(&g)
                        .and(&nodes[i].data)
                        .map_collect(|&gi, &y| gi * (1.0 - y * y));
                    acc(grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = Zip::from(&g)
                        .and(&nodes[*a].data)
                        .map_collect(|&gi, &x| if x > 0.0 { gi } else { 0.0 });
                    acc(grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = Zip::from(&g)
                        .and(&nodes[*a].data)
                        .map_collect(|&gi, &x| gi * 2.0 * x);
                    acc(grads, *a, ga);
                }
                Op::Sin(a) => {
                    let ga = Zip::from(&g)
                        .and(&nodes[*a].data)
                        .map_collect(|&gi, &x| gi * x.cos());
                    acc(grads, *a, ga);
                }
                Op::Cos(a) => {
                    let ga = Zip::from(&g)
                        .and(&nodes[*a].data)
                        .map_collect(|&gi, &x| -gi * x.sin());
                    acc(grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = Zip::from(&g).and(&nodes[i].data).map_collect(|&gi, &y| {
                        if y > 0.0 {
                            gi * 0.5 / y
                        } else {
                            0.0
                        }
                    });
                    acc(grads, *a, ga);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0usize;
                    let parts = parts.clone();
                    let axis = *axis;
                    for p in parts {
                        let extent = nodes[p].data.shape()[axis];
                        let gp = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + extent))
                            .to_owned();
                        acc(grads, p, gp);
                        offset += extent;
                    }
                }
                Op::Slice { src, axis, start } => {
                    let mut gs = ArrayD::zeros(nodes[*src].data.raw_dim());
                    let extent = nodes[i].data.shape()[*axis];
                    gs.slice_axis_mut(
                        Axis(*axis),
                        ndarray::Slice::from(*start..*start + extent),
                    )
                    .assign(&g);
                    acc(grads, *src, gs);
                }
                Op::Broadcast { src } => {
                    let gs = reduce_to_shape(&g, nodes[*src].data.shape());
                    acc(grads, *src, gs);
                }
                Op::Reshape { src } => {
                    let gs = reshape_owned(&g, nodes[*src].data.shape());
                    acc(grads, *src, gs);
                }
            }
        }
        Ok(())
    }
}

fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Div => "div",
        OpKind::MatMul => "matmul",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
        OpKind::Exp => "exp",
        OpKind::Log => "log",
        OpKind::Tanh => "tanh",
        OpKind::Relu => "relu",
        OpKind::Square => "square",
        OpKind::Sin => "sin",
        OpKind::Cos => "cos",
        OpKind::Sqrt => "sqrt",
    }
}

fn die<T>(e: Error) -> T {
    panic!("{e}")
}

/// Sums `g` down to `src_shape` (inverse of a trailing-aligned broadcast).
fn reduce_to_shape(g: &ArrayD<f64>, src_shape: &[usize]) -> ArrayD<f64> {
    let mut out = g.to_owned();
    while out.ndim() > src_shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..src_shape.len() {
        if src_shape[ax] == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

// ---- optimizer ---------------------------------------------------------

/// Adam with bias correction. Moment buffers are keyed by node index, so
/// one optimizer instance can drive any subset of a tape's persistent
/// nodes; parameters outside the subset passed to [`Adam::step`] are
/// never touched.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: HashMap<usize, ArrayD<f64>>,
    v: HashMap<usize, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update to every listed parameter that received a
    /// gradient. Parameters without a gradient (detached from the loss)
    /// keep their data and moments untouched.
    pub fn step(&mut self, tape: &mut Tape, params: &[Value]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for &p in params {
            let Some(grad) = tape.grad(p).cloned() else {
                continue;
            };
            let m = self
                .m
                .entry(p.index())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *m *= self.beta1;
            *m += &(&grad * (1.0 - self.beta1));
            let v = self
                .v
                .entry(p.index())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            *v *= self.beta2;
            Zip::from(&mut *v).and(&grad).for_each(|vi, &gi| {
                *vi += (1.0 - self.beta2) * gi * gi;
            });
            let mh = &*m / bc1;
            let vh = &*v / bc2;
            let mut data = tape.data(p).clone();
            Zip::from(&mut data).and(&mh).and(&vh).for_each(|d, &mi, &vi| {
                *d -= self.lr * mi / (vi.sqrt() + self.eps);
            });
            tape.set_data(p, data);
        }
    }

    /// Global step count (shared bias-correction clock).
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }

    /// First/second moment buffers for one parameter, if it has ever
    /// been updated.
    pub fn moments(&self, p: Value) -> Option<(&ArrayD<f64>, &ArrayD<f64>)> {
        match (self.m.get(&p.index()), self.v.get(&p.index())) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    pub fn set_moments(&mut self, p: Value, m: ArrayD<f64>, v: ArrayD<f64>) {
        self.m.insert(p.index(), m);
        self.v.insert(p.index(), v);
    }
}

// ---- finite-difference certification ------------------------------------

/// Outcome of a central-difference gradient probe.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst error score over all checked elements. The score is the
    /// relative error `|a-n| / max(|a|,|n|)` where the larger of the two
    /// gradients exceeds 1e-2, and the absolute error rescaled by 100
    /// otherwise — so a single `< 1e-4` threshold expresses both
    /// "relative error below 1e-4" and "absolute error below 1e-6 near
    /// zero".
    pub max_err: f64,
    /// Name of the parameter holding the worst element.
    pub worst_param: String,
    /// Total scalar elements probed.
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_err < 1e-4
    }
}

/// Certifies analytic gradients of an arbitrary scalar-valued program
/// against central differences.
///
/// `build` must record the full forward computation from the tape's
/// persistent nodes and return the scalar root. The harness records it
/// once, runs one backward pass to collect analytic gradients, then
/// perturbs every element of every listed parameter by `±eps` and
/// compares `(f(x+eps) - f(x-eps)) / (2 eps)` against the recorded
/// gradient. Probes recompute values in place via [`Tape::replay_from`]
/// rather than re-recording the graph, so only each parameter's
/// dependency cone is re-evaluated.
pub fn gradient_check<F>(
    tape: &mut Tape,
    params: &[(String, Value)],
    mut build: F,
    eps: f64,
) -> GradCheckReport
where
    F: FnMut(&mut Tape) -> Value,
{
    tape.reset();
    let root = build(tape);
    tape.backward(root).expect("fresh tape accepts backward");
    let analytic: Vec<ArrayD<f64>> = params
        .iter()
        .map(|(_, p)| {
            tape.grad(*p)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(tape.data(*p).raw_dim()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for ((name, p), ana) in params.iter().zip(&analytic) {
        let original = tape.data(*p).clone();
        let flat = original.as_slice().expect("parameters are contiguous");
        for (j, &base) in flat.iter().enumerate() {
            tape.set_element(*p, j, base + eps);
            tape.replay_from(*p);
            let f_plus = tape.data(root)[[]];
            tape.set_element(*p, j, base - eps);
            tape.replay_from(*p);
            let f_minus = tape.data(root)[[]];
            // Exact restore; the next probe's replay refreshes the cone.
            tape.set_element(*p, j, base);
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = ana.as_slice().unwrap()[j];
            let err = (a - numeric).abs();
            let denom = a.abs().max(numeric.abs());
            let score = if denom >= 1e-2 { err / denom } else { err * 100.0 };
            report.checked += 1;
            if score > report.max_err {
                report.max_err = score;
                report.worst_param = name.clone();
            }
        }
        // Leave the tape at the unperturbed point before moving to the
        // next parameter, whose cone may read values this one dirtied.
        tape.replay_from(*p);
    }
    tape.reset();
    report
}
