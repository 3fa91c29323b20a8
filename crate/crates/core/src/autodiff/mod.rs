//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation whose inputs include at least one
//! variable. Operations on constants are evaluated eagerly and leave no trace,
//! so running a model with constant parameters doesn't build a graph.
//!
//! ```
//! use gvi_abm::autodiff::{DualTensor, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(vec![], vec![2.0]).unwrap();
//! let y = tape.var(vec![], vec![3.0]).unwrap();
//! let loss = tape.mul(&x, &y).unwrap();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&x), vec![3.0]);
//! assert_eq!(grads.wrt(&y), vec![2.0]);
//! # let _ = DualTensor::scalar(1.0);
//! ```

mod check;
mod ops;

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use check::{grad_check, grad_check_coords};
pub use ops::{sigmoid, softplus};

/// Row-major `c = a · b` for `[m, k]` by `[k, n]` slices.
pub(crate) fn matmul_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    ops::gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c);
}

pub type NodeId = usize;

/// Dense row-major array that may be attached to a [`Tape`].
///
/// Constants carry no node id and never receive adjoints.
#[derive(Clone, Debug)]
pub struct DualTensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl DualTensor {
    pub fn constant(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        check_len("constant", &shape, values.len())?;
        Ok(DualTensor {
            shape,
            values: Arc::new(values),
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        DualTensor {
            shape: vec![],
            values: Arc::new(vec![value]),
            node: None,
        }
    }

    /// One-dimensional constant.
    pub fn vector(values: Vec<f64>) -> Self {
        DualTensor {
            shape: vec![values.len()],
            values: Arc::new(values),
            node: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DualTensor {
            shape,
            values: Arc::new(vec![0.0; n]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_constant(&self) -> bool {
        self.node.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> DualTensor {
        DualTensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
        }
    }

    fn operand(&self) -> Operand {
        Operand {
            node: self.node,
            values: Arc::clone(&self.values),
        }
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::Shape {
            op,
            detail: format!("shape {shape:?} needs {expected} values, got {len}"),
        });
    }
    Ok(())
}

/// An op input: its node (if any) plus the forward values needed by backward.
#[derive(Clone, Debug)]
struct Operand {
    node: Option<NodeId>,
    values: Arc<Vec<f64>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Operand, Operand),
    Sub(Operand, Operand),
    Mul(Operand, Operand),
    Div {
        num: Operand,
        den: Operand,
        out: Arc<Vec<f64>>,
    },
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    PowScalar(Operand, f64),
    Exp(NodeId, Arc<Vec<f64>>),
    Log(Operand),
    Sigmoid(NodeId, Arc<Vec<f64>>),
    Softplus(Operand),
    Tanh(NodeId, Arc<Vec<f64>>),
    ClampMin(Operand, f64),
    Sum(NodeId),
    Mean(NodeId, usize),
    Matmul {
        a: Operand,
        b: Operand,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Option<NodeId>,
        bias: Option<NodeId>,
        cols: usize,
    },
    SegmentSum(NodeId, Arc<Vec<usize>>),
    IndexSelect {
        input: NodeId,
        input_len: usize,
        index: Arc<Vec<usize>>,
    },
    Concat(Vec<(Option<NodeId>, usize)>),
    Reshape(NodeId),
    StraightThrough(NodeId),
    Splice(NodeId, Arc<Vec<f64>>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    len: usize,
}

/// Dynamic record of differentiable operations, built per forward pass.
///
/// Single-threaded by construction (`!Sync`); independent tapes can live on
/// different threads.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// New leaf variable.
    pub fn var(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<DualTensor> {
        check_len("var", &shape, values.len())?;
        Ok(self.push(Op::Leaf, shape, values))
    }

    /// Leaf variable with the values of `t` (constant or not).
    pub fn leaf(&self, t: &DualTensor) -> DualTensor {
        let node = self.record(Op::Leaf, t.len());
        DualTensor {
            shape: t.shape.clone(),
            values: Arc::clone(&t.values),
            node: Some(node),
        }
    }

    fn record(&self, op: Op, len: usize) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, len });
        nodes.len() - 1
    }

    fn push(&self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> DualTensor {
        let node = self.record(op, values.len());
        DualTensor {
            shape,
            values: Arc::new(values),
            node: Some(node),
        }
    }

    fn push_shared(&self, op: Op, shape: Vec<usize>, values: Arc<Vec<f64>>) -> DualTensor {
        let node = self.record(op, values.len());
        DualTensor {
            shape,
            values,
            node: Some(node),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: &DualTensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        let Some(root) = loss.node else {
            return Ok(Gradients { adjoints: adj });
        };
        adj[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(g) = adj[id].take() else { continue };
            backprop(&nodes[id].op, &g, &nodes, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, f: impl Fn(usize) -> f64) {
    let slot = adj[id].get_or_insert_with(|| vec![0.0; nodes[id].len]);
    for (i, a) in slot.iter_mut().enumerate() {
        *a += f(i);
    }
}

/// Adjoint contribution of an elementwise binary op to one operand, summing
/// when that operand was a broadcast scalar.
fn accumulate_broadcast(
    adj: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: NodeId,
    out_len: usize,
    local: impl Fn(usize) -> f64,
) {
    if nodes[id].len == 1 && out_len > 1 {
        let total: f64 = (0..out_len).map(&local).sum();
        accumulate(adj, nodes, id, |_| total);
    } else {
        accumulate(adj, nodes, id, local);
    }
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn backprop(op: &Op, g: &[f64], nodes: &[Node], adj: &mut [Option<Vec<f64>>]) {
    let n = g.len();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(id) = a.node {
                accumulate_broadcast(adj, nodes, id, n, |i| g[i]);
            }
            if let Some(id) = b.node {
                accumulate_broadcast(adj, nodes, id, n, |i| g[i]);
            }
        }
        Op::Sub(a, b) => {
            if let Some(id) = a.node {
                accumulate_broadcast(adj, nodes, id, n, |i| g[i]);
            }
            if let Some(id) = b.node {
                accumulate_broadcast(adj, nodes, id, n, |i| -g[i]);
            }
        }
        Op::Mul(a, b) => {
            if let Some(id) = a.node {
                accumulate_broadcast(adj, nodes, id, n, |i| g[i] * at(&b.values, i));
            }
            if let Some(id) = b.node {
                accumulate_broadcast(adj, nodes, id, n, |i| g[i] * at(&a.values, i));
            }
        }
        Op::Div { num, den, out } => {
            if let Some(id) = num.node {
                accumulate_broadcast(adj, nodes, id, n, |i| g[i] / at(&den.values, i));
            }
            if let Some(id) = den.node {
                accumulate_broadcast(adj, nodes, id, n, |i| -g[i] * out[i] / at(&den.values, i));
            }
        }
        Op::Neg(id) => accumulate(adj, nodes, *id, |i| -g[i]),
        Op::AddScalar(id) | Op::Reshape(id) | Op::StraightThrough(id) => {
            accumulate(adj, nodes, *id, |i| g[i])
        }
        Op::MulScalar(id, c) => accumulate(adj, nodes, *id, |i| g[i] * c),
        Op::PowScalar(x, p) => {
            let id = x.node.expect("recorded op has a node");
            accumulate(adj, nodes, id, |i| g[i] * p * x.values[i].powf(p - 1.0))
        }
        Op::Exp(id, out) => accumulate(adj, nodes, *id, |i| g[i] * out[i]),
        Op::Log(x) => {
            let id = x.node.expect("recorded op has a node");
            accumulate(adj, nodes, id, |i| g[i] / x.values[i])
        }
        Op::Sigmoid(id, out) => accumulate(adj, nodes, *id, |i| g[i] * out[i] * (1.0 - out[i])),
        Op::Softplus(x) => {
            let id = x.node.expect("recorded op has a node");
            accumulate(adj, nodes, id, |i| g[i] * ops::sigmoid(x.values[i]))
        }
        Op::Tanh(id, out) => accumulate(adj, nodes, *id, |i| g[i] * (1.0 - out[i] * out[i])),
        Op::ClampMin(x, lo) => {
            let id = x.node.expect("recorded op has a node");
            accumulate(adj, nodes, id, |i| if x.values[i] > *lo { g[i] } else { 0.0 })
        }
        Op::Sum(id) => accumulate(adj, nodes, *id, |_| g[0]),
        Op::Mean(id, len) => {
            let scale = g[0] / *len as f64;
            accumulate(adj, nodes, *id, |_| scale)
        }
        Op::Matmul { a, b, m, k, n: cols } => {
            let (m, k, cols) = (*m, *k, *cols);
            if let Some(id) = a.node {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                ops::gemm(m, cols, k, g, (cols as isize, 1), &b.values, (1, cols as isize), &mut da);
                accumulate(adj, nodes, id, |i| da[i]);
            }
            if let Some(id) = b.node {
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * cols];
                ops::gemm(k, m, cols, &a.values, (1, k as isize), g, (cols as isize, 1), &mut db);
                accumulate(adj, nodes, id, |i| db[i]);
            }
        }
        Op::AddBias { x, bias, cols } => {
            if let Some(id) = x {
                accumulate(adj, nodes, *id, |i| g[i]);
            }
            if let Some(id) = bias {
                let mut col_sums = vec![0.0; *cols];
                for row in g.chunks_exact(*cols) {
                    for (s, v) in col_sums.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                accumulate(adj, nodes, *id, |j| col_sums[j]);
            }
        }
        Op::SegmentSum(id, groups) => accumulate(adj, nodes, *id, |i| g[groups[i]]),
        Op::IndexSelect {
            input,
            input_len,
            index,
        } => {
            let mut scattered = vec![0.0; *input_len];
            for (j, &src) in index.iter().enumerate() {
                scattered[src] += g[j];
            }
            accumulate(adj, nodes, *input, |i| scattered[i]);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &(node, len) in parts {
                if let Some(id) = node {
                    accumulate(adj, nodes, id, |i| g[offset + i]);
                }
                offset += len;
            }
        }
        Op::Splice(id, grad) => accumulate(adj, nodes, *id, |i| g[0] * grad[i]),
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `t`, or `None` for constants and nodes the loss never reached.
    pub fn get(&self, t: &DualTensor) -> Option<&[f64]> {
        t.node
            .and_then(|id| self.adjoints.get(id))
            .and_then(|a| a.as_deref())
    }

    /// Adjoint of `t` with zeros where nothing was accumulated.
    pub fn wrt(&self, t: &DualTensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.len()])
    }
}
