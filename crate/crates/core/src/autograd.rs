//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so index order is a topological
//! order and [`Graph::backward`] simply walks the node list in reverse.
//! The graph is rebuilt for every training step.
//!
//! Parameters enter the graph through [`Graph::param`], which binds a tensor
//! by storage identity: binding the same tensor twice yields the same leaf,
//! so gradients of shared weights accumulate in one buffer and can be read
//! back with [`Graph::param_grad`].

use std::cell::Cell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{check_finite, gemm, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Rows with a smaller Euclidean norm cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation; used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddRowBias,
    Relu,
    SoftmaxRows,
    L2NormalizeRows,
    LayerNorm,
    MeanRows,
    StackRows,
    ConcatCols,
    SliceCols,
    GatherRows,
    ScatterRows,
    ScaleRows,
    Diag,
    LogSumExp,
    Sum,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 23] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRowBias,
        OpKind::Relu,
        OpKind::SoftmaxRows,
        OpKind::L2NormalizeRows,
        OpKind::LayerNorm,
        OpKind::MeanRows,
        OpKind::StackRows,
        OpKind::ConcatCols,
        OpKind::SliceCols,
        OpKind::GatherRows,
        OpKind::ScatterRows,
        OpKind::ScaleRows,
        OpKind::Diag,
        OpKind::LogSumExp,
        OpKind::Sum,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Relu => "relu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::MeanRows => "mean_pool",
            OpKind::StackRows => "stack_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterRows => "scatter_rows",
            OpKind::ScaleRows => "scale_rows",
            OpKind::Diag => "diag",
            OpKind::LogSumExp => "logsumexp",
            OpKind::Sum => "sum",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<OpKind>> = const { Cell::new(None) };
}

/// Test hook: scale the backward rule of `kind` by 1.5 on this thread.
///
/// Used to confirm that the gradient checker notices a wrong rule.
#[doc(hidden)]
pub fn inject_backward_fault(kind: Option<OpKind>) {
    BACKWARD_FAULT.with(|f| f.set(kind));
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    ScaleRows { x: Var, factors: Vec<f64> },
    Diag(Var),
    LogSumExp(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Relu(_) => OpKind::Relu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::L2NormalizeRows { .. } => OpKind::L2NormalizeRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::StackRows(_) => OpKind::StackRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
            Op::ScaleRows { .. } => OpKind::ScaleRows,
            Op::Diag(_) => OpKind::Diag,
            Op::LogSumExp(_) => OpKind::LogSumExp,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRowBias(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::SoftmaxRows(x)
            | Op::MeanRows(x)
            | Op::Diag(x)
            | Op::LogSumExp(x)
            | Op::Sum(x) => vec![*x],
            Op::L2NormalizeRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. }
            | Op::ScaleRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::StackRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use computation graph.
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    track_params: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grads: Vec::new(),
            backward_done: false,
            track_params: true,
        }
    }

    /// Graph whose parameters do not require gradients (frozen forward passes).
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Which ReLU outputs are positive, over every ReLU node in order.
    /// Two evaluations with equal patterns lie in the same smooth region.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| n.op.kind() == OpKind::Relu)
            .flat_map(|n| n.value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bind a parameter tensor; repeated binds of the same storage share one leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = t.storage_key();
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(t.clone(), self.track_params);
        self.bound.insert(key, v);
        v
    }

    /// Gradient accumulated for a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Gradient of a bound parameter; `None` if it never entered the graph
    /// or received no gradient.
    pub fn param_grad(&self, t: &Tensor) -> Option<Tensor> {
        self.bound.get(&t.storage_key()).and_then(|&v| self.grad(v))
    }

    /// Clear gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        check_finite(op_name, value.data())?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        match s {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn vec_len(&self, op: &'static str, v: Var) -> Result<usize> {
        let s = self.value(v).shape();
        match s {
            &[n] => Ok(n),
            _ => Err(Error::shape(op, format!("expected a vector, got shape {s:?}"))),
        }
    }

    // ---- forward operations -------------------------------------------------

    /// `a · b`, with `b` read transposed when `transpose_b` is set.
    pub fn matmul_ex(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (br, bc) = self.mat("matmul", b)?;
        let (k2, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: [{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            transpose_b,
            &mut out,
            false,
        );
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                tb: transpose_b,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        self.push(name, Tensor::from_parts(shape, out), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::from_parts(shape, out), Op::Scale(x, c))
    }

    /// `x + b` with the vector `b` added to every row of the matrix `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.mat("add_row_bias", x)?;
        let n = self.vec_len("add_row_bias", b)?;
        if n != c {
            return Err(Error::shape("add_row_bias", format!("bias {n} vs {c} columns")));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
        self.push("add_row_bias", Tensor::from_parts(vec![r, c], out), Op::AddRowBias(x, b))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        self.push("relu", Tensor::from_parts(shape, out), Op::Relu(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat("softmax_rows", x)?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push("softmax_rows", Tensor::from_parts(vec![r, c], out), Op::SoftmaxRows(x))
    }

    /// Scale every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat("l2_normalize_rows", x)?;
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(r);
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= MIN_ROW_NORM {
                return Err(Error::Degenerate {
                    op: "l2_normalize_rows",
                    row: i,
                    norm,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        self.push(
            "l2_normalize_rows",
            Tensor::from_parts(vec![r, c], out),
            Op::L2NormalizeRows { x, norms },
        )
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.mat("layer_norm", x)?;
        if self.vec_len("layer_norm", gamma)? != c || self.vec_len("layer_norm", beta)? != c {
            return Err(Error::shape("layer_norm", "gain/shift length must equal columns"));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
            inv_std.push(inv);
        }
        self.push(
            "layer_norm",
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Column-wise mean of a `T×d` matrix, giving a length-`d` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat("mean_pool", x)?;
        if r == 0 {
            return Err(Error::Invalid("mean_pool of an empty sequence".into()));
        }
        let mut out = vec![0.0; c];
        for row in self.value(x).data().chunks_exact(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push("mean_pool", Tensor::from_parts(vec![c], out), Op::MeanRows(x))
    }

    /// Stack equal-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("stack_rows", "no rows"));
        }
        let d = self.vec_len("stack_rows", xs[0])?;
        let mut out = Vec::with_capacity(xs.len() * d);
        for &x in xs {
            if self.vec_len("stack_rows", x)? != d {
                return Err(Error::shape("stack_rows", "rows differ in length"));
            }
            out.extend_from_slice(self.value(x).data());
        }
        self.push(
            "stack_rows",
            Tensor::from_parts(vec![xs.len(), d], out),
            Op::StackRows(xs.to_vec()),
        )
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let r = self.mat("concat_cols", xs[0])?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (ri, ci) = self.mat("concat_cols", x)?;
            if ri != r {
                return Err(Error::shape("concat_cols", format!("row counts {r} vs {ri}")));
            }
            widths.push(ci);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![r, total], out),
            Op::ConcatCols(xs.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.mat("slice_cols", x)?;
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", format!("range {start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push("slice_cols", Tensor::from_parts(vec![r, w], out), Op::SliceCols { x, start })
    }

    /// Select rows `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.mat("gather_rows", x)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape("gather_rows", format!("row {i} out of {r}")));
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Place row `r` of `x` at row `idx[r]` of an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], n: usize) -> Result<Var> {
        let (r, c) = self.mat("scatter_rows", x)?;
        if idx.len() != r {
            return Err(Error::shape("scatter_rows", "index count must equal rows"));
        }
        let mut seen = vec![false; n];
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        for (k, &i) in idx.iter().enumerate() {
            if i >= n || seen[i] {
                return Err(Error::shape("scatter_rows", format!("bad or repeated target row {i}")));
            }
            seen[i] = true;
            out[i * c..(i + 1) * c].copy_from_slice(&src[k * c..(k + 1) * c]);
        }
        self.push(
            "scatter_rows",
            Tensor::from_parts(vec![n, c], out),
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Multiply row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (r, c) = self.mat("scale_rows", x)?;
        if factors.len() != r {
            return Err(Error::shape("scale_rows", "one factor per row required"));
        }
        let mut out = self.value(x).to_vec();
        for (row, f) in out.chunks_exact_mut(c).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        self.push(
            "scale_rows",
            Tensor::from_parts(vec![r, c], out),
            Op::ScaleRows {
                x,
                factors: factors.to_vec(),
            },
        )
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat("diag", x)?;
        if r != c {
            return Err(Error::shape("diag", format!("[{r}x{c}] is not square")));
        }
        let src = self.value(x).data();
        let out: Vec<f64> = (0..r).map(|i| src[i * c + i]).collect();
        self.push("diag", Tensor::from_parts(vec![r], out), Op::Diag(x))
    }

    /// `log Σ exp(x)` over every element, evaluated with max subtraction.
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::shape("logsumexp", "empty input"));
        }
        let out = lse(t.data());
        self.push("logsumexp", Tensor::from_parts(vec![], vec![out]), Op::LogSumExp(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push("sum", Tensor::from_parts(vec![], vec![s]), Op::Sum(x))
    }

    /// Mean softmax cross-entropy of `N×C` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.mat("cross_entropy", logits)?;
        if labels.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", "one label per row required"));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::shape("cross_entropy", format!("label {y} out of {c}")));
            }
            let row = &src[i * c..(i + 1) * c];
            let l = lse(row);
            for j in 0..c {
                probs[i * c + j] = (row[j] - l).exp();
            }
            total += l - row[y];
        }
        self.push(
            "cross_entropy",
            Tensor::from_parts(vec![], vec![total / n as f64]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    // ---- reverse pass -------------------------------------------------------

    /// Accumulate `∂loss/∂leaf` for every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward called twice without reset_grads".into(),
            ));
        }
        let root = self.value(loss);
        if root.rank() != 0 {
            return Err(Error::Graph(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        self.backward_done = true;
        let fault = BACKWARD_FAULT.with(|f| f.get());
        let n = loss.0 + 1;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        let Graph { nodes, grads, .. } = self;
        for i in (0..n).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut g = g;
            if fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= 1.5);
            }
            propagate(nodes, grads, node, &g);
        }
        Ok(())
    }
}

pub(crate) fn lse(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Zero-initialised gradient buffer for `v`, or `None` if `v` needs none.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    let dims = |v: Var| nodes[v.0].value.dims2().expect("matrix operand");
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, tb } => {
            let (m, k) = dims(*a);
            let n = node.value.shape()[1];
            if let Some(da) = slot(nodes, grads, *a) {
                // dA = G · op(B)ᵀ
                gemm(m, n, k, g, false, val(*b), !*tb, da, true);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                if *tb {
                    // B is n×k: dB = Gᵀ · A
                    gemm(n, m, k, g, true, val(*a), false, db, true);
                } else {
                    // B is k×n: dB = Aᵀ · G
                    gemm(k, m, n, val(*a), true, g, false, db, true);
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = dims(*x);
            if let Some(dx) = slot(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(d) = slot(nodes, grads, v) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, grads, *a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                    *d += g * y;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                    *d += g * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
        }
        Op::AddRowBias(x, b) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            let c = node.value.shape()[1];
            if let Some(d) = slot(nodes, grads, *b) {
                for row in g.chunks_exact(c) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *d += g;
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let c = node.value.shape()[1];
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                for ((drow, grow), yrow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                    let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        drow[j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
        }
        Op::L2NormalizeRows { x, norms } => {
            let c = node.value.shape()[1];
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *x) {
                for (i, norm) in norms.iter().enumerate() {
                    let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] += (gr[j] - yr[j] * dot) / norm;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = node.value.shape()[1];
            let gam = val(*gamma);
            if let Some(d) = slot(nodes, grads, *beta) {
                for row in g.chunks_exact(c) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
            if let Some(d) = slot(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        d[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(d) = slot(nodes, grads, *x) {
                let cf = c as f64;
                for (i, inv) in inv_std.iter().enumerate() {
                    let (gr, hr) = (&g[i * c..(i + 1) * c], &xhat[i * c..(i + 1) * c]);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= cf;
                    mean_dh_h /= cf;
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        d[i * c + j] += inv * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
        }
        Op::MeanRows(x) => {
            let (r, c) = dims(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                let inv = 1.0 / r as f64;
                for row in d.chunks_exact_mut(c) {
                    row.iter_mut().zip(g).for_each(|(d, g)| *d += g * inv);
                }
            }
        }
        Op::StackRows(xs) => {
            let c = node.value.shape()[1];
            for (i, &x) in xs.iter().enumerate() {
                if let Some(d) = slot(nodes, grads, x) {
                    d.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ConcatCols(xs) => {
            let (r, total) = (node.value.shape()[0], node.value.shape()[1]);
            let mut offset = 0;
            for &x in xs {
                let w = nodes[x.0].value.shape()[1];
                if let Some(d) = slot(nodes, grads, x) {
                    for i in 0..r {
                        let src = &g[i * total + offset..i * total + offset + w];
                        d[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { x, start } => {
            let (r, c) = dims(*x);
            let w = node.value.shape()[1];
            if let Some(d) = slot(nodes, grads, *x) {
                for i in 0..r {
                    let dst = &mut d[i * c + start..i * c + start + w];
                    dst.iter_mut().zip(&g[i * w..(i + 1) * w]).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let c = node.value.shape()[1];
            if let Some(d) = slot(nodes, grads, *x) {
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut d[i * c..(i + 1) * c];
                    dst.iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ScatterRows { x, idx } => {
            let c = node.value.shape()[1];
            if let Some(d) = slot(nodes, grads, *x) {
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut d[k * c..(k + 1) * c];
                    dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::ScaleRows { x, factors } => {
            let c = node.value.shape()[1];
            if let Some(d) = slot(nodes, grads, *x) {
                for ((drow, grow), f) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(factors) {
                    drow.iter_mut().zip(grow).for_each(|(d, g)| *d += f * g);
                }
            }
        }
        Op::Diag(x) => {
            let n = node.value.numel();
            if let Some(d) = slot(nodes, grads, *x) {
                for i in 0..n {
                    d[i * n + i] += g[i];
                }
            }
        }
        Op::LogSumExp(x) => {
            let out = node.value.data()[0];
            let xv = val(*x);
            if let Some(d) = slot(nodes, grads, *x) {
                for (d, v) in d.iter_mut().zip(xv) {
                    *d += g[0] * (v - out).exp();
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, grads, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = nodes[logits.0].value.shape()[1];
            let scale = g[0] / labels.len() as f64;
            if let Some(d) = slot(nodes, grads, *logits) {
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == y { 1.0 } else { 0.0 };
                        d[i * c + j] += scale * (probs[i * c + j] - target);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = g.constant(m(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let q = g.constant(m(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let c = g.matmul(p, q).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_symmetric_and_large_values() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[0.0, 0.0]]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let x = g.constant(m(&[&[1000.0, 1000.0, 1000.0]]));
        let y = g.softmax_rows(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let mut g = Graph::new();
        let x = g.constant(m(&[&[3.0, 4.0]]));
        let y = g.l2_normalize_rows(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);

        let u = g.constant(m(&[&[0.0, 1.0, 0.0]]));
        let y = g.l2_normalize_rows(u).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0]);

        let z = g.constant(m(&[&[0.0, 0.0]]));
        assert!(matches!(
            g.l2_normalize_rows(z),
            Err(Error::Degenerate { row: 0, .. })
        ));
    }

    #[test]
    fn backward_product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).unwrap(), true);
        let y = g.leaf(Tensor::scalar(3.0).unwrap(), true);
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
        assert_eq!(g.grad(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 3]), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn shared_param_binds_once_and_accumulates() {
        let w = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let t = g.sum(s).unwrap();
        g.backward(t).unwrap();
        assert_eq!(g.param_grad(&w).unwrap().data(), &[2.0, 2.0]);

        let mut frozen = Graph::inference();
        let a = frozen.param(&w);
        assert!(!frozen.requires_grad(a));
    }

    #[test]
    fn mean_pool_cases() {
        let mut g = Graph::new();
        let x = g.leaf(m(&[&[1.0, 3.0], &[3.0, 1.0]]), true);
        let p = g.mean_rows(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 2.0]);
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5; 4]);

        let single = g.constant(m(&[&[4.0, -1.0]]));
        let p = g.mean_rows(single).unwrap();
        assert_eq!(g.value(p).data(), &[4.0, -1.0]);

        let empty = g.constant(Tensor::zeros(&[0, 2]));
        assert!(g.mean_rows(empty).is_err());
    }

    #[test]
    fn nonfinite_results_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e300]).unwrap());
        assert!(matches!(g.mul(x, x), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn logsumexp_matches_direct() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.1, -2.0, 3.0]).unwrap());
        let l = g.logsumexp(x).unwrap();
        let direct = (0.1f64.exp() + (-2.0f64).exp() + 3.0f64.exp()).ln();
        assert!((g.value(l).item().unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
