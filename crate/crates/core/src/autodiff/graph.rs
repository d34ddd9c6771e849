use std::cell::RefCell;
use std::sync::Arc;

use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    AddScalar(usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Softmax(usize),
    Silu(usize),
    Gelu(usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    L2Norm { input: usize, norms: Vec<f64>, eps: f64 },
    Sum(usize),
    Mean(usize),
    Variance(usize),
    Rope { input: usize, table: Arc<RopeTable> },
    Gather { table: usize, indices: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulBt(a, b) | MulScalar(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | AddScalar(a) | Transpose(a) | Reshape(a) | Softmax(a) | Silu(a) | Gelu(a) | Sum(a)
            | Mean(a) | Variance(a) => vec![*a],
            Concat { inputs, .. } => inputs.clone(),
            Slice { input, .. } | LayerNorm { input, .. } | L2Norm { input, .. } | Rope { input, .. } => {
                vec![*input]
            }
            Gather { table, .. } => vec![*table],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape.
///
/// Operations take `&self` so calls nest naturally; the tape lives in a
/// `RefCell`. A graph is meant to be built and consumed by one thread.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<Vec<Option<Tensor>>>,
    rope_tables: RefCell<Vec<Arc<RopeTable>>>,
}

/// Per-(row, pair) rotation for [`Graph::rope`]; reused across heads and blocks.
#[derive(Debug)]
struct RopeTable {
    positions: Vec<usize>,
    dim: usize,
    base: u64,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    fn new(positions: &[usize], dim: usize, base: f64) -> Self {
        let half = dim / 2;
        let thetas: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / dim as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for &theta in &thetas {
                let (s, c) = (p as f64 * theta).sin_cos();
                cos.push(c);
                sin.push(s);
            }
        }
        Self {
            positions: positions.to_vec(),
            dim,
            base: base.to_bits(),
            cos,
            sin,
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `c = a * b` for row/column-strided operands; `c` is row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` ([m, k]), `b` ([k, n]) and `c` ([m, n]).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `(outer, axis_len, inner)` view of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        Ok(self.push_node(value, op, requires_grad))
    }

    /// Trainable leaf.
    pub fn param(&self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value.into(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Var {
        self.leaf(value.into(), false)
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads.borrow().get(v.0).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a),
            rhs: self.shape(b),
        }
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), n, 1, &mut out);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a.0, b.0))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_bt(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2("matmul_bt")?;
        let (n, k2) = bv.dims2("matmul_bt")?;
        if k != k2 {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), k, 1, bv.data(), 1, k, &mut out);
        self.push("matmul_bt", Tensor::new(&[m, n], out)?, Op::MatMulBt(a.0, b.0))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        self.push("transpose", t, Op::Transpose(a.0))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(shape, av.data().to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: av.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        self.push("reshape", t, Op::Reshape(a.0))
    }

    // ---- elementwise ----

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a).zip_map(&self.value(b), name, f)?;
        self.push(name, t, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn row_broadcast(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        if bv.shape().len() != 1 || av.shape().last() != Some(&n) {
            return Err(self.shape_err(name, a, b));
        }
        let data = av
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        self.push(name, Tensor::new(av.shape(), data)?, op)
    }

    /// `a[.., n] + b[n]`, broadcasting `b` over leading dimensions.
    pub fn add_row(&self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, b, |x, y| x + y, Op::AddRow(a.0, b.0))
    }

    /// `a[.., n] * b[n]`, broadcasting `b` over leading dimensions.
    pub fn mul_row(&self, a: Var, b: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, b, |x, y| x * y, Op::MulRow(a.0, b.0))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).scale(c);
        self.push("scale", t, Op::Scale(a.0, c))
    }

    /// `a * s` where `s` is a one-element tensor.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(self.shape_err("mul_scalar", a, s));
        }
        let t = self.value(a).scale(sv.data()[0]);
        self.push("mul_scalar", t, Op::MulScalar(a.0, s.0))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        self.push("add_scalar", t, Op::AddScalar(a.0))
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", t, Op::Silu(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let t = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()));
        self.push("gelu", t, Op::Gelu(a.0))
    }

    // ---- structural ----

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&v| self.value(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::Shape {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == first.shape()[d]);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            "concat",
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        )
    }

    /// `len` entries of `a` along `axis`, starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.shape().len() || start + len > av.shape()[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: av.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, full, inner) = split_axis(av.shape(), axis);
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        self.push(
            "slice",
            Tensor::new(&shape, data)?,
            Op::Slice {
                input: a.0,
                axis,
                start,
            },
        )
    }

    /// Splits `a` along `axis` into pieces of the given sizes.
    pub fn split(&self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let shape = self.shape(a);
        if axis >= shape.len() || total != shape[axis] {
            return Err(Error::Shape {
                op: "split",
                lhs: shape,
                rhs: sizes.to_vec(),
            });
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.slice(a, axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    /// Rows of `table[vocab, dim]` selected by `indices`.
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, dim) = tv.dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: tv.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let data = indices.iter().flat_map(|&i| tv.row(i).iter().copied()).collect();
        self.push(
            "gather_rows",
            Tensor::new(&[indices.len(), dim], data)?,
            Op::Gather {
                table: table.0,
                indices: indices.to_vec(),
            },
        )
    }

    // ---- normalisation and reductions ----

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = *av.shape().last().ok_or(Error::Shape {
            op: "softmax",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push("softmax", Tensor::new(av.shape(), data)?, Op::Softmax(a.0))
    }

    /// Normalises each row (last axis) to zero mean and unit population variance.
    pub fn layer_norm_rows(&self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let n = *av.shape().last().unwrap_or(&1);
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(
            "layer_norm",
            Tensor::new(av.shape(), data)?,
            Op::LayerNorm { input: a.0, inv_std },
        )
    }

    /// Layer norm over the last axis followed by a learnable per-feature affine map.
    pub fn layer_norm(&self, a: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let h = self.layer_norm_rows(a, eps)?;
        let h = self.mul_row(h, scale)?;
        self.add_row(h, shift)
    }

    /// `x / (||x|| + eps)` along the last axis.
    pub fn l2_normalize_rows(&self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let n = *av.shape().last().unwrap_or(&1);
        let mut data = av.data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / n.max(1));
        for row in data.chunks_mut(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in row.iter_mut() {
                *x /= norm + eps;
            }
            norms.push(norm);
        }
        self.push(
            "l2_normalize",
            Tensor::new(av.shape(), data)?,
            Op::L2Norm { input: a.0, norms, eps },
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let m = self.value(a).mean();
        self.push("mean", Tensor::scalar(m), Op::Mean(a.0))
    }

    /// Population variance over all elements.
    pub fn variance(&self, a: Var) -> Result<Var> {
        let s = self.value(a).std();
        self.push("variance", Tensor::scalar(s * s), Op::Variance(a.0))
    }

    /// Rotates feature pairs `(2i, 2i + 1)` of each row of `a[seq, dim]` by
    /// `positions[row] * base^(-2i / dim)`.
    pub fn rope(&self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let av = self.value(a);
        let (seq, dim) = av.dims2("rope")?;
        if dim % 2 != 0 || positions.len() != seq {
            return Err(Error::Shape {
                op: "rope",
                lhs: av.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let half = dim / 2;
        let table = {
            let mut cache = self.rope_tables.borrow_mut();
            match cache
                .iter()
                .find(|t| t.dim == dim && t.base == base.to_bits() && t.positions == positions)
            {
                Some(t) => t.clone(),
                None => {
                    let t = Arc::new(RopeTable::new(positions, dim, base));
                    cache.push(t.clone());
                    t
                }
            }
        };
        let (cos, sin) = (&table.cos, &table.sin);
        let mut data = av.data().to_vec();
        for r in 0..seq {
            for i in 0..half {
                let (c, s) = (cos[r * half + i], sin[r * half + i]);
                let (x0, x1) = (data[r * dim + 2 * i], data[r * dim + 2 * i + 1]);
                data[r * dim + 2 * i] = x0 * c - x1 * s;
                data[r * dim + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
        self.push(
            "rope",
            Tensor::new(av.shape(), data)?,
            Op::Rope { input: a.0, table },
        )
    }

    // ---- backward ----

    /// Accumulates `d loss / d leaf` into every trainable leaf.
    ///
    /// Intermediate gradients are discarded; leaf gradients add onto whatever
    /// previous passes left behind.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes.iter().all(|n| matches!(n.op, Op::Leaf)) {
            return Err(Error::Backward("graph has no recorded operations".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));

        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut leaf_grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, dx) in Self::adjoint(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&dx),
                    slot => *slot = Some(dx),
                }
            }
        }
        Ok(())
    }

    fn adjoint(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |i: usize| &*nodes[i].value;
        let y = &*node.value;
        let gd = g.data();
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2("matmul")?;
                let n = bv.shape()[1];
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, n, 1, bv.data(), 1, n, &mut da);
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, av.data(), 1, k, gd, n, 1, &mut db);
                vec![(*a, Tensor::new(&[m, k], da)?), (*b, Tensor::new(&[k, n], db)?)]
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2("matmul_bt")?;
                let n = bv.shape()[0];
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, n, 1, bv.data(), k, 1, &mut da);
                let mut db = vec![0.0; n * k];
                gemm(n, m, k, gd, 1, n, av.data(), k, 1, &mut db);
                vec![(*a, Tensor::new(&[m, k], da)?), (*b, Tensor::new(&[n, k], db)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), "mul", |x, y| x * y)?),
                (*b, g.zip_map(val(*a), "mul", |x, y| x * y)?),
            ],
            Op::AddRow(a, b) => {
                let n = val(*b).len();
                let mut db = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (acc, x) in db.iter_mut().zip(row) {
                        *acc += x;
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::vector(db))]
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.len();
                let mut db = vec![0.0; n];
                let mut da = Vec::with_capacity(gd.len());
                for (grow, arow) in gd.chunks(n).zip(av.data().chunks(n)) {
                    for j in 0..n {
                        db[j] += grow[j] * arow[j];
                        da.push(grow[j] * bv.data()[j]);
                    }
                }
                vec![(*a, Tensor::new(av.shape(), da)?), (*b, Tensor::vector(db))]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::MulScalar(a, s) => {
                let (av, sv) = (val(*a), val(*s));
                let ds = g.dot(av);
                vec![(*a, g.scale(sv.data()[0])), (*s, Tensor::new(sv.shape(), vec![ds])?)]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Transpose(a) => vec![(*a, g.transpose2()?)],
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let total = y.shape()[*axis] * inner;
                let mut out = Vec::with_capacity(inputs.len());
                for &i in inputs {
                    let s = val(i).shape();
                    let chunk = s[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        d.extend_from_slice(&gd[base..base + chunk]);
                    }
                    offset += chunk;
                    out.push((i, Tensor::new(s, d)?));
                }
                out
            }
            Op::Slice { input, axis, start } => {
                let s = val(*input).shape();
                let (outer, full, inner) = split_axis(s, *axis);
                let len = y.shape()[*axis];
                let mut d = vec![0.0; s.iter().product()];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![(*input, Tensor::new(s, d)?)]
            }
            Op::Softmax(a) => {
                let n = *y.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(n).zip(y.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    d.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - dot)));
                }
                vec![(*a, Tensor::new(y.shape(), d)?)]
            }
            Op::Silu(a) => {
                let d = g.zip_map(val(*a), "silu", |g, x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })?;
                vec![(*a, d)]
            }
            Op::Gelu(a) => {
                let d = g.zip_map(val(*a), "gelu", |g, x| {
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                })?;
                vec![(*a, d)]
            }
            Op::LayerNorm { input, inv_std } => {
                let n = *y.shape().last().unwrap_or(&1);
                let nf = n as f64;
                let mut d = Vec::with_capacity(gd.len());
                for ((grow, yrow), &inv) in gd.chunks(n).zip(y.data().chunks(n)).zip(inv_std) {
                    let sum_g: f64 = grow.iter().sum();
                    let sum_gy: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    d.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(g, y)| inv / nf * (nf * g - sum_g - y * sum_gy)),
                    );
                }
                vec![(*input, Tensor::new(y.shape(), d)?)]
            }
            Op::L2Norm { input, norms, eps } => {
                let x = val(*input);
                let n = *y.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(gd.len());
                for ((grow, xrow), &norm) in gd.chunks(n).zip(x.data().chunks(n)).zip(norms) {
                    let denom = norm + eps;
                    if norm == 0.0 {
                        d.extend(grow.iter().map(|g| g / denom));
                        continue;
                    }
                    let xg: f64 = grow.iter().zip(xrow).map(|(g, x)| g * x).sum();
                    let c = xg / (norm * denom * denom);
                    d.extend(grow.iter().zip(xrow).map(|(g, x)| g / denom - x * c));
                }
                vec![(*input, Tensor::new(y.shape(), d)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.item() / x.len() as f64))]
            }
            Op::Variance(a) => {
                let x = val(*a);
                let m = x.mean();
                let c = 2.0 * g.item() / x.len() as f64;
                vec![(*a, x.map(|v| c * (v - m)))]
            }
            Op::Rope { input, table } => {
                let (cos, sin) = (&table.cos, &table.sin);
                let (seq, dim) = y.dims2("rope")?;
                let half = dim / 2;
                let mut d = gd.to_vec();
                for r in 0..seq {
                    for i in 0..half {
                        let (c, s) = (cos[r * half + i], sin[r * half + i]);
                        let (g0, g1) = (gd[r * dim + 2 * i], gd[r * dim + 2 * i + 1]);
                        d[r * dim + 2 * i] = g0 * c + g1 * s;
                        d[r * dim + 2 * i + 1] = -g0 * s + g1 * c;
                    }
                }
                vec![(*input, Tensor::new(y.shape(), d)?)]
            }
            Op::Gather { table, indices } => {
                let t = val(*table);
                let dim = t.shape()[1];
                let mut d = vec![0.0; t.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..dim {
                        d[i * dim + j] += gd[r * dim + j];
                    }
                }
                vec![(*table, Tensor::new(t.shape(), d)?)]
            }
        })
    }
}
