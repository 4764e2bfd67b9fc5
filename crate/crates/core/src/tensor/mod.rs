//! Dense f32 tensors and a reverse-mode gradient tape.
//!
//! Operations are recorded on a [`Tape`] in execution order and addressed by
//! [`Var`] handles. [`Tape::backward`] walks the recording in reverse, visiting
//! each node once, and accumulates gradients into every node that requires
//! them. Nodes that do not require gradients (frozen weights, data) are
//! never written to.
//!
//! Broadcasting is limited to scalar-vs-tensor and equal shapes. The only
//! exception is [`Tape::add_bias`], which adds a `[n]` row to every row of a
//! `[m, n]` matrix.

mod kernels;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use kernels::AttnDims;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense f32 array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid {
                op: "tensor",
                msg: format!("shape {shape:?} implies {n} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Normal(0, std) entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            [n] => Ok((1, *n)),
            _ => Err(TensorError::Invalid {
                op,
                msg: format!("expected a vector or matrix, got shape {:?}", self.shape),
            }),
        }
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    MaxScalar(Var, f32),
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f32>,
        mask: Vec<bool>,
        row_weight: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in topological order and replays them in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

const LN_EPS: f32 = 1e-5;

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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `x` into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if any backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Names the operation that produced `v`, for graph inspection.
    pub fn op_name(&self, v: Var) -> &'static str {
        match &self.nodes[v.0].op {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::MaxScalar(..) => "max_scalar",
            Op::AddBias(..) => "add_bias",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    /// For a `bce_with_logits` node, the vocabulary mask it was recorded with.
    pub fn bce_mask(&self, v: Var) -> Option<&[bool]> {
        match &self.nodes[v.0].op {
            Op::BceWithLogits { mask, .. } => Some(mask),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        let (m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => {
                return Err(TensorError::Shape {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data = kernels::matmul(&self.value(a).data, &self.value(b).data, m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::MulScalar(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    /// Natural log. Inputs must be strictly positive; callers add an epsilon.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data.iter().find(|v| !(**v > 0.0)) {
            return Err(TensorError::Domain {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, Op::Log(x), f32::ln))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f32::exp)
    }

    /// Elementwise `max(x, c)`. The gradient flows to `x` where `x >= c`.
    pub fn max_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, Op::MaxScalar(x, c), |v| v.max(c))
    }

    /// `x[m, n] + bias[n]` applied to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_bias")?;
        if self.value(bias).shape != [n] {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.value(x).shape.clone(),
                rhs: self.value(bias).shape.clone(),
            });
        }
        let b = &self.value(bias).data;
        let mut data = self.value(x).data.clone();
        for i in 0..m {
            for (o, bv) in data[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape.clone();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, bias), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s as f32), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s: f64 = self.value(x).data.iter().map(|&v| v as f64).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar((s / n as f64) as f32), Op::Mean(x), rg)
    }

    /// Rows of `table[V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = match self.value(table).shape.as_slice() {
            [v, d] => (*v, *d),
            s => {
                return Err(TensorError::Invalid {
                    op: "gather",
                    msg: format!("table must be a matrix, got {s:?}"),
                })
            }
        };
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    extent: v,
                });
            }
            data.extend_from_slice(&self.value(table).data[id * d..(id + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rows of a matrix `x[m, n]`, giving `[rows.len(), n]`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2("select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: r,
                    extent: m,
                });
            }
            data.extend_from_slice(&self.value(x).data[r * n..(r + 1) * n]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), n],
                data,
            },
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row layer normalization of `x[m, n]` with learned `gain[n]`, `bias[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).shape != [n] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.value(x).shape.clone(),
                    rhs: self.value(p).shape.clone(),
                });
            }
        }
        let xs = &self.value(x).data;
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut xhat = vec![0.0f32; m * n];
        let mut inv_std = vec![0.0f32; m];
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = (1.0 / (var + LN_EPS as f64).sqrt()) as f32;
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean as f32) * inv;
                xhat[i * n + j] = h;
                data[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.value(x).shape.clone();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor { shape, data },
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Fused multi-head causal self-attention. `q`, `k`, `v` are
    /// `[batch * seq, width]` with heads laid out in contiguous column blocks.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, width) = self.value(q).dims2("attention")?;
        if heads == 0 || width % heads != 0 || rows != batch * seq {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("{rows}x{width} activations do not split into batch={batch} seq={seq} heads={heads}"),
            });
        }
        let dims = AttnDims {
            batch,
            seq,
            heads,
            head_dim: width / heads,
        };
        let (data, probs) =
            kernels::attention_forward(&self.value(q).data, &self.value(k).data, &self.value(v).data, dims);
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, width],
                data,
            },
            Op::Attention { q, k, v, dims, probs },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`. A `[V]` vector
    /// is treated as a single row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != m {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: self.value(logits).shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        if m == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: "no rows".into(),
            });
        }
        let z = &self.value(logits).data;
        let mut probs = vec![0.0f32; m * n];
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    extent: n,
                });
            }
            let row = &z[i * n..(i + 1) * n];
            let lse = kernels::log_sum_exp(row);
            for (p, &zj) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (zj as f64 - lse).exp() as f32;
            }
            total += lse - row[t] as f64;
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar((total / m as f64) as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Masked binary cross-entropy with logits.
    ///
    /// `targets` is a dense `{0,1}` array matching `logits[m, V]`, `mask[V]`
    /// selects the vocabulary entries that count, and `valid_rows[m]` selects
    /// the rows that count. Each valid row contributes the mean of
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))` over unmasked entries; the result
    /// is the mean over valid rows.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32], mask: &[bool], valid_rows: &[bool]) -> Result<Var> {
        let (m, n) = self.value(logits).dims2("bce_with_logits")?;
        if targets.len() != m * n || mask.len() != n || valid_rows.len() != m {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                lhs: self.value(logits).shape.clone(),
                rhs: vec![targets.len(), mask.len(), valid_rows.len()],
            });
        }
        let unmasked = mask.iter().filter(|&&b| b).count();
        if unmasked == 0 {
            return Err(TensorError::Invalid {
                op: "bce_with_logits",
                msg: "mask excludes every index".into(),
            });
        }
        let valid = valid_rows.iter().filter(|&&b| b).count();
        if valid == 0 {
            return Err(TensorError::Invalid {
                op: "bce_with_logits",
                msg: "no valid rows".into(),
            });
        }
        let w = 1.0 / (unmasked as f64 * valid as f64);
        let z = &self.value(logits).data;
        let mut total = 0.0f64;
        for i in (0..m).filter(|&i| valid_rows[i]) {
            for j in (0..n).filter(|&j| mask[j]) {
                let (zz, y) = (z[i * n + j] as f64, targets[i * n + j] as f64);
                total += zz.max(0.0) - zz * y + (-zz.abs()).exp().ln_1p();
            }
        }
        let row_weight = valid_rows.iter().map(|&v| if v { w as f32 } else { 0.0 }).collect();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar((total * w) as f32),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                row_weight,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every node that requires gradients,
    /// adding to whatever earlier backward calls accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Shape {
                op: "backward",
                lhs: self.value(loss).shape.clone(),
                rhs: vec![],
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut local: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = local[id].take() else { continue };
            self.propagate(id, &g, &mut local);
            let slot = &mut self.grads[id];
            match slot {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f32], local: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let mut send = |v: Var, delta: Vec<f32>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut local[v.0] {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let out = &nodes[id].value;

        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                if nodes[a.0].requires_grad {
                    send(*a, kernels::matmul_nt(g, &val(*b).data, m, n, k));
                }
                if nodes[b.0].requires_grad {
                    send(*b, kernels::matmul_tn(&val(*a).data, g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if nodes[a.0].requires_grad {
                    send(*a, g.iter().zip(&val(*b).data).map(|(g, y)| g * y).collect());
                }
                if nodes[b.0].requires_grad {
                    send(*b, g.iter().zip(&val(*a).data).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddScalar(x) => send(*x, g.to_vec()),
            Op::MulScalar(x, c) => send(*x, g.iter().map(|g| g * c).collect()),
            Op::Relu(x) => send(
                *x,
                g.iter().zip(&val(*x).data).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            ),
            Op::Sigmoid(x) => send(*x, g.iter().zip(&out.data).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Log(x) => send(*x, g.iter().zip(&val(*x).data).map(|(g, x)| g / x).collect()),
            Op::Exp(x) => send(*x, g.iter().zip(&out.data).map(|(g, e)| g * e).collect()),
            Op::MaxScalar(x, c) => send(
                *x,
                g.iter().zip(&val(*x).data).map(|(g, &x)| if x >= *c { *g } else { 0.0 }).collect(),
            ),
            Op::AddBias(x, b) => {
                send(*x, g.to_vec());
                if nodes[b.0].requires_grad {
                    let n = val(*b).numel();
                    let mut gb = vec![0.0f32; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    send(*b, gb);
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel().max(1);
                send(*x, vec![g[0] / n as f32; val(*x).numel()]);
            }
            Op::Gather { table, ids } => {
                if nodes[table.0].requires_grad {
                    let d = val(*table).shape[1];
                    let mut gt = vec![0.0f32; val(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                    send(*table, gt);
                }
            }
            Op::SelectRows { x, rows } => {
                if nodes[x.0].requires_grad {
                    let n = *val(*x).shape.last().unwrap();
                    let mut gx = vec![0.0f32; val(*x).numel()];
                    for (r, &src) in rows.iter().enumerate() {
                        gx[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(a, b)| *a += b);
                    }
                    send(*x, gx);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = val(*gain).numel();
                let m = inv_std.len();
                let gv = &val(*gain).data;
                if nodes[gain.0].requires_grad || nodes[bias.0].requires_grad {
                    let mut gg = vec![0.0f32; n];
                    let mut gb = vec![0.0f32; n];
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                            gb[j] += g[i * n + j];
                        }
                    }
                    send(*gain, gg);
                    send(*bias, gb);
                }
                if nodes[x.0].requires_grad {
                    let mut gx = vec![0.0f32; m * n];
                    for i in 0..m {
                        let mut sum_d = 0.0f32;
                        let mut sum_dx = 0.0f32;
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            sum_d += dh;
                            sum_dx += dh * xhat[i * n + j];
                        }
                        let (mean_d, mean_dx) = (sum_d / n as f32, sum_dx / n as f32);
                        for j in 0..n {
                            let dh = g[i * n + j] * gv[j];
                            gx[i * n + j] = inv_std[i] * (dh - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (gq, gk, gv) =
                    kernels::attention_backward(g, &val(*q).data, &val(*k).data, &val(*v).data, probs, *dims);
                send(*q, gq);
                send(*k, gk);
                send(*v, gv);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let m = targets.len();
                let n = probs.len() / m;
                let scale = g[0] / m as f32;
                let mut gz: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gz[i * n + t] -= scale;
                }
                send(*logits, gz);
            }
            Op::BceWithLogits {
                logits,
                targets,
                mask,
                row_weight,
            } => {
                let n = mask.len();
                let z = &val(*logits).data;
                let gz = z
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(idx, (&zz, &y))| {
                        let w = row_weight[idx / n];
                        if w == 0.0 || !mask[idx % n] {
                            0.0
                        } else {
                            g[0] * w * (kernels::sigmoid(zz) - y)
                        }
                    })
                    .collect();
                send(*logits, gz);
            }
        }
    }
}

/// Numerically stable `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    kernels::log_sum_exp(row)
}

/// Softmax of one row, normalized in f64.
pub fn softmax(row: &[f32]) -> Vec<f32> {
    let lse = kernels::log_sum_exp(row);
    row.iter().map(|&z| (z as f64 - lse).exp() as f32).collect()
}

pub fn sigmoid(x: f32) -> f32 {
    kernels::sigmoid(x)
}
