use crate::error::{AutodiffError, Result};
use crate::rng::Xoshiro256;
use crate::tensor::{suffix_broadcast, Tensor};

/// Additive mask value for disallowed attention positions.
///
/// A finite stand-in for `-inf` so that masked logits never produce
/// `inf - inf` or `inf * 0` during the backward pass.
pub const MASK_SENTINEL: f64 = -1e30;

fn is_masked(m: f64) -> bool {
    m <= MASK_SENTINEL * 0.5
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operator defined outside this crate.
///
/// `backward` receives the input values, the forward output and the
/// gradient flowing into the output, and returns one gradient buffer per
/// input (same length as that input).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf { param: Option<usize> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Sum {
        input: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    Mean {
        input: NodeId,
        axis: usize,
    },
    MeanAll(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        indices: Vec<usize>,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<NodeId>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, which is a topological order,
/// so the backward pass is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `node`, if it was reached.
    pub fn wrt(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every bound parameter into `params[idx].grad`.
    pub fn accumulate_into(&self, params: &mut [Tensor]) {
        for &(node, idx) in &self.params {
            let Some(g) = self.grads[node].as_ref() else {
                continue;
            };
            let p = &mut params[idx];
            let buf = p.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (b, v) in buf.iter_mut().zip(g) {
                *b += v;
            }
        }
    }

    /// Per-parameter gradients, summed over repeated bindings; parameters
    /// the loss does not depend on get zeros.
    pub fn param_grads(&self, params: &[Tensor]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        for &(node, idx) in &self.params {
            if let Some(g) = self.grads[node].as_ref() {
                for (b, v) in out[idx].iter_mut().zip(g) {
                    *b += v;
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided m×k, k×n and
    // m×n views; matrixmultiply only reads/writes inside those views.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
        }
    }

    /// Enables dropout.
    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let t = Tensor::from_vec(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(t, Op::Leaf { param: None }, false)
    }

    /// Binds `params[idx]` (a copy of `t`) as a differentiable leaf.
    pub fn param(&mut self, idx: usize, t: &Tensor) -> NodeId {
        let v = Tensor::from_vec(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.push(v, Op::Leaf { param: Some(idx) }, true)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = suffix_broadcast(op, ta.shape(), tb.shape())?;
        let n: usize = shape.iter().product();
        let (na, nb) = (ta.numel(), tb.numel());
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        Ok((Tensor::from_vec(shape, data)?, self.rg(a) || self.rg(b)))
    }

    /// Elementwise sum; the shorter shape must be a suffix of the longer.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let out = Tensor::from_vec(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v + c).collect();
        let out = Tensor::from_vec(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a 2-D matrix shared across all leading axes of `a`, or
    /// has exactly the leading axes of `a` (batched product).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        if sb[sb.len() - 2] != k {
            return Err(mismatch());
        }
        let n = sb[sb.len() - 1];
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rows = ta.numel() / k.max(1);
        let mut out = vec![0.0; rows * n];
        if sb.len() == 2 {
            gemm(rows, k, n, ta.data(), k, 1, tb.data(), n, 1, 0.0, &mut out);
        } else if sb.len() == sa.len() && sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            let batch: usize = sa[..sa.len() - 2].iter().product();
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ta.data()[bi * m * k..],
                    k,
                    1,
                    &tb.data()[bi * k * n..],
                    n,
                    1,
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        } else {
            return Err(mismatch());
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return Err(AutodiffError::InvalidArgument(format!(
                "transpose needs rank >= 2, got {s:?}"
            )));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = t.numel() / (m * n).max(1);
        let mut out = vec![0.0; t.numel()];
        let d = t.data();
        for b in 0..batch {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[off + j * m + i] = d[off + i * n + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let rg = self.rg(a);
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(a).clone();
        let rg = self.rg(a);
        let t = Tensor::from_vec(t.shape().to_vec(), t.into_data())?.reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::InvalidArgument("concat of nothing".into()));
        };
        let lead = {
            let s = self.shape(first);
            if s.is_empty() {
                return Err(AutodiffError::InvalidArgument("concat of scalars".into()));
            }
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + col..r * total + col + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            col += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// `input[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let t = self.value(input);
        let s = t.shape();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(AutodiffError::InvalidArgument(format!(
                "slice axis {axis} range {start}..{end} out of bounds for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = t.data();
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rg = self.rg(input);
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push(t, Op::Slice { input, axis, start }, rg))
    }

    fn reduce_axis(&self, input: NodeId, axis: usize, scale: f64) -> Result<Tensor> {
        let t = self.value(input);
        let s = t.shape();
        if axis >= s.len() {
            return Err(AutodiffError::InvalidArgument(format!(
                "axis {axis} out of range for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for a in 0..s[axis] {
                let base = (o * s[axis] + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = s.to_vec();
        shape.remove(axis);
        Tensor::from_vec(shape, out)
    }

    /// Sums out `axis`.
    pub fn sum(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.reduce_axis(input, axis, 1.0)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Sum { input, axis }, rg))
    }

    /// Averages out `axis`.
    pub fn mean(&mut self, input: NodeId, axis: usize) -> Result<NodeId> {
        let len = self
            .shape(input)
            .get(axis)
            .copied()
            .ok_or_else(|| AutodiffError::InvalidArgument(format!("axis {axis} out of range")))?;
        let t = self.reduce_axis(input, axis, 1.0 / len as f64)?;
        let rg = self.rg(input);
        Ok(self.push(t, Op::Mean { input, axis }, rg))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).data().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::SumAll(input), rg)
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let t = self.value(input);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::MeanAll(input), rg)
    }

    fn unary(&mut self, input: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(out, op, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    /// Softmax over the last axis after adding `mask`.
    ///
    /// Mask entries are `0` (allowed) or [`MASK_SENTINEL`] (blocked); the
    /// mask shape must be a suffix of the input shape. A row with every
    /// position blocked yields all zeros.
    pub fn softmax(&mut self, input: NodeId, mask: Option<&Tensor>) -> Result<NodeId> {
        let t = self.value(input);
        let s = t.shape();
        let Some(&n) = s.last() else {
            return Err(AutodiffError::InvalidArgument("softmax of a scalar".into()));
        };
        if let Some(m) = mask {
            suffix_broadcast("softmax", s, m.shape())?;
            if m.rank() > s.len() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "softmax",
                    lhs: s.to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
            if let Some(bad) = m.data().iter().find(|&&v| v != 0.0 && !is_masked(v)) {
                return Err(AutodiffError::InvalidArgument(format!(
                    "mask entries must be 0 or the sentinel, found {bad}"
                )));
            }
        }
        let d = t.data();
        let rows = t.numel().checked_div(n).unwrap_or(0);
        let mut out = vec![0.0; t.numel()];
        let mnumel = mask.map_or(1, |m| m.numel());
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let blocked = |j: usize| mask.is_some_and(|m| is_masked(m.data()[(r * n + j) % mnumel]));
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if !blocked(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if !blocked(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(input);
        let t = Tensor::from_vec(s.to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(input), rg))
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies the affine `gamma * x + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        let Some(&n) = s.last() else {
            return Err(AutodiffError::InvalidArgument("layer_norm of a scalar".into()));
        };
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = t.numel() / n.max(1);
        let d = t.data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::from_vec(s, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Gathers rows of a 2-D `table`; output shape `[indices.len(), cols]`.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        let s = t.shape();
        if s.len() != 2 {
            return Err(AutodiffError::InvalidArgument(format!(
                "embedding table must be 2-D, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::InvalidArgument(format!(
                    "embedding index {i} out of range for {rows} rows"
                )));
            }
            out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        let t = Tensor::from_vec(vec![indices.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity unless the graph is in training mode
    /// and `rate > 0`.
    pub fn dropout(&mut self, input: NodeId, rate: f64, rng: &mut Xoshiro256) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !self.training || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 - rate;
        let t = self.value(input);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(t.shape().to_vec(), data)?;
        let rg = self.rg(input);
        Ok(self.push(out, Op::Dropout { input, mask }, rg))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op.forward(&vals)?;
        let rg = inputs.iter().any(|&i| self.rg(i));
        Ok(self.push(
            out,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(AutodiffError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            if let Op::Leaf { param: Some(p) } = node.op {
                params.push((i, p));
            }
            grads[i] = Some(g);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let rg = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (id, s) in [(*a, 1.0), (*b, sign)] {
                    if rg(id) {
                        let n = val(id).numel();
                        let buf = accumulate(grads, id, n);
                        for (i, &gv) in g.iter().enumerate() {
                            buf[i % n] += s * gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (na, nb) = (ta.numel(), tb.numel());
                if rg(*a) {
                    let buf = accumulate(grads, *a, na);
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % na] += gv * tb.data()[i % nb];
                    }
                }
                if rg(*b) {
                    let buf = accumulate(grads, *b, nb);
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % nb] += gv * ta.data()[i % na];
                    }
                }
            }
            Op::Scale(a, c) => {
                let buf = accumulate(grads, *a, g.len());
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += c * gv;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let buf = accumulate(grads, *a, g.len());
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            }
            Op::MatMul(a, b) => self.backward_matmul(*a, *b, g, grads),
            Op::Transpose(a) => {
                let s = node.value.shape();
                // output is [.., n, m]; input is [.., m, n]
                let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = g.len() / (m * n).max(1);
                let buf = accumulate(grads, *a, g.len());
                for bi in 0..batch {
                    let off = bi * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            buf[off + i * n + j] += g[off + j * m + i];
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let s = node.value.shape();
                let total = s[s.len() - 1];
                let rows = g.len() / total.max(1);
                let mut col = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    let w = ps[ps.len() - 1];
                    if rg(p) {
                        let buf = accumulate(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                buf[r * w + j] += g[r * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = val(*input).shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let buf = accumulate(grads, *input, val(*input).numel());
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    let gbase = o * len * inner;
                    for i in 0..len * inner {
                        buf[base + i] += g[gbase + i];
                    }
                }
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let s = val(*input).shape();
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    1.0 / s[*axis] as f64
                } else {
                    1.0
                };
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let buf = accumulate(grads, *input, val(*input).numel());
                for o in 0..outer {
                    for a in 0..s[*axis] {
                        let base = (o * s[*axis] + a) * inner;
                        for i in 0..inner {
                            buf[base + i] += scale * g[o * inner + i];
                        }
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let n = val(*a).numel();
                let scale = if matches!(node.op, Op::MeanAll(_)) {
                    1.0 / n.max(1) as f64
                } else {
                    1.0
                };
                let buf = accumulate(grads, *a, n);
                buf.iter_mut().for_each(|b| *b += scale * g[0]);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let buf = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * y[i];
                }
            }
            Op::Log(a) => {
                let x = val(*a).data();
                let buf = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] / x[i];
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let buf = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let buf = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > 0.0 {
                        buf[i] += g[i];
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                let buf = accumulate(grads, *a, g.len());
                for r in 0..g.len() / n.max(1) {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        buf[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = val(*gamma).numel();
                let rows = g.len() / n;
                let gd = val(*gamma).data();
                if rg(*gamma) {
                    let buf = accumulate(grads, *gamma, n);
                    for r in 0..rows {
                        for j in 0..n {
                            buf[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if rg(*beta) {
                    let buf = accumulate(grads, *beta, n);
                    for r in 0..rows {
                        for j in 0..n {
                            buf[j] += g[r * n + j];
                        }
                    }
                }
                if rg(*x) {
                    let buf = accumulate(grads, *x, g.len());
                    let mut dxhat = vec![0.0; n];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gd[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * n + j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            buf[r * n + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * n + j] * m2);
                        }
                    }
                }
            }
            Op::Embedding { table, indices } => {
                let cols = val(*table).shape()[1];
                let buf = accumulate(grads, *table, val(*table).numel());
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..cols {
                        buf[i * cols + j] += g[k * cols + j];
                    }
                }
            }
            Op::Dropout { input, mask } => {
                let buf = accumulate(grads, *input, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * mask[i];
                }
            }
            Op::Custom { op, inputs } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
                let gs = op.backward(&vals, &node.value, g);
                for (&id, gi) in inputs.iter().zip(gs) {
                    if rg(id) {
                        let buf = accumulate(grads, id, gi.len());
                        for (b, v) in buf.iter_mut().zip(&gi) {
                            *b += v;
                        }
                    }
                }
            }
        }
    }

    fn backward_matmul(&self, a: NodeId, b: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let k = sa[sa.len() - 1];
        let m = sa[sa.len() - 2];
        let n = sb[sb.len() - 1];
        let (rga, rgb) = (self.rg(a), self.rg(b));
        if sb.len() == 2 {
            let rows = ta.numel() / k.max(1);
            if rga {
                // dA[rows,k] += dC[rows,n] · Bᵀ
                let buf = accumulate(grads, a, ta.numel());
                gemm(rows, n, k, g, n, 1, tb.data(), 1, n, 1.0, buf);
            }
            if rgb {
                // dB[k,n] += Aᵀ · dC
                let buf = accumulate(grads, b, tb.numel());
                gemm(k, rows, n, ta.data(), 1, k, g, n, 1, 1.0, buf);
            }
        } else {
            let batch = ta.numel() / (m * k).max(1);
            if rga {
                let buf = accumulate(grads, a, ta.numel());
                for bi in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * m * n..],
                        n,
                        1,
                        &tb.data()[bi * k * n..],
                        1,
                        n,
                        1.0,
                        &mut buf[bi * m * k..(bi + 1) * m * k],
                    );
                }
            }
            if rgb {
                let buf = accumulate(grads, b, tb.numel());
                for bi in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &ta.data()[bi * m * k..],
                        1,
                        k,
                        &g[bi * m * n..],
                        n,
                        1,
                        1.0,
                        &mut buf[bi * k * n..(bi + 1) * k * n],
                    );
                }
            }
        }
    }
}
