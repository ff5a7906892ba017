//! Append-only gradient tape.
//!
//! Every operation evaluates eagerly and records its inputs. Because inputs
//! always precede outputs, walking the node list backwards from the loss is a
//! reverse topological order and visits each node once. Gradients accumulate
//! additively, so a tensor used at several call sites (shared text encoder)
//! receives the sum of its contributions.

use super::kernels::{self, dot};
use super::Tensor;
use crate::error::{MbvrError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>),
    L2NormalizeRows(Var),
    RowDot(Var, Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    CrossEntropyRows(Var, Vec<usize>),
    Transpose(Var),
    ConcatCols(Var, Var),
    Reshape(Var),
    SubDiagonal(Var, Var),
    PairAttention(PairAttentionInputs),
}

/// Query/key/value rows of the two tokens attended over by
/// [`Tape::pair_attention`].
#[derive(Debug, Clone, Copy)]
pub struct PairAttentionInputs {
    pub query_a: Var,
    pub key_a: Var,
    pub value_a: Var,
    pub query_b: Var,
    pub key_b: Var,
    pub value_b: Var,
    pub heads: usize,
}

impl PairAttentionInputs {
    fn vars(&self) -> [Var; 6] {
        [
            self.query_a,
            self.key_a,
            self.value_a,
            self.query_b,
            self.key_b,
            self.value_b,
        ]
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf of the tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves that did not participate, or were recorded
    /// as constants, get an all-zero tensor.
    pub fn wrt(&self, var: Var) -> &Tensor {
        self.leaves[var.0]
            .as_ref()
            .expect("gradients are only tracked for leaf variables")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn item(&self, var: Var) -> Result<f64> {
        self.value(var).item()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// A constant copy of `var`: downstream uses see its current value but no
    /// gradient flows back through it.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn out_shape_like(&self, var: Var, data: Vec<f64>) -> Tensor {
        Tensor::from_parts(self.value(var).shape().to_vec(), data)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = self.out_shape_like(a, data);
        self.push(value, op, &[a])
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise op on mismatched shapes");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = self.out_shape_like(a, data);
        self.push(value, op, &[a, b])
    }

    /// `a[n x k] · b[k x m]`; a vector `a` is treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let shape = if self.value(a).shape().len() == 1 {
            vec![m]
        } else {
            vec![n, m]
        };
        self.push(Tensor::from_parts(shape, data), Op::MatMul(a, b), &[a, b])
    }

    /// `a[n x k] · b[m x k]ᵀ`, e.g. all pairwise dot products between rows.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (m, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_tb row lengths differ");
        let data = kernels::matmul_tb(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Tensor::from_parts(vec![n, m], data), Op::MatMulTransB(a, b), &[a, b])
    }

    /// Adds `bias[m]` to every row of `a[n x m]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (_, m) = self.value(a).dims2();
        assert_eq!(self.value(bias).len(), m, "bias length differs from row width");
        let bias_data = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(bias_data).map(|(x, y)| x + y))
            .collect();
        let value = self.out_shape_like(a, data);
        self.push(value, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    /// Row lookup: output row `r` is row `indices[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let (n, d) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < n, "gather index {i} out of range for {n} rows");
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::from_parts(vec![indices.len(), d], data),
            Op::GatherRows(a, indices.to_vec()),
            &[a],
        )
    }

    /// Mean of row segments: output row `s` averages rows
    /// `offsets[s]..offsets[s + 1]`. Segments must be nonempty.
    pub fn segment_mean(&mut self, a: Var, offsets: &[usize]) -> Var {
        let (_, d) = self.value(a).dims2();
        let src = self.value(a).data();
        let segments = offsets.len().saturating_sub(1);
        let mut data = vec![0.0; segments * d];
        for s in 0..segments {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            assert!(hi > lo, "empty segment {s}");
            let out = &mut data[s * d..(s + 1) * d];
            for r in lo..hi {
                for (o, x) in out.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                    *o += x;
                }
            }
            let count = (hi - lo) as f64;
            for o in out.iter_mut() {
                *o /= count;
            }
        }
        self.push(
            Tensor::from_parts(vec![segments, d], data),
            Op::SegmentMean(a, offsets.to_vec()),
            &[a],
        )
    }

    /// Scales every row to unit Euclidean norm. Fails on a zero row.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.value(a).dims2();
        let mut data = self.value(a).data().to_vec();
        for (r, row) in data.chunks_mut(d).enumerate() {
            let nrm = kernels::norm(row);
            if nrm == 0.0 || !nrm.is_finite() {
                return Err(MbvrError::Degenerate(format!(
                    "cannot normalize row {r}: norm is {nrm}"
                )));
            }
            for x in row.iter_mut() {
                *x /= nrm;
            }
        }
        let value = self.out_shape_like(a, data);
        Ok(self.push(value, Op::L2NormalizeRows(a), &[a]))
    }

    /// Row-wise dot products of two equally shaped matrices, `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (n, d) = self.value(a).dims2();
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "row_dot shapes differ");
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|i| dot(&ta[i * d..(i + 1) * d], &tb[i * d..(i + 1) * d]))
            .collect();
        self.push(Tensor::from_parts(vec![n], data), Op::RowDot(a, b), &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(mean), Op::Mean(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (_, d) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for (row, out) in src.chunks(d).zip(data.chunks_mut(d)) {
            kernels::softmax_into(row, out);
        }
        let value = self.out_shape_like(a, data);
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Per-row softmax cross-entropy, `logsumexp(row) - row[target]`, as `[n]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (n, c) = self.value(logits).dims2();
        assert_eq!(targets.len(), n, "one target per row");
        let src = self.value(logits).data();
        let data = (0..n)
            .map(|i| {
                let row = &src[i * c..(i + 1) * c];
                assert!(targets[i] < c, "target out of range");
                kernels::cross_entropy(row, targets[i])
            })
            .collect();
        self.push(
            Tensor::from_parts(vec![n], data),
            Op::CrossEntropyRows(logits, targets.to_vec()),
            &[logits],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, m) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = src[i * m + j];
            }
        }
        self.push(Tensor::from_parts(vec![m, n], data), Op::Transpose(a), &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, p) = self.value(a).dims2();
        let (n2, q) = self.value(b).dims2();
        assert_eq!(n, n2, "concat_cols row counts differ");
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(&ta[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb[i * q..(i + 1) * q]);
        }
        self.push(Tensor::from_parts(vec![n, p + q], data), Op::ConcatCols(a, b), &[a, b])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let len = self.value(a).len();
        assert_eq!(shape.iter().product::<usize>(), len, "reshape changes size");
        let data = self.value(a).data().to_vec();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), &[a])
    }

    /// `a - diag(diagonal)` for a square `a`.
    pub fn sub_diagonal(&mut self, a: Var, diagonal: Var) -> Var {
        let (n, m) = self.value(a).dims2();
        assert_eq!(n, m, "sub_diagonal needs a square matrix");
        assert_eq!(self.value(diagonal).len(), n, "diagonal length differs");
        let mut data = self.value(a).data().to_vec();
        for (i, &x) in self.value(diagonal).data().iter().enumerate() {
            data[i * n + i] -= x;
        }
        let value = self.out_shape_like(a, data);
        self.push(value, Op::SubDiagonal(a, diagonal), &[a, diagonal])
    }

    /// Multi-head self-attention over a two-token sequence `(a, b)` per row,
    /// followed by average pooling of the two output tokens. Output is `[n, d]`.
    ///
    /// The computation is exactly symmetric: swapping the roles of `a` and `b`
    /// yields a bitwise-identical result.
    pub fn pair_attention(&mut self, inputs: PairAttentionInputs) -> Var {
        let vars = inputs.vars();
        let (n, d) = self.value(inputs.query_a).dims2();
        for v in vars {
            assert_eq!(self.value(v).dims2(), (n, d), "pair_attention input shapes differ");
        }
        assert!(inputs.heads > 0 && d % inputs.heads == 0, "heads must divide d");
        let [qa, ka, va, qb, kb, vb] = vars.map(|v| self.value(v).data());
        let head_dim = d / inputs.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            for h in 0..inputs.heads {
                let span = i * d + h * head_dim..i * d + (h + 1) * head_dim;
                let w = PairWeights::compute(
                    [
                        &qa[span.clone()],
                        &ka[span.clone()],
                        &qb[span.clone()],
                        &kb[span.clone()],
                    ],
                    scale,
                );
                for c in span {
                    data[c] = 0.5 * ((w.aa * va[c] + w.ab * vb[c]) + (w.ba * va[c] + w.bb * vb[c]));
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, d], data), Op::PairAttention(inputs), &vars)
    }

    /// Attention weights `[[a→a, a→b], [b→a, b→b]]` per row and head, as used by
    /// [`Tape::pair_attention`]. Each token's pair of weights sums to one.
    pub fn pair_attention_weights(&self, inputs: &PairAttentionInputs) -> Vec<[[f64; 2]; 2]> {
        let (n, d) = self.value(inputs.query_a).dims2();
        let head_dim = d / inputs.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let [qa, ka, _, qb, kb, _] = inputs.vars().map(|v| self.value(v).data());
        let mut out = Vec::with_capacity(n * inputs.heads);
        for i in 0..n {
            for h in 0..inputs.heads {
                let span = i * d + h * head_dim..i * d + (h + 1) * head_dim;
                let w = PairWeights::compute(
                    [&qa[span.clone()], &ka[span.clone()], &qb[span.clone()], &kb[span]],
                    scale,
                );
                out.push([[w.aa, w.ab], [w.ba, w.bb]]);
            }
        }
        out
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(MbvrError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                let data = grads[idx]
                    .take()
                    .filter(|_| node.requires_grad)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                leaves[idx] = Some(Tensor::from_parts(node.value.shape().to_vec(), data));
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && leaves[idx].is_none() {
                leaves[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { leaves })
    }

    /// Gradients of `loss` for each of `params`, in order.
    pub fn gradients(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward(loss)?;
        Ok(params.iter().map(|&p| grads.wrt(p).clone()).collect())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.len()]);
            f(slot);
        };
        let add_into = |dst: &mut [f64], src: &[f64]| {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        };
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.nodes[a.0].value.dims2();
                let m = self.nodes[b.0].value.cols();
                acc(*a, &mut |da| add_into(da, &kernels::matmul_tb(g, val(*b), n, m, k)));
                acc(*b, &mut |db| add_into(db, &kernels::matmul_ta(val(*a), g, n, k, m)));
            }
            Op::MatMulTransB(a, b) => {
                let (n, k) = self.nodes[a.0].value.dims2();
                let m = self.nodes[b.0].value.rows();
                acc(*a, &mut |da| add_into(da, &kernels::matmul(g, val(*b), n, m, k)));
                acc(*b, &mut |db| add_into(db, &kernels::matmul_ta(g, val(*a), n, m, k)));
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |da| add_into(da, g));
                let m = self.nodes[bias.0].value.len();
                acc(*bias, &mut |db| {
                    for row in g.chunks(m) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for (d, s) in db.iter_mut().zip(g) {
                        *d -= s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(xb) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(xa) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += c * gi;
                }
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |da| {
                    for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                })
            }
            Op::Tanh(a) => acc(*a, &mut |da| {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out) {
                    *d += gi * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |da| {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (1.0 - y);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |da| {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out) {
                    *d += gi * y;
                }
            }),
            Op::Ln(a) => {
                let x = val(*a);
                acc(*a, &mut |da| {
                    for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                })
            }
            Op::GatherRows(a, indices) => {
                let d = self.nodes[a.0].value.cols();
                acc(*a, &mut |da| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut da[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                })
            }
            Op::SegmentMean(a, offsets) => {
                let d = self.nodes[a.0].value.cols();
                acc(*a, &mut |da| {
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        let inv = 1.0 / (hi - lo) as f64;
                        let gs = &g[s * d..(s + 1) * d];
                        for r in lo..hi {
                            for (dst, gi) in da[r * d..(r + 1) * d].iter_mut().zip(gs) {
                                *dst += gi * inv;
                            }
                        }
                    }
                })
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let d = self.nodes[a.0].value.cols();
                acc(*a, &mut |da| {
                    for r in 0..x.len() / d {
                        let span = r * d..(r + 1) * d;
                        let nrm = kernels::norm(&x[span.clone()]);
                        let y = &out[span.clone()];
                        let gy = &g[span.clone()];
                        let proj = dot(y, gy);
                        for ((dst, gi), yi) in da[span].iter_mut().zip(gy).zip(y) {
                            *dst += (gi - yi * proj) / nrm;
                        }
                    }
                })
            }
            Op::RowDot(a, b) => {
                let d = self.nodes[a.0].value.cols();
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |da| {
                    for (i, gi) in g.iter().enumerate() {
                        for c in i * d..(i + 1) * d {
                            da[c] += gi * xb[c];
                        }
                    }
                });
                acc(*b, &mut |db| {
                    for (i, gi) in g.iter().enumerate() {
                        for c in i * d..(i + 1) * d {
                            db[c] += gi * xa[c];
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |da| {
                for dst in da.iter_mut() {
                    *dst += g[0];
                }
            }),
            Op::Mean(a) => acc(*a, &mut |da| {
                let share = g[0] / da.len() as f64;
                for dst in da.iter_mut() {
                    *dst += share;
                }
            }),
            Op::SoftmaxRows(a) => {
                let d = self.nodes[a.0].value.cols();
                acc(*a, &mut |da| {
                    for r in 0..out.len() / d {
                        let span = r * d..(r + 1) * d;
                        let y = &out[span.clone()];
                        let gy = &g[span.clone()];
                        let inner = dot(y, gy);
                        for ((dst, gi), yi) in da[span].iter_mut().zip(gy).zip(y) {
                            *dst += yi * (gi - inner);
                        }
                    }
                })
            }
            Op::CrossEntropyRows(a, targets) => {
                let c = self.nodes[a.0].value.cols();
                let x = val(*a);
                acc(*a, &mut |da| {
                    let mut probs = vec![0.0; c];
                    for (i, &t) in targets.iter().enumerate() {
                        kernels::softmax_into(&x[i * c..(i + 1) * c], &mut probs);
                        probs[t] -= 1.0;
                        for (dst, p) in da[i * c..(i + 1) * c].iter_mut().zip(&probs) {
                            *dst += g[i] * p;
                        }
                    }
                })
            }
            Op::Transpose(a) => {
                let (n, m) = self.nodes[a.0].value.dims2();
                acc(*a, &mut |da| {
                    for i in 0..n {
                        for j in 0..m {
                            da[i * m + j] += g[j * n + i];
                        }
                    }
                })
            }
            Op::ConcatCols(a, b) => {
                let p = self.nodes[a.0].value.cols();
                let q = self.nodes[b.0].value.cols();
                acc(*a, &mut |da| {
                    for (i, row) in da.chunks_mut(p).enumerate() {
                        add_into(row, &g[i * (p + q)..i * (p + q) + p]);
                    }
                });
                acc(*b, &mut |db| {
                    for (i, row) in db.chunks_mut(q).enumerate() {
                        add_into(row, &g[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                });
            }
            Op::SubDiagonal(a, diagonal) => {
                let n = self.nodes[diagonal.0].value.len();
                acc(*a, &mut |da| add_into(da, g));
                acc(*diagonal, &mut |dd| {
                    for (i, dst) in dd.iter_mut().enumerate() {
                        *dst -= g[i * n + i];
                    }
                });
            }
            Op::PairAttention(inputs) => {
                let pa = self.pair_attention_backward(inputs, g);
                for (v, grad) in inputs.vars().into_iter().zip(pa) {
                    acc(v, &mut |dv| add_into(dv, &grad));
                }
            }
        }
    }

    fn pair_attention_backward(&self, inputs: &PairAttentionInputs, g: &[f64]) -> [Vec<f64>; 6] {
        let (n, d) = self.value(inputs.query_a).dims2();
        let head_dim = d / inputs.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let [qa, ka, va, qb, kb, vb] = inputs.vars().map(|v| self.value(v).data());
        let mut grads: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n * d]);

        for i in 0..n {
            for h in 0..inputs.heads {
                let span = i * d + h * head_dim..i * d + (h + 1) * head_dim;
                let w = PairWeights::compute(
                    [
                        &qa[span.clone()],
                        &ka[span.clone()],
                        &qb[span.clone()],
                        &kb[span.clone()],
                    ],
                    scale,
                );
                // Each token output receives half of the pooled gradient.
                let mut dw = [0.0; 4]; // aa, ab, ba, bb
                for c in span.clone() {
                    let gc = 0.5 * g[c];
                    dw[0] += gc * va[c];
                    dw[1] += gc * vb[c];
                    dw[2] += gc * va[c];
                    dw[3] += gc * vb[c];
                    grads[2][c] += (w.aa + w.ba) * gc;
                    grads[5][c] += (w.ab + w.bb) * gc;
                }
                // Softmax backward for token a (aa, ab) and token b (ba, bb).
                let inner_a = w.aa * dw[0] + w.ab * dw[1];
                let inner_b = w.ba * dw[2] + w.bb * dw[3];
                let ds_aa = w.aa * (dw[0] - inner_a) * scale;
                let ds_ab = w.ab * (dw[1] - inner_a) * scale;
                let ds_ba = w.ba * (dw[2] - inner_b) * scale;
                let ds_bb = w.bb * (dw[3] - inner_b) * scale;
                for c in span {
                    grads[0][c] += ds_aa * ka[c] + ds_ab * kb[c];
                    grads[3][c] += ds_ba * ka[c] + ds_bb * kb[c];
                    grads[1][c] += ds_aa * qa[c] + ds_ba * qb[c];
                    grads[4][c] += ds_ab * qa[c] + ds_bb * qb[c];
                }
            }
        }
        grads
    }
}

struct PairWeights {
    aa: f64,
    ab: f64,
    ba: f64,
    bb: f64,
}

impl PairWeights {
    fn compute([qa, ka, qb, kb]: [&[f64]; 4], scale: f64) -> Self {
        let (aa, ab) = kernels::softmax2(dot(qa, ka) * scale, dot(qa, kb) * scale);
        let (ba, bb) = kernels::softmax2(dot(qb, ka) * scale, dot(qb, kb) * scale);
        PairWeights { aa, ab, ba, bb }
    }
}
