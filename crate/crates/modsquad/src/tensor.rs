//! Dense f64 tensor engine with reverse-mode differentiation.
//!
//! Graphs are define-by-run: every op evaluates eagerly when appended, so
//! callers can inspect intermediate values (e.g. realized gate selections)
//! while building the step's graph. Backward walks the node list in strict
//! reverse append order exactly once, accumulating gradients additively.

use crate::error::NumericsError;

/// Dense row-major f64 tensor. Mostly 2-D in practice ([rows x cols]).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor shape {:?} implies {} elements, data has {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1, 1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let n = if m == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            assert_eq!(r.len(), n, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor { shape: vec![m, n], data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        assert!(self.shape.len() == 2, "expected 2-D tensor, got shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert!(self.shape.len() == 2, "expected 2-D tensor, got shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

enum Op {
    Leaf,
    MatMul,
    Add,
    /// b is [1 x n], broadcast over rows of a.
    AddRow,
    /// b is [1 x n], elementwise per row of a.
    MulRow,
    Mul,
    Scale(f64),
    Gelu,
    Softplus,
    Exp,
    Log,
    LayerNorm {
        inv_std: Vec<f64>,
    },
    Softmax,
    /// Zero all but the k largest entries per row (ties: lowest index wins).
    /// `allowed`, when set, excludes columns from selection entirely.
    TopKMask {
        kept: Vec<bool>,
    },
    /// Each row divided by its sum.
    NormalizeRows {
        sums: Vec<f64>,
    },
    RowGather {
        idx: Vec<usize>,
    },
    RowScatterAdd {
        idx: Vec<usize>,
    },
    /// Extract column `col` at the given rows as an [len x 1] tensor.
    ColGather {
        col: usize,
        rows: Vec<usize>,
    },
    /// a [m x n] scaled per row by b [m x 1].
    MulColBroadcast,
    SumAll,
    SumAxis0,
    /// Mean over consecutive groups of `group` rows.
    MeanPool {
        group: usize,
    },
    ConcatRows {
        row_offsets: Vec<usize>,
    },
    SliceRows {
        start: usize,
    },
    /// Scaled dot-product attention over sequences of fixed length.
    /// Inputs Q, K, V are [S*L x d]; saves the attention matrices.
    AttnCore {
        seq_len: usize,
        scale: f64,
        attn: Vec<f64>,
    },
    /// Mutual information I(T;E) from conditional rows P(E|T) under a
    /// uniform task prior. Input [M x N], rows summing to 1.
    MutualInfoUniform,
    /// Squared coefficient of variation of a [1 x n] vector.
    CvSquared,
    /// Mean cross-entropy of logits [B x C] against integer labels.
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    inputs: Vec<TensorId>,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Append-only op tape. One graph per training step; confined to one worker.
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(value: &Tensor, what: &str) {
    debug_assert!(
        value.data.iter().all(|v| v.is_finite()),
        "non-finite output of {what}"
    );
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), backward_done: false }
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward() target w.r.t. this node, if computed.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, inputs: Vec<TensorId>, value: Tensor) -> TensorId {
        let requires_grad = match op {
            Op::Leaf => false, // set by leaf()
            _ => inputs.iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node { op, inputs, value, grad: None, requires_grad });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            grad: None,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            ta.cols(),
            tb.rows(),
            "matmul dimension mismatch: {:?} x {:?}",
            ta.shape,
            tb.shape
        );
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let arow = &ta.data[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &tb.data[p * n..(p + 1) * n];
                for (cj, &bj) in crow.iter_mut().zip(brow) {
                    *cj += av * bj;
                }
            }
        }
        let out = Tensor::new(vec![m, n], c);
        check_finite(&out, "matmul");
        self.push(Op::MatMul, vec![a, b], out)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "add shape mismatch: {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        self.push(Op::Add, vec![a, b], out)
    }

    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            tb.rows() == 1 && tb.cols() == ta.cols(),
            "add_row shape mismatch: {:?} vs {:?}",
            ta.shape,
            tb.shape
        );
        let n = ta.cols();
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(&tb.data) {
                *x += y;
            }
        }
        let out = Tensor::new(ta.shape.clone(), data);
        self.push(Op::AddRow, vec![a, b], out)
    }

    pub fn mul_row(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            tb.rows() == 1 && tb.cols() == ta.cols(),
            "mul_row shape mismatch: {:?} vs {:?}",
            ta.shape,
            tb.shape
        );
        let n = ta.cols();
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(n) {
            for (x, &y) in chunk.iter_mut().zip(&tb.data) {
                *x *= y;
            }
        }
        let out = Tensor::new(ta.shape.clone(), data);
        self.push(Op::MulRow, vec![a, b], out)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch: {:?} vs {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        self.push(Op::Mul, vec![a, b], out)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| c * x).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        self.push(Op::Scale(c), vec![a], out)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        check_finite(&out, "gelu");
        self.push(Op::Gelu, vec![a], out)
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|&x| softplus(x)).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        check_finite(&out, "softplus");
        self.push(Op::Softplus, vec![a], out)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let data = ta.data.iter().map(|x| x.exp()).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        check_finite(&out, "exp");
        self.push(Op::Exp, vec![a], out)
    }

    /// Natural log. Callers guard zero/negative inputs.
    pub fn log(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        assert!(
            ta.data.iter().all(|&x| x > 0.0),
            "log domain error: nonpositive input"
        );
        let data = ta.data.iter().map(|x| x.ln()).collect();
        let out = Tensor::new(ta.shape.clone(), data);
        self.push(Op::Log, vec![a], out)
    }

    pub fn layer_norm(&mut self, a: TensorId, eps: f64) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = ta.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * is;
            }
        }
        let out = Tensor::new(vec![m, n], data);
        check_finite(&out, "layer_norm");
        self.push(Op::LayerNorm { inv_std }, vec![a], out)
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = ta.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let out = Tensor::new(vec![m, n], data);
        check_finite(&out, "softmax");
        self.push(Op::Softmax, vec![a], out)
    }

    /// Keep the k largest entries per row, zero the rest. Ties at the k-th
    /// position are broken toward the lowest column index. Columns with
    /// `allowed[j] == false` are zeroed and never selected. Gradients pass
    /// only through surviving positions.
    pub fn topk_mask(&mut self, a: TensorId, k: usize, allowed: Option<&[bool]>) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert!(k >= 1 && k <= n, "topk_mask: k={k} out of range for {n} columns");
        if let Some(al) = allowed {
            assert_eq!(al.len(), n, "topk_mask: allowed mask length mismatch");
        }
        let mut data = vec![0.0; m * n];
        let mut kept = vec![false; m * n];
        let mut order: Vec<usize> = Vec::with_capacity(n);
        for i in 0..m {
            let row = ta.row(i);
            order.clear();
            order.extend((0..n).filter(|&j| allowed.map_or(true, |al| al[j])));
            // stable sort by value descending keeps lowest index first on ties
            order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap());
            for &j in order.iter().take(k) {
                data[i * n + j] = row[j];
                kept[i * n + j] = true;
            }
        }
        let out = Tensor::new(vec![m, n], data);
        self.push(Op::TopKMask { kept }, vec![a], out)
    }

    /// Divide each row by its sum.
    pub fn normalize_rows(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; m * n];
        let mut sums = vec![0.0; m];
        for i in 0..m {
            let s: f64 = ta.row(i).iter().sum();
            assert!(s > 0.0, "normalize_rows: row {i} has nonpositive sum {s}");
            sums[i] = s;
            for j in 0..n {
                data[i * n + j] = ta.data[i * n + j] / s;
            }
        }
        let out = Tensor::new(vec![m, n], data);
        self.push(Op::NormalizeRows { sums }, vec![a], out)
    }

    pub fn row_gather(&mut self, a: TensorId, idx: &[usize]) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let n = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(vec![idx.len(), n], data);
        self.push(Op::RowGather { idx: idx.to_vec() }, vec![a], out)
    }

    /// Scatter-add rows of `a` into a zero tensor of `out_rows` rows.
    pub fn row_scatter_add(&mut self, a: TensorId, idx: &[usize], out_rows: usize) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let n = ta.cols();
        assert_eq!(idx.len(), ta.rows(), "row_scatter_add: index count mismatch");
        let mut data = vec![0.0; out_rows * n];
        for (r, &i) in idx.iter().enumerate() {
            let src = ta.row(r);
            let dst = &mut data[i * n..(i + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        let out = Tensor::new(vec![out_rows, n], data);
        self.push(Op::RowScatterAdd { idx: idx.to_vec() }, vec![a], out)
    }

    pub fn col_gather(&mut self, a: TensorId, col: usize, rows: &[usize]) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let n = ta.cols();
        assert!(col < n, "col_gather: column {col} out of range for {n}");
        let data: Vec<f64> = rows.iter().map(|&r| ta.data[r * n + col]).collect();
        let out = Tensor::new(vec![rows.len(), 1], data);
        self.push(Op::ColGather { col, rows: rows.to_vec() }, vec![a], out)
    }

    /// Multiply each row of a [m x n] by the matching entry of b [m x 1].
    pub fn mul_col_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            tb.cols() == 1 && tb.rows() == ta.rows(),
            "mul_col_broadcast shape mismatch: {:?} vs {:?}",
            ta.shape,
            tb.shape
        );
        let n = ta.cols();
        let mut data = ta.data.clone();
        for (i, chunk) in data.chunks_mut(n).enumerate() {
            let c = tb.data[i];
            for x in chunk.iter_mut() {
                *x *= c;
            }
        }
        let out = Tensor::new(ta.shape.clone(), data);
        self.push(Op::MulColBroadcast, vec![a, b], out)
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::SumAll, vec![a], Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums: [m x n] -> [1 x n].
    pub fn sum_axis0(&mut self, a: TensorId) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let n = ta.cols();
        let mut data = vec![0.0; n];
        for chunk in ta.data.chunks(n) {
            for (d, &x) in data.iter_mut().zip(chunk) {
                *d += x;
            }
        }
        let out = Tensor::new(vec![1, n], data);
        self.push(Op::SumAxis0, vec![a], out)
    }

    /// Mean over consecutive groups of `group` rows: [g*B x n] -> [B x n].
    pub fn mean_pool(&mut self, a: TensorId, group: usize) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert!(group >= 1 && m % group == 0, "mean_pool: {m} rows not divisible by group {group}");
        let b = m / group;
        let mut data = vec![0.0; b * n];
        for i in 0..m {
            let dst = &mut data[(i / group) * n..(i / group + 1) * n];
            for (d, &x) in dst.iter_mut().zip(ta.row(i)) {
                *d += x / group as f64;
            }
        }
        let out = Tensor::new(vec![b, n], data);
        self.push(Op::MeanPool { group }, vec![a], out)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let n = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut row_offsets = Vec::with_capacity(parts.len());
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), n, "concat_rows: column mismatch {:?}", t.shape);
            row_offsets.push(rows);
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let out = Tensor::new(vec![rows, n], data);
        self.push(Op::ConcatRows { row_offsets }, parts.to_vec(), out)
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert!(start + len <= m, "slice_rows: range {start}..{} out of {m} rows", start + len);
        let data = ta.data[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data);
        self.push(Op::SliceRows { start }, vec![a], out)
    }

    /// Single-head scaled dot-product attention over sequences of length
    /// `seq_len`: softmax(Q K^T * scale) V, applied per sequence.
    pub fn attn_core(&mut self, q: TensorId, k: TensorId, v: TensorId, seq_len: usize, scale: f64) -> TensorId {
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        assert_eq!(tq.shape, tk.shape, "attn_core: Q/K shape mismatch");
        assert_eq!(tq.shape, tv.shape, "attn_core: Q/V shape mismatch");
        let (m, d) = (tq.rows(), tq.cols());
        assert!(seq_len >= 1 && m % seq_len == 0, "attn_core: {m} rows not divisible by seq_len {seq_len}");
        let seqs = m / seq_len;
        let l = seq_len;
        let mut attn = vec![0.0; seqs * l * l];
        let mut data = vec![0.0; m * d];
        for s in 0..seqs {
            let base = s * l;
            let a = &mut attn[s * l * l..(s + 1) * l * l];
            for i in 0..l {
                let qi = tq.row(base + i);
                let arow = &mut a[i * l..(i + 1) * l];
                let mut max = f64::NEG_INFINITY;
                for (j, aj) in arow.iter_mut().enumerate() {
                    let kj = tk.row(base + j);
                    let dot: f64 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                    *aj = dot * scale;
                    max = max.max(*aj);
                }
                let mut sum = 0.0;
                for aj in arow.iter_mut() {
                    *aj = (*aj - max).exp();
                    sum += *aj;
                }
                for aj in arow.iter_mut() {
                    *aj /= sum;
                }
                let yrow = &mut data[(base + i) * d..(base + i + 1) * d];
                for (j, &w) in arow.iter().enumerate() {
                    let vj = tv.row(base + j);
                    for (y, &x) in yrow.iter_mut().zip(vj) {
                        *y += w * x;
                    }
                }
            }
        }
        let out = Tensor::new(vec![m, d], data);
        check_finite(&out, "attn_core");
        self.push(Op::AttnCore { seq_len, scale, attn }, vec![q, k, v], out)
    }

    /// I(T;E) from conditional rows P(E|T) with a uniform task prior.
    /// Input [M x N] with rows summing to 1; output scalar in nats.
    pub fn mutual_info_uniform(&mut self, conds: TensorId) -> TensorId {
        let t = &self.nodes[conds.0].value;
        let (m, n) = (t.rows(), t.cols());
        let mut col_sums = vec![0.0; n];
        for chunk in t.data.chunks(n) {
            for (s, &x) in col_sums.iter_mut().zip(chunk) {
                *s += x;
            }
        }
        let mf = m as f64;
        let mut mi = 0.0;
        for chunk in t.data.chunks(n) {
            for (j, &c) in chunk.iter().enumerate() {
                if c > 0.0 {
                    mi += c * (mf * c / col_sums[j]).ln();
                }
            }
        }
        mi /= mf;
        self.push(Op::MutualInfoUniform, vec![conds], Tensor::scalar(mi))
    }

    /// Squared coefficient of variation (var / mean^2) of a [1 x n] vector.
    pub fn cv_squared(&mut self, a: TensorId) -> TensorId {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.rows(), 1, "cv_squared expects a [1 x n] tensor, got {:?}", t.shape);
        let n = t.cols() as f64;
        let mean = t.data.iter().sum::<f64>() / n;
        let var = t.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let v = if mean.abs() < 1e-300 { 0.0 } else { var / (mean * mean) };
        self.push(Op::CvSquared, vec![a], Tensor::scalar(v))
    }

    /// Mean cross-entropy of logits [B x C] against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> TensorId {
        let t = &self.nodes[logits.0].value;
        let (b, c) = (t.rows(), t.cols());
        assert_eq!(labels.len(), b, "softmax_cross_entropy: label count mismatch");
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                probs[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                probs[i * c + j] /= sum;
            }
            assert!(labels[i] < c, "softmax_cross_entropy: label {} out of {c} classes", labels[i]);
            loss -= probs[i * c + labels[i]].max(1e-300).ln();
        }
        loss /= b as f64;
        self.push(
            Op::SoftmaxCrossEntropy { labels: labels.to_vec(), probs },
            vec![logits],
            Tensor::scalar(loss),
        )
    }

    /// Populate gradients of `loss` w.r.t. every requires_grad node.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::BackwardAlreadyRun);
        }
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(NumericsError::NonScalarLoss { shape: lt.shape.clone() });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            self.step_backward(i);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: TensorId) -> &mut Vec<f64> {
        let numel = self.nodes[id.0].value.numel();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel])
    }

    fn step_backward(&mut self, i: usize) {
        // Clone the node's grad so we can mutate input grads freely while
        // keeping it queryable after backward.
        let g = self.nodes[i].grad.clone().unwrap();
        let inputs = self.nodes[i].inputs.clone();
        let need: Vec<bool> = inputs.iter().map(|&id| self.nodes[id.0].requires_grad).collect();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                if need[0] {
                    // dA = dC . B^T
                    let bdata = self.nodes[b.0].value.data.clone();
                    let ga = self.ensure_grad(a);
                    for i2 in 0..m {
                        let grow = &g[i2 * n..(i2 + 1) * n];
                        let garow = &mut ga[i2 * k..(i2 + 1) * k];
                        for (p, gap) in garow.iter_mut().enumerate() {
                            let brow = &bdata[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for (x, y) in grow.iter().zip(brow) {
                                acc += x * y;
                            }
                            *gap += acc;
                        }
                    }
                }
                if need[1] {
                    // dB = A^T . dC
                    let adata = self.nodes[a.0].value.data.clone();
                    let gb = self.ensure_grad(b);
                    for i2 in 0..m {
                        let grow = &g[i2 * n..(i2 + 1) * n];
                        let arow = &adata[i2 * k..(i2 + 1) * k];
                        for (p, &ap) in arow.iter().enumerate() {
                            if ap == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (d, &x) in gbrow.iter_mut().zip(grow) {
                                *d += ap * x;
                            }
                        }
                    }
                }
            }
            Op::Add => {
                for (&inp, &nd) in inputs.iter().zip(&need) {
                    if nd {
                        let gi = self.ensure_grad(inp);
                        for (d, &x) in gi.iter_mut().zip(&g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::AddRow => {
                let n = self.nodes[inputs[1].0].value.cols();
                if need[0] {
                    let ga = self.ensure_grad(inputs[0]);
                    for (d, &x) in ga.iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                if need[1] {
                    let gb = self.ensure_grad(inputs[1]);
                    for chunk in g.chunks(n) {
                        for (d, &x) in gb.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MulRow => {
                let n = self.nodes[inputs[1].0].value.cols();
                if need[0] {
                    let bdata = self.nodes[inputs[1].0].value.data.clone();
                    let ga = self.ensure_grad(inputs[0]);
                    for (chunk, gchunk) in ga.chunks_mut(n).zip(g.chunks(n)) {
                        for ((d, &gx), &bx) in chunk.iter_mut().zip(gchunk).zip(&bdata) {
                            *d += gx * bx;
                        }
                    }
                }
                if need[1] {
                    let adata = self.nodes[inputs[0].0].value.data.clone();
                    let gb = self.ensure_grad(inputs[1]);
                    for (achunk, gchunk) in adata.chunks(n).zip(g.chunks(n)) {
                        for ((d, &gx), &ax) in gb.iter_mut().zip(gchunk).zip(achunk) {
                            *d += gx * ax;
                        }
                    }
                }
            }
            Op::Mul => {
                if need[0] {
                    let bdata = self.nodes[inputs[1].0].value.data.clone();
                    let ga = self.ensure_grad(inputs[0]);
                    for ((d, &gx), &bx) in ga.iter_mut().zip(&g).zip(&bdata) {
                        *d += gx * bx;
                    }
                }
                if need[1] {
                    let adata = self.nodes[inputs[0].0].value.data.clone();
                    let gb = self.ensure_grad(inputs[1]);
                    for ((d, &gx), &ax) in gb.iter_mut().zip(&g).zip(&adata) {
                        *d += gx * ax;
                    }
                }
            }
            Op::Scale(c) => {
                let c = *c;
                if need[0] {
                    let ga = self.ensure_grad(inputs[0]);
                    for (d, &x) in ga.iter_mut().zip(&g) {
                        *d += c * x;
                    }
                }
            }
            Op::Gelu => {
                if need[0] {
                    let xdata = self.nodes[inputs[0].0].value.data.clone();
                    let ga = self.ensure_grad(inputs[0]);
                    for ((d, &gx), &x) in ga.iter_mut().zip(&g).zip(&xdata) {
                        *d += gx * gelu_grad(x);
                    }
                }
            }
            Op::Softplus => {
                if need[0] {
                    let xdata = self.nodes[inputs[0].0].value.data.clone();
                    let ga = self.ensure_grad(inputs[0]);
                    for ((d, &gx), &x) in ga.iter_mut().zip(&g).zip(&xdata) {
                        *d += gx * sigmoid(x);
                    }
                }
            }
            Op::Exp => {
                if need[0] {
                    let ydata = self.nodes[i].value.data.clone();
                    let ga = self.ensure_grad(inputs[0]);
                    for ((d, &gx), &y) in ga.iter_mut().zip(&g).zip(&ydata) {
                        *d += gx * y;
                    }
                }
            }
            Op::Log => {
                if need[0] {
                    let xdata = self.nodes[inputs[0].0].value.data.clone();
                    let ga = self.ensure_grad(inputs[0]);
                    for ((d, &gx), &x) in ga.iter_mut().zip(&g).zip(&xdata) {
                        *d += gx / x;
                    }
                }
            }
            Op::LayerNorm { inv_std } => {
                if need[0] {
                    let inv_std = inv_std.clone();
                    let ydata = self.nodes[i].value.data.clone();
                    let n = self.nodes[i].value.cols();
                    let ga = self.ensure_grad(inputs[0]);
                    for (r, (gchunk, ychunk)) in g.chunks(n).zip(ydata.chunks(n)).enumerate() {
                        let mean_g: f64 = gchunk.iter().sum::<f64>() / n as f64;
                        let mean_gy: f64 =
                            gchunk.iter().zip(ychunk).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let dst = &mut ga[r * n..(r + 1) * n];
                        for ((d, &gx), &y) in dst.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += inv_std[r] * (gx - mean_g - y * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax => {
                if need[0] {
                    let ydata = self.nodes[i].value.data.clone();
                    let n = self.nodes[i].value.cols();
                    let ga = self.ensure_grad(inputs[0]);
                    for (r, (gchunk, ychunk)) in g.chunks(n).zip(ydata.chunks(n)).enumerate() {
                        let dot: f64 = gchunk.iter().zip(ychunk).map(|(a, b)| a * b).sum();
                        let dst = &mut ga[r * n..(r + 1) * n];
                        for ((d, &gx), &y) in dst.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += y * (gx - dot);
                        }
                    }
                }
            }
            Op::TopKMask { kept } => {
                if need[0] {
                    let kept = kept.clone();
                    let ga = self.ensure_grad(inputs[0]);
                    for ((d, &gx), &kp) in ga.iter_mut().zip(&g).zip(&kept) {
                        if kp {
                            *d += gx;
                        }
                    }
                }
            }
            Op::NormalizeRows { sums } => {
                if need[0] {
                    let sums = sums.clone();
                    let ydata = self.nodes[i].value.data.clone();
                    let n = self.nodes[i].value.cols();
                    let ga = self.ensure_grad(inputs[0]);
                    for (r, (gchunk, ychunk)) in g.chunks(n).zip(ydata.chunks(n)).enumerate() {
                        let dot: f64 = gchunk.iter().zip(ychunk).map(|(a, b)| a * b).sum();
                        let dst = &mut ga[r * n..(r + 1) * n];
                        for (d, &gx) in dst.iter_mut().zip(gchunk) {
                            *d += (gx - dot) / sums[r];
                        }
                    }
                }
            }
            Op::RowGather { idx } => {
                if need[0] {
                    let idx = idx.clone();
                    let n = self.nodes[i].value.cols();
                    let ga = self.ensure_grad(inputs[0]);
                    for (r, &src_row) in idx.iter().enumerate() {
                        let gsrc = &g[r * n..(r + 1) * n];
                        let dst = &mut ga[src_row * n..(src_row + 1) * n];
                        for (d, &x) in dst.iter_mut().zip(gsrc) {
                            *d += x;
                        }
                    }
                }
            }
            Op::RowScatterAdd { idx } => {
                if need[0] {
                    let idx = idx.clone();
                    let n = self.nodes[i].value.cols();
                    let ga = self.ensure_grad(inputs[0]);
                    for (r, &dst_row) in idx.iter().enumerate() {
                        let gsrc = &g[dst_row * n..(dst_row + 1) * n];
                        let dst = &mut ga[r * n..(r + 1) * n];
                        for (d, &x) in dst.iter_mut().zip(gsrc) {
                            *d += x;
                        }
                    }
                }
            }
            Op::ColGather { col, rows } => {
                if need[0] {
                    let (col, rows) = (*col, rows.clone());
                    let n = self.nodes[inputs[0].0].value.cols();
                    let ga = self.ensure_grad(inputs[0]);
                    for (r, &src_row) in rows.iter().enumerate() {
                        ga[src_row * n + col] += g[r];
                    }
                }
            }
            Op::MulColBroadcast => {
                let n = self.nodes[inputs[0].0].value.cols();
                if need[0] {
                    let bdata = self.nodes[inputs[1].0].value.data.clone();
                    let ga = self.ensure_grad(inputs[0]);
                    for (r, (chunk, gchunk)) in ga.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        for (d, &gx) in chunk.iter_mut().zip(gchunk) {
                            *d += gx * bdata[r];
                        }
                    }
                }
                if need[1] {
                    let adata = self.nodes[inputs[0].0].value.data.clone();
                    let gb = self.ensure_grad(inputs[1]);
                    for (r, (achunk, gchunk)) in adata.chunks(n).zip(g.chunks(n)).enumerate() {
                        gb[r] += achunk.iter().zip(gchunk).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::SumAll => {
                if need[0] {
                    let gx = g[0];
                    let ga = self.ensure_grad(inputs[0]);
                    for d in ga.iter_mut() {
                        *d += gx;
                    }
                }
            }
            Op::SumAxis0 => {
                if need[0] {
                    let n = self.nodes[i].value.cols();
                    let ga = self.ensure_grad(inputs[0]);
                    for chunk in ga.chunks_mut(n) {
                        for (d, &x) in chunk.iter_mut().zip(&g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::MeanPool { group } => {
                if need[0] {
                    let group = *group;
                    let n = self.nodes[i].value.cols();
                    let ga = self.ensure_grad(inputs[0]);
                    let scale = 1.0 / group as f64;
                    for (r, chunk) in ga.chunks_mut(n).enumerate() {
                        let gsrc = &g[(r / group) * n..(r / group + 1) * n];
                        for (d, &x) in chunk.iter_mut().zip(gsrc) {
                            *d += x * scale;
                        }
                    }
                }
            }
            Op::ConcatRows { row_offsets } => {
                let row_offsets = row_offsets.clone();
                let n = self.nodes[i].value.cols();
                for (p, (&inp, &nd)) in inputs.iter().zip(&need).enumerate() {
                    if nd {
                        let off = row_offsets[p];
                        let rows = self.nodes[inp.0].value.rows();
                        let gi = self.ensure_grad(inp);
                        let gsrc = &g[off * n..(off + rows) * n];
                        for (d, &x) in gi.iter_mut().zip(gsrc) {
                            *d += x;
                        }
                    }
                }
            }
            Op::SliceRows { start } => {
                if need[0] {
                    let start = *start;
                    let n = self.nodes[i].value.cols();
                    let ga = self.ensure_grad(inputs[0]);
                    let dst = &mut ga[start * n..start * n + g.len()];
                    for (d, &x) in dst.iter_mut().zip(&g) {
                        *d += x;
                    }
                }
            }
            Op::AttnCore { seq_len, scale, attn } => {
                let l = *seq_len;
                let scale = *scale;
                let attn = attn.clone();
                let d = self.nodes[i].value.cols();
                let m = self.nodes[i].value.rows();
                let seqs = m / l;
                let qdata = self.nodes[inputs[0].0].value.data.clone();
                let kdata = self.nodes[inputs[1].0].value.data.clone();
                let vdata = self.nodes[inputs[2].0].value.data.clone();
                let mut gq = vec![0.0; m * d];
                let mut gk = vec![0.0; m * d];
                let mut gv = vec![0.0; m * d];
                for s in 0..seqs {
                    let base = s * l;
                    let a = &attn[s * l * l..(s + 1) * l * l];
                    // dV = A^T dY; dA = dY V^T
                    let mut da = vec![0.0; l * l];
                    for i2 in 0..l {
                        let gy = &g[(base + i2) * d..(base + i2 + 1) * d];
                        for j in 0..l {
                            let w = a[i2 * l + j];
                            let vrow = &vdata[(base + j) * d..(base + j + 1) * d];
                            let gvrow = &mut gv[(base + j) * d..(base + j + 1) * d];
                            let mut dot = 0.0;
                            for (p, (&gyp, &vp)) in gy.iter().zip(vrow).enumerate() {
                                gvrow[p] += w * gyp;
                                dot += gyp * vp;
                            }
                            da[i2 * l + j] = dot;
                        }
                    }
                    // softmax backward per row, then dQ/dK
                    for i2 in 0..l {
                        let arow = &a[i2 * l..(i2 + 1) * l];
                        let darow = &da[i2 * l..(i2 + 1) * l];
                        let dot: f64 = arow.iter().zip(darow).map(|(x, y)| x * y).sum();
                        let qrow = &qdata[(base + i2) * d..(base + i2 + 1) * d];
                        let gqrow = &mut gq[(base + i2) * d..(base + i2 + 1) * d];
                        for j in 0..l {
                            let ds = arow[j] * (darow[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kdata[(base + j) * d..(base + j + 1) * d];
                            let gkrow = &mut gk[(base + j) * d..(base + j + 1) * d];
                            for p in 0..d {
                                gqrow[p] += ds * krow[p];
                                gkrow[p] += ds * qrow[p];
                            }
                        }
                    }
                }
                for (slot, gbuf) in [(0usize, gq), (1, gk), (2, gv)] {
                    if need[slot] {
                        let gi = self.ensure_grad(inputs[slot]);
                        for (dd, &x) in gi.iter_mut().zip(&gbuf) {
                            *dd += x;
                        }
                    }
                }
            }
            Op::MutualInfoUniform => {
                if need[0] {
                    let cdata = self.nodes[inputs[0].0].value.data.clone();
                    let (m, n) = (
                        self.nodes[inputs[0].0].value.rows(),
                        self.nodes[inputs[0].0].value.cols(),
                    );
                    let mut col_sums = vec![0.0; n];
                    for chunk in cdata.chunks(n) {
                        for (s, &x) in col_sums.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    let gscalar = g[0];
                    let mf = m as f64;
                    let ga = self.ensure_grad(inputs[0]);
                    for (r, chunk) in cdata.chunks(n).enumerate() {
                        for (j, &c) in chunk.iter().enumerate() {
                            if c > 0.0 {
                                ga[r * n + j] += gscalar * (mf * c / col_sums[j]).ln() / mf;
                            }
                        }
                    }
                }
            }
            Op::CvSquared => {
                if need[0] {
                    let xdata = self.nodes[inputs[0].0].value.data.clone();
                    let n = xdata.len() as f64;
                    let mean = xdata.iter().sum::<f64>() / n;
                    let gscalar = g[0];
                    let ga = self.ensure_grad(inputs[0]);
                    if mean.abs() >= 1e-300 {
                        let var = xdata.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                        for (d, &x) in ga.iter_mut().zip(&xdata) {
                            *d += gscalar * (2.0 / (n * mean * mean)) * ((x - mean) - var / mean);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                if need[0] {
                    let labels = labels.clone();
                    let probs = probs.clone();
                    let c = self.nodes[inputs[0].0].value.cols();
                    let b = labels.len();
                    let gscalar = g[0];
                    let ga = self.ensure_grad(inputs[0]);
                    for (r, chunk) in ga.chunks_mut(c).enumerate() {
                        for (j, d) in chunk.iter_mut().enumerate() {
                            let mut p = probs[r * c + j];
                            if j == labels[r] {
                                p -= 1.0;
                            }
                            *d += gscalar * p / b as f64;
                        }
                    }
                }
            }
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// log(1 + exp(x)), branch form for stability.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
