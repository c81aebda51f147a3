//! The recording tape: forward primitives and their reverse-mode gradients.

use super::rng::unit_uniform;
use super::{GradStore, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

/// How the rhs of an elementwise op lines up with the lhs.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Bcast {
    /// Identical shapes.
    Same,
    /// rhs is a vector matching the lhs last axis, repeated over leading axes.
    LastAxis,
    /// rhs is a single scalar.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Exp,
    Softplus,
    Sigmoid,
    Silu,
    Gelu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, bsz: usize, m: usize, k: usize, n: usize },
    BmmNt { a: usize, b: usize, bsz: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize, bc: Bcast },
    Sub { a: usize, b: usize, bc: Bcast },
    Mul { a: usize, b: usize, bc: Bcast },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Elem { a: usize, kind: Unary },
    SoftmaxLast { a: usize, slice: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64, d: usize },
    ConcatLast { parts: Vec<usize> },
    SliceLast { x: usize, start: usize, len: usize },
    GatherRows { table: usize, ids: Vec<usize>, d: usize },
    SelectTime { x: usize, idx: Vec<usize>, l: usize, d: usize },
    Pick { x: usize, rows: Vec<usize>, cols: Vec<usize>, width: usize },
    ExpandBatch { x: usize, l: usize, d: usize },
    SumAxis { x: usize, axis: usize },
    SumAll { x: usize },
    Transpose2 { x: usize, rows: usize, cols: usize },
    Reshape { x: usize },
    CausalConv1d { x: usize, w: usize, kernel: usize },
    SelectiveScan {
        u: usize,
        delta: usize,
        b_in: usize,
        c_in: usize,
        a_mat: usize,
        d_vec: usize,
        dims: (usize, usize, usize, usize),
        saved_h: Vec<f64>,
    },
    Dropout { x: usize, p: f64, key: u64 },
    CrossEntropy { logits: usize, targets: Vec<usize>, classes: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Wengert tape. One tape per forward/backward cycle; nodes are append-only
/// and already in topological order.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

type OpResult = Result<TensorId, TensorError>;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].value.data[0]
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes[id].value.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires: bool, name: &'static str) -> OpResult {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut value = Tensor::new(shape, data);
        value.requires_grad = requires;
        self.nodes.push(Node { value, op });
        Ok(TensorId(self.nodes.len() - 1))
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Insert an input tensor; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: Tensor) -> OpResult {
        let req = t.requires_grad;
        self.push(t.shape.clone(), t.data, Op::Leaf, req, "leaf")
    }

    /// Insert a differentiable copy of a parameter value.
    pub fn param(&mut self, value: &Tensor) -> OpResult {
        self.push(value.shape.clone(), value.data.clone(), Op::Leaf, true, "leaf")
    }

    /// Insert a non-differentiable tensor (masks, detached scores, ...).
    pub fn constant(&mut self, t: Tensor) -> OpResult {
        self.push(t.shape.clone(), t.data, Op::Leaf, false, "leaf")
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// 2-D matrix product `a[m,k] @ b[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_2d(self.data(a), self.data(b), m, k, n);
        let req = self.requires(a.0) || self.requires(b.0);
        self.push(vec![m, n], data, Op::Matmul { a: a.0, b: b.0, m, k, n }, req, "matmul")
    }

    /// Batched matrix product `a[bsz,m,k] @ b[bsz,k,n]`.
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                details: format!("{sa:?} x {sb:?}"),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let out = matmul_2d(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            data[i * m * n..(i + 1) * m * n].copy_from_slice(&out);
        }
        let req = self.requires(a.0) || self.requires(b.0);
        self.push(vec![bsz, m, n], data, Op::Bmm { a: a.0, b: b.0, bsz, m, k, n }, req, "bmm")
    }

    /// Batched `a[bsz,m,k] @ b[bsz,n,k]^T -> [bsz,m,n]` (keys stay row-major).
    pub fn bmm_nt(&mut self, a: TensorId, b: TensorId) -> OpResult {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm_nt",
                details: format!("{sa:?} x {sb:?}^T"),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut data = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let asl = &self.data(a)[i * m * k..(i + 1) * m * k];
            let bsl = &self.data(b)[i * n * k..(i + 1) * n * k];
            let out = matmul_at_bt(asl, bsl, m, k, n, false, true);
            data[i * m * n..(i + 1) * m * n].copy_from_slice(&out);
        }
        let req = self.requires(a.0) || self.requires(b.0);
        self.push(vec![bsz, m, n], data, Op::BmmNt { a: a.0, b: b.0, bsz, m, k, n }, req, "bmm_nt")
    }

    pub fn transpose2(&mut self, x: TensorId) -> OpResult {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "transpose", details: format!("{s:?}") });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        let req = self.requires(x.0);
        self.push(vec![cols, rows], data, Op::Transpose2 { x: x.0, rows, cols }, req, "transpose")
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> OpResult {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {shape:?}", self.shape(x)),
            });
        }
        let data = self.data(x).to_vec();
        let req = self.requires(x.0);
        self.push(shape, data, Op::Reshape { x: x.0 }, req, "reshape")
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn bcast_of(&self, a: TensorId, b: TensorId, op: &'static str) -> Result<Bcast, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.data(b).len() == 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() == 1 && sb[0] == *sa.last().unwrap_or(&0) {
            Ok(Bcast::LastAxis)
        } else {
            Err(TensorError::ShapeMismatch { op, details: format!("{sa:?} vs {sb:?}") })
        }
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        mk: fn(usize, usize, Bcast) -> Op,
    ) -> OpResult {
        let bc = self.bcast_of(a, b, name)?;
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<f64> = match bc {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Bcast::LastAxis => {
                let d = db.len();
                da.iter().enumerate().map(|(i, &x)| f(x, db[i % d])).collect()
            }
        };
        let shape = self.shape(a).to_vec();
        let req = self.requires(a.0) || self.requires(b.0);
        self.push(shape, data, mk(a.0, b.0, bc), req, name)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> OpResult {
        self.binary(a, b, "add", |x, y| x + y, |a, b, bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> OpResult {
        self.binary(a, b, "sub", |x, y| x - y, |a, b, bc| Op::Sub { a, b, bc })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> OpResult {
        self.binary(a, b, "mul", |x, y| x * y, |a, b, bc| Op::Mul { a, b, bc })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> OpResult {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a.0);
        self.push(shape, data, Op::Scale { a: a.0, c }, req, "scale")
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> OpResult {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a.0);
        self.push(shape, data, Op::AddScalar { a: a.0 }, req, "add_scalar")
    }

    fn unary(&mut self, a: TensorId, kind: Unary, name: &'static str) -> OpResult {
        let f = unary_fwd(kind);
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let req = self.requires(a.0);
        self.push(shape, data, Op::Elem { a: a.0, kind }, req, name)
    }

    pub fn exp(&mut self, a: TensorId) -> OpResult {
        self.unary(a, Unary::Exp, "exp")
    }

    pub fn softplus(&mut self, a: TensorId) -> OpResult {
        self.unary(a, Unary::Softplus, "softplus")
    }

    pub fn sigmoid(&mut self, a: TensorId) -> OpResult {
        self.unary(a, Unary::Sigmoid, "sigmoid")
    }

    pub fn silu(&mut self, a: TensorId) -> OpResult {
        self.unary(a, Unary::Silu, "silu")
    }

    pub fn gelu(&mut self, a: TensorId) -> OpResult {
        self.unary(a, Unary::Gelu, "gelu")
    }

    // ── Normalization and softmax ────────────────────────────────────

    /// Softmax over the last axis, max-subtracted for stability.
    pub fn softmax_last(&mut self, a: TensorId) -> OpResult {
        let shape = self.shape(a).to_vec();
        let slice = *shape.last().ok_or(TensorError::ShapeMismatch {
            op: "softmax",
            details: "rank-0 input".into(),
        })?;
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for (row_out, row_in) in data.chunks_mut(slice).zip(src.chunks(slice)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let req = self.requires(a.0);
        self.push(shape, data, Op::SoftmaxLast { a: a.0, slice }, req, "softmax")
    }

    /// Per-last-axis standardization followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> OpResult {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                details: format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    shape,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let mut data = vec![0.0; src.len()];
        for (out, row) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let req = self.requires(x.0) || self.requires(gamma.0) || self.requires(beta.0);
        self.push(
            shape,
            data,
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps, d },
            req,
            "layer_norm",
        )
    }

    // ── Shape surgery ────────────────────────────────────────────────

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[TensorId]) -> OpResult {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch { op: "concat", details: "no parts".into() });
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut total_last = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    details: format!("leading dims differ: {lead:?} vs {s:?}"),
                });
            }
            total_last += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total_last];
        let mut offset = 0;
        for &p in parts {
            let last = *self.shape(p).last().unwrap();
            let src = self.data(p);
            for r in 0..rows {
                data[r * total_last + offset..r * total_last + offset + last]
                    .copy_from_slice(&src[r * last..(r + 1) * last]);
            }
            offset += last;
        }
        let mut shape = lead;
        shape.push(total_last);
        let req = parts.iter().any(|p| self.requires(p.0));
        let op = Op::ConcatLast { parts: parts.iter().map(|p| p.0).collect() };
        self.push(shape, data, op, req, "concat")
    }

    /// Take `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: TensorId, start: usize, len: usize) -> OpResult {
        let s = self.shape(x).to_vec();
        let last = *s.last().unwrap_or(&0);
        if start + len > last {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                details: format!("[{start}, {}) of last axis {last}", start + len),
            });
        }
        let rows: usize = s[..s.len() - 1].iter().product();
        let src = self.data(x);
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * last + start..r * last + start + len]);
        }
        let mut shape = s[..s.len() - 1].to_vec();
        shape.push(len);
        let req = self.requires(x.0);
        self.push(shape, data, Op::SliceLast { x: x.0, start, len }, req, "slice")
    }

    /// Row gather from a `[rows, d]` table; output is `prefix_shape + [d]`.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize], prefix_shape: &[usize]) -> OpResult {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch { op: "gather", details: format!("table {s:?}") });
        }
        let (rows, d) = (s[0], s[1]);
        if ids.len() != prefix_shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                details: format!("{} ids for prefix {prefix_shape:?}", ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { op: "gather", index: bad, limit: rows });
        }
        let src = self.data(table);
        let mut data = vec![0.0; ids.len() * d];
        for (slot, &id) in ids.iter().enumerate() {
            data[slot * d..(slot + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(d);
        let req = self.requires(table.0);
        self.push(shape, data, Op::GatherRows { table: table.0, ids: ids.to_vec(), d }, req, "gather")
    }

    /// Pick one time position per batch row: `[B,L,d] -> [B,d]`.
    pub fn select_time(&mut self, x: TensorId, idx: &[usize]) -> OpResult {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || idx.len() != s[0] {
            return Err(TensorError::ShapeMismatch {
                op: "select_time",
                details: format!("x {s:?}, {} indices", idx.len()),
            });
        }
        let (l, d) = (s[1], s[2]);
        if let Some(&bad) = idx.iter().find(|&&t| t >= l) {
            return Err(TensorError::IndexOutOfRange { op: "select_time", index: bad, limit: l });
        }
        let src = self.data(x);
        let mut data = vec![0.0; s[0] * d];
        for (b, &t) in idx.iter().enumerate() {
            data[b * d..(b + 1) * d].copy_from_slice(&src[(b * l + t) * d..(b * l + t + 1) * d]);
        }
        let req = self.requires(x.0);
        self.push(vec![s[0], d], data, Op::SelectTime { x: x.0, idx: idx.to_vec(), l, d }, req, "select_time")
    }

    /// Pick one column per row: `[B,C] -> [B]`.
    pub fn select_col(&mut self, x: TensorId, idx: &[usize]) -> OpResult {
        let rows: Vec<usize> = (0..idx.len()).collect();
        self.pick(x, &rows, idx)
    }

    /// Gather scalar entries `x[rows[i], cols[i]] -> [n]`; rows may repeat.
    pub fn pick(&mut self, x: TensorId, rows: &[usize], cols: &[usize]) -> OpResult {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows.len() != cols.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                details: format!("x {s:?}, {} rows vs {} cols", rows.len(), cols.len()),
            });
        }
        let (r, width) = (s[0], s[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::IndexOutOfRange { op: "pick", index: bad, limit: r });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(TensorError::IndexOutOfRange { op: "pick", index: bad, limit: width });
        }
        let src = self.data(x);
        let data: Vec<f64> = rows.iter().zip(cols).map(|(&i, &c)| src[i * width + c]).collect();
        let req = self.requires(x.0);
        self.push(
            vec![rows.len()],
            data,
            Op::Pick { x: x.0, rows: rows.to_vec(), cols: cols.to_vec(), width },
            req,
            "pick",
        )
    }

    /// Repeat a per-batch scalar over an `[B,l,d]` block.
    pub fn expand_batch(&mut self, x: TensorId, l: usize, d: usize) -> OpResult {
        let s = self.shape(x).to_vec();
        let bsz = s[0];
        if self.data(x).len() != bsz {
            return Err(TensorError::ShapeMismatch {
                op: "expand_batch",
                details: format!("expected one scalar per batch row, got {s:?}"),
            });
        }
        let src = self.data(x);
        let mut data = vec![0.0; bsz * l * d];
        for b in 0..bsz {
            data[b * l * d..(b + 1) * l * d].fill(src[b]);
        }
        let req = self.requires(x.0);
        self.push(vec![bsz, l, d], data, Op::ExpandBatch { x: x.0, l, d }, req, "expand_batch")
    }

    // ── Reductions ───────────────────────────────────────────────────

    /// Sum over one axis; the axis disappears from the shape.
    pub fn sum_axis(&mut self, x: TensorId, axis: usize) -> OpResult {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::ShapeMismatch {
                op: "sum_axis",
                details: format!("axis {axis} of {s:?}"),
            });
        }
        let outer: usize = s[..axis].iter().product();
        let mid = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(x);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = s[..axis].to_vec();
        shape.extend_from_slice(&s[axis + 1..]);
        if shape.is_empty() {
            shape.push(1);
        }
        let req = self.requires(x.0);
        self.push(shape, data, Op::SumAxis { x: x.0, axis }, req, "sum_axis")
    }

    pub fn sum_all(&mut self, x: TensorId) -> OpResult {
        let s: f64 = self.data(x).iter().sum();
        let req = self.requires(x.0);
        self.push(vec![1], vec![s], Op::SumAll { x: x.0 }, req, "sum_all")
    }

    pub fn mean_all(&mut self, x: TensorId) -> OpResult {
        let n = self.data(x).len() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    // ── Sequence ops ─────────────────────────────────────────────────

    /// Depthwise causal 1-D convolution: `x[B,L,C]`, `w[C,K]`, left zero pad K-1.
    pub fn causal_conv1d(&mut self, x: TensorId, w: TensorId) -> OpResult {
        let s = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if s.len() != 3 || sw.len() != 2 || sw[0] != s[2] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_conv1d",
                details: format!("x {s:?}, w {sw:?}"),
            });
        }
        let (bsz, l, ch) = (s[0], s[1], s[2]);
        let kernel = sw[1];
        let (src, wv) = (self.data(x), self.data(w));
        let mut data = vec![0.0; bsz * l * ch];
        for b in 0..bsz {
            for t in 0..l {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for k in 0..kernel {
                        let tt = t as isize - (kernel as isize - 1) + k as isize;
                        if tt >= 0 {
                            acc += wv[c * kernel + k] * src[(b * l + tt as usize) * ch + c];
                        }
                    }
                    data[(b * l + t) * ch + c] = acc;
                }
            }
        }
        let req = self.requires(x.0) || self.requires(w.0);
        self.push(s, data, Op::CausalConv1d { x: x.0, w: w.0, kernel }, req, "causal_conv1d")
    }

    /// Selective SSM recurrence over time.
    ///
    /// Shapes: `u, delta [B,L,D]`, `b_in, c_in [B,L,N]`, `a_mat [D,N]`, `d_vec [D]`.
    /// Per channel c and state n:
    ///   `h_t = exp(delta_t[c] * A[c,n]) * h_{t-1} + delta_t[c] * B_t[n] * u_t[c]`
    ///   `y_t[c] = sum_n C_t[n] * h_t[c,n] + D[c] * u_t[c]`
    pub fn selective_scan(
        &mut self,
        u: TensorId,
        delta: TensorId,
        b_in: TensorId,
        c_in: TensorId,
        a_mat: TensorId,
        d_vec: TensorId,
    ) -> OpResult {
        let su = self.shape(u).to_vec();
        if su.len() != 3 {
            return Err(TensorError::ShapeMismatch { op: "selective_scan", details: format!("u {su:?}") });
        }
        let (bsz, l, d) = (su[0], su[1], su[2]);
        let sb = self.shape(b_in).to_vec();
        if sb.len() != 3 || sb[0] != bsz || sb[1] != l {
            return Err(TensorError::ShapeMismatch { op: "selective_scan", details: format!("B {sb:?}") });
        }
        let n = sb[2];
        if self.shape(delta) != [bsz, l, d]
            || self.shape(c_in) != [bsz, l, n]
            || self.shape(a_mat) != [d, n]
            || self.shape(d_vec) != [d]
        {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                details: "delta/C/A/D dims disagree with u and B".into(),
            });
        }
        let (uv, dv, bv, cv, av, skip) = (
            self.data(u),
            self.data(delta),
            self.data(b_in),
            self.data(c_in),
            self.data(a_mat),
            self.data(d_vec),
        );
        let mut y = vec![0.0; bsz * l * d];
        let mut saved_h = vec![0.0; bsz * l * d * n];
        for b in 0..bsz {
            // running state h[c,n], zero at sequence start
            let mut h = vec![0.0; d * n];
            for t in 0..l {
                for c in 0..d {
                    let del = dv[(b * l + t) * d + c];
                    let uu = uv[(b * l + t) * d + c];
                    let mut acc = skip[c] * uu;
                    for s in 0..n {
                        let abar = (del * av[c * n + s]).exp();
                        let hv = abar * h[c * n + s] + del * bv[(b * l + t) * n + s] * uu;
                        if !hv.is_finite() {
                            return Err(TensorError::Numerical {
                                op: "selective_scan",
                                details: format!("state diverged at t={t}, channel {c}"),
                            });
                        }
                        h[c * n + s] = hv;
                        saved_h[((b * l + t) * d + c) * n + s] = hv;
                        acc += cv[(b * l + t) * n + s] * hv;
                    }
                    y[(b * l + t) * d + c] = acc;
                }
            }
        }
        let req = [u, delta, b_in, c_in, a_mat, d_vec].iter().any(|i| self.requires(i.0));
        self.push(
            vec![bsz, l, d],
            y,
            Op::SelectiveScan {
                u: u.0,
                delta: delta.0,
                b_in: b_in.0,
                c_in: c_in.0,
                a_mat: a_mat.0,
                d_vec: d_vec.0,
                dims: (bsz, l, d, n),
                saved_h,
            },
            req,
            "selective_scan",
        )
    }

    /// Train-mode inverted dropout with a counter-based mask.
    pub fn dropout(&mut self, x: TensorId, p: f64, key: u64) -> OpResult {
        if p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(TensorError::Numerical {
                op: "dropout",
                details: format!("rate {p} leaves nothing"),
            });
        }
        let keep = 1.0 / (1.0 - p);
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if unit_uniform(key, i as u64) >= p { v * keep } else { 0.0 })
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x.0);
        self.push(shape, data, Op::Dropout { x: x.0, p, key }, req, "dropout")
    }

    /// Mean negative log-softmax of the target column, one target per row.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> OpResult {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                details: format!("logits {s:?}, {} targets", targets.len()),
            });
        }
        let classes = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: bad, limit: classes });
        }
        let src = self.data(logits);
        let mut total = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = &src[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total -= row[t] - lse;
        }
        total /= targets.len() as f64;
        let req = self.requires(logits.0);
        self.push(
            vec![1],
            vec![total],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), classes },
            req,
            "cross_entropy",
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every reachable differentiable node
    /// receives its accumulated gradient in the returned store.
    pub fn backward(&mut self, loss: TensorId) -> Result<GradStore, TensorError> {
        if self.data(loss).len() != 1 {
            return Err(TensorError::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].value.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(GradStore { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, add: &[f64]| {
            if !nodes[id].value.requires_grad {
                return;
            }
            let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
            for (a, b) in slot.iter_mut().zip(add) {
                *a += b;
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}

            Op::Matmul { a, b, m, k, n } => {
                // dA = dC @ B^T, dB = A^T @ dC
                let (av, bv) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                let da = matmul_at_bt(g, bv, *m, *n, *k, false, true);
                let db = matmul_at_bt(av, g, *k, *m, *n, true, false);
                acc(grads, &self.nodes, *a, &da);
                acc(grads, &self.nodes, *b, &db);
            }

            Op::Bmm { a, b, bsz, m, k, n } => {
                let (av, bv) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                let mut da = vec![0.0; bsz * m * k];
                let mut db = vec![0.0; bsz * k * n];
                for i in 0..*bsz {
                    let gs = &g[i * m * n..(i + 1) * m * n];
                    let asl = &av[i * m * k..(i + 1) * m * k];
                    let bsl = &bv[i * k * n..(i + 1) * k * n];
                    da[i * m * k..(i + 1) * m * k]
                        .copy_from_slice(&matmul_at_bt(gs, bsl, *m, *n, *k, false, true));
                    db[i * k * n..(i + 1) * k * n]
                        .copy_from_slice(&matmul_at_bt(asl, gs, *k, *m, *n, true, false));
                }
                acc(grads, &self.nodes, *a, &da);
                acc(grads, &self.nodes, *b, &db);
            }

            Op::BmmNt { a, b, bsz, m, k, n } => {
                // C = A B^T: dA = dC B, dB = dC^T A
                let (av, bv) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                let mut da = vec![0.0; bsz * m * k];
                let mut db = vec![0.0; bsz * n * k];
                for i in 0..*bsz {
                    let gs = &g[i * m * n..(i + 1) * m * n];
                    let asl = &av[i * m * k..(i + 1) * m * k];
                    let bsl = &bv[i * n * k..(i + 1) * n * k];
                    da[i * m * k..(i + 1) * m * k].copy_from_slice(&matmul_2d(gs, bsl, *m, *n, *k));
                    db[i * n * k..(i + 1) * n * k]
                        .copy_from_slice(&matmul_at_bt(gs, asl, *n, *m, *k, true, false));
                }
                acc(grads, &self.nodes, *a, &da);
                acc(grads, &self.nodes, *b, &db);
            }

            Op::Add { a, b, bc } => {
                acc(grads, &self.nodes, *a, g);
                let db = reduce_bcast(g, self.nodes[*b].value.numel(), *bc);
                acc(grads, &self.nodes, *b, &db);
            }

            Op::Sub { a, b, bc } => {
                acc(grads, &self.nodes, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                let db = reduce_bcast(&neg, self.nodes[*b].value.numel(), *bc);
                acc(grads, &self.nodes, *b, &db);
            }

            Op::Mul { a, b, bc } => {
                let (av, bv) = (&self.nodes[*a].value.data, &self.nodes[*b].value.data);
                let da: Vec<f64> = match bc {
                    Bcast::Same => g.iter().zip(bv).map(|(&gg, &y)| gg * y).collect(),
                    Bcast::Scalar => g.iter().map(|&gg| gg * bv[0]).collect(),
                    Bcast::LastAxis => {
                        let d = bv.len();
                        g.iter().enumerate().map(|(i, &gg)| gg * bv[i % d]).collect()
                    }
                };
                let full: Vec<f64> = g.iter().zip(av).map(|(&gg, &x)| gg * x).collect();
                let db = reduce_bcast(&full, bv.len(), *bc);
                acc(grads, &self.nodes, *a, &da);
                acc(grads, &self.nodes, *b, &db);
            }

            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|&gg| gg * c).collect();
                acc(grads, &self.nodes, *a, &da);
            }

            Op::AddScalar { a } => {
                acc(grads, &self.nodes, *a, g);
            }

            Op::Elem { a, kind } => {
                let xv = &self.nodes[*a].value.data;
                let yv = &self.nodes[i].value.data;
                let da: Vec<f64> = match kind {
                    // d exp = exp
                    Unary::Exp => g.iter().zip(yv).map(|(&gg, &y)| gg * y).collect(),
                    // d softplus = sigmoid
                    Unary::Softplus => g.iter().zip(xv).map(|(&gg, &x)| gg * sigmoid(x)).collect(),
                    // d sigmoid = s (1 - s)
                    Unary::Sigmoid => g.iter().zip(yv).map(|(&gg, &s)| gg * s * (1.0 - s)).collect(),
                    // d silu = s + x s (1 - s)
                    Unary::Silu => g
                        .iter()
                        .zip(xv)
                        .map(|(&gg, &x)| {
                            let s = sigmoid(x);
                            gg * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                    Unary::Gelu => g.iter().zip(xv).map(|(&gg, &x)| gg * gelu_grad(x)).collect(),
                };
                acc(grads, &self.nodes, *a, &da);
            }

            Op::SoftmaxLast { a, slice } => {
                // ds_i = s_i (g_i - sum_j g_j s_j), per slice
                let sv = &self.nodes[i].value.data;
                let mut da = vec![0.0; sv.len()];
                for ((dout, srow), grow) in da.chunks_mut(*slice).zip(sv.chunks(*slice)).zip(g.chunks(*slice)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(&s, &gg)| s * gg).sum();
                    for j in 0..*slice {
                        dout[j] = srow[j] * (grow[j] - dot);
                    }
                }
                acc(grads, &self.nodes, *a, &da);
            }

            Op::LayerNorm { x, gamma, beta, eps, d } => {
                let xv = &self.nodes[*x].value.data;
                let gv = &self.nodes[*gamma].value.data;
                let d = *d;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (v, (row, grow)) in xv.chunks(d).zip(g.chunks(d)).enumerate() {
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&a| (a - mean) * inv).collect();
                    let mut dxh = vec![0.0; d];
                    for j in 0..d {
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxh[j] = grow[j] * gv[j];
                    }
                    let sum_dxh: f64 = dxh.iter().sum();
                    let sum_dxh_xhat: f64 = dxh.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[v * d + j] = inv / df * (df * dxh[j] - sum_dxh - xhat[j] * sum_dxh_xhat);
                    }
                }
                acc(grads, &self.nodes, *x, &dx);
                acc(grads, &self.nodes, *gamma, &dgamma);
                acc(grads, &self.nodes, *beta, &dbeta);
            }

            Op::ConcatLast { parts } => {
                let total: usize = parts
                    .iter()
                    .map(|&p| *self.nodes[p].value.shape.last().unwrap())
                    .sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let last = *self.nodes[p].value.shape.last().unwrap();
                    let mut dp = vec![0.0; rows * last];
                    for r in 0..rows {
                        dp[r * last..(r + 1) * last]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + last]);
                    }
                    acc(grads, &self.nodes, p, &dp);
                    offset += last;
                }
            }

            Op::SliceLast { x, start, len } => {
                let xs = &self.nodes[*x].value.shape;
                let last = *xs.last().unwrap();
                let rows = self.nodes[*x].value.numel() / last;
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for r in 0..rows {
                    dx[r * last + start..r * last + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(grads, &self.nodes, *x, &dx);
            }

            Op::GatherRows { table, ids, d } => {
                let mut dt = vec![0.0; self.nodes[*table].value.numel()];
                for (slot, &id) in ids.iter().enumerate() {
                    for j in 0..*d {
                        dt[id * d + j] += g[slot * d + j];
                    }
                }
                acc(grads, &self.nodes, *table, &dt);
            }

            Op::SelectTime { x, idx, l, d } => {
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for (b, &t) in idx.iter().enumerate() {
                    dx[(b * l + t) * d..(b * l + t + 1) * d].copy_from_slice(&g[b * d..(b + 1) * d]);
                }
                acc(grads, &self.nodes, *x, &dx);
            }

            Op::Pick { x, rows, cols, width } => {
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for (i, (&r, &c)) in rows.iter().zip(cols).enumerate() {
                    dx[r * width + c] += g[i];
                }
                acc(grads, &self.nodes, *x, &dx);
            }

            Op::ExpandBatch { x, l, d } => {
                let bsz = self.nodes[*x].value.numel();
                let mut dx = vec![0.0; bsz];
                for b in 0..bsz {
                    dx[b] = g[b * l * d..(b + 1) * l * d].iter().sum();
                }
                acc(grads, &self.nodes, *x, &dx);
            }

            Op::SumAxis { x, axis } => {
                let xs = &self.nodes[*x].value.shape;
                let outer: usize = xs[..*axis].iter().product();
                let mid = xs[*axis];
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for j in 0..inner {
                            dx[base + j] = g[o * inner + j];
                        }
                    }
                }
                acc(grads, &self.nodes, *x, &dx);
            }

            Op::SumAll { x } => {
                let dx = vec![g[0]; self.nodes[*x].value.numel()];
                acc(grads, &self.nodes, *x, &dx);
            }

            Op::Transpose2 { x, rows, cols } => {
                // g has shape [cols, rows]; map back
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                acc(grads, &self.nodes, *x, &dx);
            }

            Op::Reshape { x } => {
                acc(grads, &self.nodes, *x, g);
            }

            Op::CausalConv1d { x, w, kernel } => {
                let xs = &self.nodes[*x].value.shape;
                let (bsz, l, ch) = (xs[0], xs[1], xs[2]);
                let xv = &self.nodes[*x].value.data;
                let wv = &self.nodes[*w].value.data;
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for b in 0..bsz {
                    for t in 0..l {
                        for c in 0..ch {
                            let gg = g[(b * l + t) * ch + c];
                            if gg == 0.0 {
                                continue;
                            }
                            for k in 0..*kernel {
                                let tt = t as isize - (*kernel as isize - 1) + k as isize;
                                if tt >= 0 {
                                    let xi = (b * l + tt as usize) * ch + c;
                                    dx[xi] += gg * wv[c * kernel + k];
                                    dw[c * kernel + k] += gg * xv[xi];
                                }
                            }
                        }
                    }
                }
                acc(grads, &self.nodes, *x, &dx);
                acc(grads, &self.nodes, *w, &dw);
            }

            Op::SelectiveScan { u, delta, b_in, c_in, a_mat, d_vec, dims, saved_h } => {
                let (bsz, l, d, n) = *dims;
                let uv = &self.nodes[*u].value.data;
                let dv = &self.nodes[*delta].value.data;
                let bv = &self.nodes[*b_in].value.data;
                let cv = &self.nodes[*c_in].value.data;
                let av = &self.nodes[*a_mat].value.data;
                let skip = &self.nodes[*d_vec].value.data;
                let mut du = vec![0.0; uv.len()];
                let mut ddelta = vec![0.0; dv.len()];
                let mut db = vec![0.0; bv.len()];
                let mut dc = vec![0.0; cv.len()];
                let mut da = vec![0.0; av.len()];
                let mut dskip = vec![0.0; skip.len()];
                // reverse-time adjoint of the linear recurrence
                for b in 0..bsz {
                    let mut ghat = vec![0.0; d * n];
                    for t in (0..l).rev() {
                        for c in 0..d {
                            let gy = g[(b * l + t) * d + c];
                            let del = dv[(b * l + t) * d + c];
                            let uu = uv[(b * l + t) * d + c];
                            dskip[c] += gy * uu;
                            du[(b * l + t) * d + c] += gy * skip[c];
                            let mut ddel = 0.0;
                            for s in 0..n {
                                let h = saved_h[((b * l + t) * d + c) * n + s];
                                dc[(b * l + t) * n + s] += gy * h;
                                let hg = ghat[c * n + s] + gy * cv[(b * l + t) * n + s];
                                let aval = av[c * n + s];
                                let abar = (del * aval).exp();
                                let hprev = if t > 0 {
                                    saved_h[((b * l + t - 1) * d + c) * n + s]
                                } else {
                                    0.0
                                };
                                let dabar = hg * hprev;
                                da[c * n + s] += dabar * del * abar;
                                ddel += dabar * aval * abar;
                                let bval = bv[(b * l + t) * n + s];
                                db[(b * l + t) * n + s] += hg * del * uu;
                                ddel += hg * bval * uu;
                                du[(b * l + t) * d + c] += hg * del * bval;
                                ghat[c * n + s] = hg * abar;
                            }
                            ddelta[(b * l + t) * d + c] += ddel;
                        }
                    }
                }
                acc(grads, &self.nodes, *u, &du);
                acc(grads, &self.nodes, *delta, &ddelta);
                acc(grads, &self.nodes, *b_in, &db);
                acc(grads, &self.nodes, *c_in, &dc);
                acc(grads, &self.nodes, *a_mat, &da);
                acc(grads, &self.nodes, *d_vec, &dskip);
            }

            Op::Dropout { x, p, key } => {
                let keep = 1.0 / (1.0 - p);
                let dx: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(j, &gg)| if unit_uniform(*key, j as u64) >= *p { gg * keep } else { 0.0 })
                    .collect();
                acc(grads, &self.nodes, *x, &dx);
            }

            Op::CrossEntropy { logits, targets, classes } => {
                // d logits = (softmax - onehot) / B
                let lv = &self.nodes[*logits].value.data;
                let bsz = targets.len();
                let mut dl = vec![0.0; lv.len()];
                for (b, &t) in targets.iter().enumerate() {
                    let row = &lv[b * classes..(b + 1) * classes];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for c in 0..*classes {
                        let p = exps[c] / sum;
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dl[b * classes + c] = g[0] * (p - onehot) / bsz as f64;
                    }
                }
                acc(grads, &self.nodes, *logits, &dl);
            }
        }
    }
}

// ── Scalar math helpers ─────────────────────────────────────────────

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn unary_fwd(kind: Unary) -> fn(f64) -> f64 {
    match kind {
        Unary::Exp => f64::exp,
        Unary::Softplus => softplus,
        Unary::Sigmoid => sigmoid,
        Unary::Silu => |x| x * sigmoid(x),
        Unary::Gelu => gelu,
    }
}

/// `a[m,k] @ b[k,n]`, contiguous row-major.
pub(crate) fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Product with optional transposes without materializing them:
/// out[m2,n2] = (ta ? a^T : a) @ (tb ? b^T : b) where the stored shapes are
/// chosen by the caller; used only for the two matmul gradient forms.
fn matmul_at_bt(a: &[f64], b: &[f64], m2: usize, k2: usize, n2: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut out = vec![0.0; m2 * n2];
    match (ta, tb) {
        (false, true) => {
            // a[m2,k2] @ b[n2,k2]^T
            for i in 0..m2 {
                let arow = &a[i * k2..(i + 1) * k2];
                for j in 0..n2 {
                    let brow = &b[j * k2..(j + 1) * k2];
                    out[i * n2 + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        (true, false) => {
            // a[k2,m2]^T @ b[k2,n2]
            for p in 0..k2 {
                let arow = &a[p * m2..(p + 1) * m2];
                let brow = &b[p * n2..(p + 1) * n2];
                for i in 0..m2 {
                    let av = arow[i];
                    let orow = &mut out[i * n2..(i + 1) * n2];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        _ => unreachable!("only the gradient forms are needed"),
    }
    out
}

/// Collapse an upstream gradient onto a broadcast rhs operand.
fn reduce_bcast(g: &[f64], rhs_len: usize, bc: Bcast) -> Vec<f64> {
    match bc {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().sum()],
        Bcast::LastAxis => {
            let mut out = vec![0.0; rhs_len];
            for (i, &v) in g.iter().enumerate() {
                out[i % rhs_len] += v;
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).with_grad()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.leaf(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6])).unwrap();
        let b = tape.leaf(t(&[2, 3], &[0.0; 6])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 0.0, 0.0])).unwrap();
        let s = tape.softmax_last(x).unwrap();
        for &v in tape.data(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.leaf(t(&[2], &[0.0, 3.0f64.ln()])).unwrap();
        let sy = tape.softmax_last(y).unwrap();
        assert!((tape.data(sy)[0] - 0.25).abs() < 1e-15);
        assert!((tape.data(sy)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut tape = Tape::new();
        let vals = [0.3, -1.2, 2.5, 0.0, 7.1];
        let x = tape.leaf(t(&[5], &vals)).unwrap();
        let shifted: Vec<f64> = vals.iter().map(|v| v + 123.456).collect();
        let y = tape.leaf(t(&[5], &shifted)).unwrap();
        let sx = tape.softmax_last(x).unwrap();
        let sy = tape.softmax_last(y).unwrap();
        let sum: f64 = tape.data(sx).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in tape.data(sx).iter().zip(tape.data(sy)) {
            assert!((a - b).abs() < 1e-12);
            assert!(*a > 0.0 && *a < 1.0);
        }
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::new();
        let gamma = tape.leaf(t(&[4], &[1.0; 4])).unwrap();
        let beta = tape.leaf(t(&[4], &[0.0; 4])).unwrap();
        let x = tape.leaf(t(&[4], &[5.0; 4])).unwrap();
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-9);
        }
        // already standardized input passes through as eps -> 0
        let x2 = tape.leaf(t(&[2], &[-1.0, 1.0])).unwrap();
        let g2 = tape.leaf(t(&[2], &[1.0, 1.0])).unwrap();
        let b2 = tape.leaf(t(&[2], &[0.0, 0.0])).unwrap();
        let y2 = tape.layer_norm(x2, g2, b2, 1e-12).unwrap();
        assert!((tape.data(y2)[0] + 1.0).abs() < 1e-6);
        assert!((tape.data(y2)[1] - 1.0).abs() < 1e-6);
        // gamma 0 leaves only beta
        let g3 = tape.leaf(t(&[2], &[0.0, 0.0])).unwrap();
        let b3 = tape.leaf(t(&[2], &[2.0, 2.0])).unwrap();
        let y3 = tape.layer_norm(x2, g3, b3, 1e-5).unwrap();
        assert_eq!(tape.data(y3), &[2.0, 2.0]);
    }

    #[test]
    fn activation_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0])).unwrap();
        let sp = tape.softplus(x).unwrap();
        assert!((tape.data(sp)[0] - 2.0f64.ln()).abs() < 1e-15);
        let si = tape.silu(x).unwrap();
        assert_eq!(tape.data(si)[0], 0.0);
        let sg = tape.sigmoid(x).unwrap();
        assert_eq!(tape.data(sg)[0], 0.5);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -2.0])).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_constant_loss_leaves_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(Tensor::scalar(3.0)).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none(), "x does not contribute");
    }

    #[test]
    fn backward_softmax_ce_closed_form() {
        // grad_z of CE(softmax(z), onehot y) is p - y
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1, 3], &[0.2, -0.4, 1.1])).unwrap();
        let loss = tape.cross_entropy(z, &[2]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let sm = {
            let mut tape2 = Tape::new();
            let z2 = tape2.leaf(t(&[3], &[0.2, -0.4, 1.1])).unwrap();
            let s = tape2.softmax_last(z2).unwrap();
            tape2.data(s).to_vec()
        };
        let g = grads.get(z).unwrap();
        for (j, &gv) in g.iter().enumerate() {
            let expect = sm[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((gv - expect).abs() < 1e-12, "col {j}: {gv} vs {expect}");
        }
    }

    #[test]
    fn backward_is_additive_over_losses() {
        let build = |w_extra: Option<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0])).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let l1 = tape.sum_all(sq).unwrap();
            let e = tape.exp(x).unwrap();
            let l2 = tape.mean_all(e).unwrap();
            let loss = match w_extra {
                None => l1,
                Some(_) => tape.add(l1, l2).unwrap(),
            };
            let grads = tape.backward(loss).unwrap();
            (grads.get(x).unwrap().to_vec(), tape)
        };
        let (g_sum, _) = build(Some(1.0));
        let (g1, _) = build(None);
        // gradient of l2 alone
        let g2 = {
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0])).unwrap();
            let e = tape.exp(x).unwrap();
            let l2 = tape.mean_all(e).unwrap();
            let grads = tape.backward(l2).unwrap();
            grads.get(x).unwrap().to_vec()
        };
        for j in 0..3 {
            assert!((g_sum[j] - (g1[j] + g2[j])).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let b = tape.leaf(t(&[2, 2], &[7.0, 8.0, 9.0, 10.0])).unwrap();
        let c = tape.concat_last(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[2, 5]);
        let back_a = tape.slice_last(c, 0, 3).unwrap();
        let back_b = tape.slice_last(c, 3, 2).unwrap();
        assert_eq!(tape.data(back_a), tape.data(a));
        assert_eq!(tape.data(back_b), tape.data(b));
    }

    #[test]
    fn gather_padding_and_bounds() {
        let mut tape = Tape::new();
        let table = tape
            .leaf(t(&[3, 2], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let out = tape.gather_rows(table, &[0, 0], &[1, 2]).unwrap();
        assert_eq!(tape.data(out), &[0.0, 0.0, 0.0, 0.0]);
        let dup = tape.gather_rows(table, &[2, 2], &[2]).unwrap();
        assert_eq!(tape.data(dup), &[3.0, 4.0, 3.0, 4.0]);
        assert!(matches!(
            tape.gather_rows(table, &[3], &[1]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn dropout_scales_and_replays() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1000], &[1.0; 1000])).unwrap();
        let y = tape.dropout(x, 0.25, 42).unwrap();
        let kept: Vec<f64> = tape.data(y).to_vec();
        let mean = kept.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "inverted scaling keeps the mean: {mean}");
        for &v in &kept {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
        // identical key replays the identical mask
        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(t(&[1000], &[1.0; 1000])).unwrap();
        let y2 = tape2.dropout(x2, 0.25, 42).unwrap();
        assert_eq!(tape.data(y), tape2.data(y2));
    }

    #[test]
    fn nonfinite_output_is_a_hard_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[800.0])).unwrap();
        assert!(matches!(tape.exp(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn backward_rejects_vector_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(x), Err(TensorError::Graph(_))));
    }
}
