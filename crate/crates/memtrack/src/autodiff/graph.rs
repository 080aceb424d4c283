//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one record to an append-only tape; `backward`
//! replays the tape in reverse, applying each record's exact local gradient.
//! The tape is rebuilt on every forward pass and consumed by a single
//! backward call.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::Tensor;
use super::AdError;

pub type NodeId = usize;

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Probability floor used when taking logs of predicted probabilities.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    /// Leaf registered under a parameter name.
    Param,
    /// Leaf captured by value; receives no reported gradient.
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    SoftmaxRows(NodeId, f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowBroadcast(NodeId, NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    DivByScalar(NodeId, NodeId),
    Log(NodeId),
    SmoothL1(NodeId, NodeId),
    SqErr(NodeId, NodeId),
    CosineSim(NodeId, NodeId),
    CrossEntropyRows(NodeId, Vec<usize>),
    BceMean(NodeId, Vec<f64>),
    GroupMaxRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Arc<Vec<f64>>,
}

/// Gradients keyed by parameter name, in name order.
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    map: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Recording tape plus parameter registry.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Register a named leaf that will receive a gradient from `backward`.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Tensor, AdError> {
        if self.params.contains_key(name) {
            return Err(AdError::DuplicateParam(name.to_string()));
        }
        let t = self.leaf(value, Op::Param)?;
        let (_, id) = t.node.expect("leaf has node");
        self.params.insert(name.to_string(), id);
        Ok(t)
    }

    /// Intern a constant leaf on this graph.
    pub fn constant(&mut self, value: &Tensor) -> Result<Tensor, AdError> {
        self.leaf(value, Op::Constant)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Result<Tensor, AdError> {
        let t = Tensor::scalar(value);
        self.leaf(&t, Op::Constant)
    }

    fn leaf(&mut self, value: &Tensor, op: Op) -> Result<Tensor, AdError> {
        if let Some(pos) = value.values().iter().position(|v| !v.is_finite()) {
            return Err(AdError::NonFiniteInput {
                op: "leaf",
                index: pos,
            });
        }
        let data = Arc::new(value.values().to_vec());
        Ok(self.push(op, value.rows(), value.cols(), data))
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, values: Arc<Vec<f64>>) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            rows,
            cols,
            values: Arc::clone(&values),
        });
        Tensor::from_arc(rows, cols, values, Some((self.id, id)))
    }

    /// Resolve a tensor to a node on this graph, interning constants.
    fn lift(&mut self, t: &Tensor) -> Result<NodeId, AdError> {
        match t.node {
            Some((gid, nid)) if gid == self.id => Ok(nid),
            Some(_) => Err(AdError::ForeignGraph),
            None => {
                let c = self.constant(t)?;
                Ok(c.node.expect("constant has node").1)
            }
        }
    }

    fn record(
        &mut self,
        op_name: &'static str,
        op: Op,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Result<Tensor, AdError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite {
                op: op_name,
                node: self.nodes.len(),
            });
        }
        Ok(self.push(op, rows, cols, Arc::new(values)))
    }

    fn shape_err(
        op: &'static str,
        left: &Tensor,
        right: &Tensor,
    ) -> AdError {
        AdError::ShapeMismatch {
            op,
            left: left.shape(),
            right: right.shape(),
        }
    }

    // ── Primitives ──────────────────────────────────────────────────────

    /// C = A · B.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.cols() != b.rows() {
            return Err(Self::shape_err("matmul", a, b));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let out = matmul_raw(a.values(), b.values(), m, k, n);
        let (ia, ib) = (self.lift(a)?, self.lift(b)?);
        self.record("matmul", Op::MatMul(ia, ib), m, n, out)
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        let out = transpose_raw(a.values(), a.rows(), a.cols());
        let ia = self.lift(a)?;
        self.record("transpose", Op::Transpose(ia), a.cols(), a.rows(), out)
    }

    /// Stack along the sequence (row) axis. Zero-row inputs are legal.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor, AdError> {
        if parts.is_empty() {
            return Err(AdError::EmptyInput { op: "concat_rows" });
        }
        let cols = parts[0].cols();
        for p in parts.iter().skip(1) {
            if p.cols() != cols {
                return Err(Self::shape_err("concat_rows", parts[0], p));
            }
        }
        let rows: usize = parts.iter().map(|p| p.rows()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            out.extend_from_slice(p.values());
        }
        let ids = parts
            .iter()
            .map(|p| self.lift(p))
            .collect::<Result<Vec<_>, _>>()?;
        self.record("concat_rows", Op::ConcatRows(ids), rows, cols, out)
    }

    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor, AdError> {
        if parts.is_empty() {
            return Err(AdError::EmptyInput { op: "concat_cols" });
        }
        let rows = parts[0].rows();
        for p in parts.iter().skip(1) {
            if p.rows() != rows {
                return Err(Self::shape_err("concat_cols", parts[0], p));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = vec![0.0; rows * cols];
        let mut offset = 0;
        for p in parts {
            let pc = p.cols();
            for r in 0..rows {
                out[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&p.values()[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        let ids = parts
            .iter()
            .map(|p| self.lift(p))
            .collect::<Result<Vec<_>, _>>()?;
        self.record("concat_cols", Op::ConcatCols(ids), rows, cols, out)
    }

    pub fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor, AdError> {
        if start + len > a.cols() {
            return Err(AdError::SliceOutOfRange {
                start,
                len,
                cols: a.cols(),
            });
        }
        let rows = a.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&a.values()[r * a.cols() + start..r * a.cols() + start + len]);
        }
        let ia = self.lift(a)?;
        self.record("slice_cols", Op::SliceCols(ia, start), rows, len, out)
    }

    /// Row gather by index list; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: &Tensor, indices: &[usize]) -> Result<Tensor, AdError> {
        for &i in indices {
            if i >= a.rows() {
                return Err(AdError::IndexOutOfRange {
                    index: i,
                    rows: a.rows(),
                });
            }
        }
        let cols = a.cols();
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&a.values()[i * cols..(i + 1) * cols]);
        }
        let ia = self.lift(a)?;
        self.record(
            "gather_rows",
            Op::GatherRows(ia, indices.to_vec()),
            indices.len(),
            cols,
            out,
        )
    }

    /// Row-wise softmax of `logits / temperature`.
    pub fn softmax_rows(&mut self, a: &Tensor, temperature: f64) -> Result<Tensor, AdError> {
        if temperature <= 0.0 {
            return Err(AdError::BadTemperature(temperature));
        }
        if a.cols() == 0 {
            return Err(AdError::EmptyInput { op: "softmax_rows" });
        }
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &a.values()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = ((row[c] - max) / temperature).exp();
                out[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                out[r * cols + c] /= sum;
            }
        }
        let ia = self.lift(a)?;
        self.record(
            "softmax_rows",
            Op::SoftmaxRows(ia, temperature),
            rows,
            cols,
            out,
        )
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.shape() != b.shape() {
            return Err(Self::shape_err("add", a, b));
        }
        let out = zip_raw(a.values(), b.values(), |x, y| x + y);
        let (ia, ib) = (self.lift(a)?, self.lift(b)?);
        self.record("add", Op::Add(ia, ib), a.rows(), a.cols(), out)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.shape() != b.shape() {
            return Err(Self::shape_err("sub", a, b));
        }
        let out = zip_raw(a.values(), b.values(), |x, y| x - y);
        let (ia, ib) = (self.lift(a)?, self.lift(b)?);
        self.record("sub", Op::Sub(ia, ib), a.rows(), a.cols(), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.shape() != b.shape() {
            return Err(Self::shape_err("mul", a, b));
        }
        let out = zip_raw(a.values(), b.values(), |x, y| x * y);
        let (ia, ib) = (self.lift(a)?, self.lift(b)?);
        self.record("mul", Op::Mul(ia, ib), a.rows(), a.cols(), out)
    }

    /// Multiply by a fixed scalar.
    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor, AdError> {
        let out = a.values().iter().map(|v| v * factor).collect();
        let ia = self.lift(a)?;
        self.record("scale", Op::Scale(ia, factor), a.rows(), a.cols(), out)
    }

    /// X + 1·b where b is a 1×c bias row.
    pub fn add_row_broadcast(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor, AdError> {
        if bias.rows() != 1 || bias.cols() != a.cols() {
            return Err(Self::shape_err("add_row_broadcast", a, bias));
        }
        let (rows, cols) = (a.rows(), a.cols());
        let mut out = a.values().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bias.values()[c];
            }
        }
        let (ia, ib) = (self.lift(a)?, self.lift(bias)?);
        self.record(
            "add_row_broadcast",
            Op::AddRowBroadcast(ia, ib),
            rows,
            cols,
            out,
        )
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        let out = a.values().iter().map(|v| v.max(0.0)).collect();
        let ia = self.lift(a)?;
        self.record("relu", Op::Relu(ia), a.rows(), a.cols(), out)
    }

    /// Smooth GELU (tanh form).
    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        let out = a.values().iter().map(|&v| gelu_fwd(v)).collect();
        let ia = self.lift(a)?;
        self.record("gelu", Op::Gelu(ia), a.rows(), a.cols(), out)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        let out = a.values().iter().map(|&v| sigmoid_fwd(v)).collect();
        let ia = self.lift(a)?;
        self.record("sigmoid", Op::Sigmoid(ia), a.rows(), a.cols(), out)
    }

    /// Row-wise layer normalization with learnable 1×c gain and bias.
    pub fn layer_norm_rows(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, AdError> {
        if gamma.rows() != 1 || gamma.cols() != x.cols() {
            return Err(Self::shape_err("layer_norm_rows", x, gamma));
        }
        if beta.rows() != 1 || beta.cols() != x.cols() {
            return Err(Self::shape_err("layer_norm_rows", x, beta));
        }
        let (rows, cols) = (x.rows(), x.cols());
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x.values()[r * cols..(r + 1) * cols];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * inv * gamma.values()[c] + beta.values()[c];
            }
        }
        let (ix, ig, ib) = (self.lift(x)?, self.lift(gamma)?, self.lift(beta)?);
        self.record(
            "layer_norm_rows",
            Op::LayerNormRows {
                x: ix,
                gamma: ig,
                beta: ib,
                eps,
            },
            rows,
            cols,
            out,
        )
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        let s: f64 = a.values().iter().sum();
        let ia = self.lift(a)?;
        self.record("sum_all", Op::SumAll(ia), 1, 1, vec![s])
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        if a.numel() == 0 {
            return Err(AdError::EmptyInput { op: "mean_all" });
        }
        let s: f64 = a.values().iter().sum();
        let ia = self.lift(a)?;
        self.record(
            "mean_all",
            Op::MeanAll(ia),
            1,
            1,
            vec![s / a.numel() as f64],
        )
    }

    /// Elementwise division by a 1×1 tensor (gradient flows to both sides).
    pub fn div_by_scalar(&mut self, a: &Tensor, s: &Tensor) -> Result<Tensor, AdError> {
        if !s.is_scalar() {
            return Err(Self::shape_err("div_by_scalar", a, s));
        }
        let d = s.values()[0];
        let out = a.values().iter().map(|v| v / d).collect();
        let (ia, is) = (self.lift(a)?, self.lift(s)?);
        self.record(
            "div_by_scalar",
            Op::DivByScalar(ia, is),
            a.rows(),
            a.cols(),
            out,
        )
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor, AdError> {
        let out = a.values().iter().map(|v| v.ln()).collect();
        let ia = self.lift(a)?;
        self.record("log", Op::Log(ia), a.rows(), a.cols(), out)
    }

    /// Elementwise smooth-L1 (β = 1) of `a − b`.
    pub fn smooth_l1(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.shape() != b.shape() {
            return Err(Self::shape_err("smooth_l1", a, b));
        }
        let out = zip_raw(a.values(), b.values(), |x, y| {
            let d = x - y;
            if d.abs() < 1.0 {
                0.5 * d * d
            } else {
                d.abs() - 0.5
            }
        });
        let (ia, ib) = (self.lift(a)?, self.lift(b)?);
        self.record("smooth_l1", Op::SmoothL1(ia, ib), a.rows(), a.cols(), out)
    }

    /// Elementwise squared error (a − b)².
    pub fn sq_err(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.shape() != b.shape() {
            return Err(Self::shape_err("sq_err", a, b));
        }
        let out = zip_raw(a.values(), b.values(), |x, y| (x - y) * (x - y));
        let (ia, ib) = (self.lift(a)?, self.lift(b)?);
        self.record("sq_err", Op::SqErr(ia, ib), a.rows(), a.cols(), out)
    }

    /// Pairwise cosine similarity between rows of `a` (n×d) and rows of
    /// `b` (m×d); norms are guarded by +1e-8.
    pub fn cosine_sim(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, AdError> {
        if a.cols() != b.cols() {
            return Err(Self::shape_err("cosine_sim", a, b));
        }
        let (n, m, d) = (a.rows(), b.rows(), a.cols());
        let na: Vec<f64> = (0..n).map(|i| norm(a.row(i))).collect();
        let nb: Vec<f64> = (0..m).map(|j| norm(b.row(j))).collect();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let dot: f64 = (0..d).map(|k| a.row(i)[k] * b.row(j)[k]).sum();
                out[i * m + j] = dot / ((na[i] + COS_EPS) * (nb[j] + COS_EPS));
            }
        }
        let (ia, ib) = (self.lift(a)?, self.lift(b)?);
        self.record("cosine_sim", Op::CosineSim(ia, ib), n, m, out)
    }

    /// Mean softmax cross-entropy of logit rows against class indices.
    pub fn cross_entropy_rows(
        &mut self,
        logits: &Tensor,
        targets: &[usize],
    ) -> Result<Tensor, AdError> {
        if targets.len() != logits.rows() {
            return Err(AdError::TargetLenMismatch {
                expected: logits.rows(),
                got: targets.len(),
            });
        }
        for &t in targets {
            if t >= logits.cols() {
                return Err(AdError::IndexOutOfRange {
                    index: t,
                    rows: logits.cols(),
                });
            }
        }
        let (rows, cols) = (logits.rows(), logits.cols());
        let mut loss = 0.0;
        for r in 0..rows {
            let p = softmax_row(&logits.values()[r * cols..(r + 1) * cols]);
            loss -= p[targets[r]].max(PROB_CLAMP).ln();
        }
        loss /= rows as f64;
        let il = self.lift(logits)?;
        self.record(
            "cross_entropy_rows",
            Op::CrossEntropyRows(il, targets.to_vec()),
            1,
            1,
            vec![loss],
        )
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    /// Probabilities are clamped to [1e-7, 1−1e-7] before the log.
    pub fn bce_mean(&mut self, probs: &Tensor, targets: &[f64]) -> Result<Tensor, AdError> {
        if targets.len() != probs.numel() {
            return Err(AdError::TargetLenMismatch {
                expected: probs.numel(),
                got: targets.len(),
            });
        }
        let n = targets.len() as f64;
        let mut loss = 0.0;
        for (p, y) in probs.values().iter().zip(targets) {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let ip = self.lift(probs)?;
        self.record(
            "bce_mean",
            Op::BceMean(ip, targets.to_vec()),
            1,
            1,
            vec![loss / n],
        )
    }

    /// Max over consecutive row groups: (n·g)×c → n×c.
    pub fn group_max_rows(&mut self, a: &Tensor, group: usize) -> Result<Tensor, AdError> {
        if group == 0 || a.rows() % group != 0 {
            return Err(AdError::BadGrouping {
                rows: a.rows(),
                group,
            });
        }
        let (out_rows, cols) = (a.rows() / group, a.cols());
        let mut out = vec![f64::NEG_INFINITY; out_rows * cols];
        let mut argmax = vec![0usize; out_rows * cols];
        for r in 0..out_rows {
            for g in 0..group {
                let src = (r * group + g) * cols;
                for c in 0..cols {
                    let v = a.values()[src + c];
                    if v > out[r * cols + c] {
                        out[r * cols + c] = v;
                        argmax[r * cols + c] = r * group + g;
                    }
                }
            }
        }
        let ia = self.lift(a)?;
        self.record(
            "group_max_rows",
            Op::GroupMaxRows { x: ia, argmax },
            out_rows,
            cols,
            out,
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// registered parameter; unreachable parameters get zeros of matching
    /// shape. Consumes the graph: a second call is an error.
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradientMap, AdError> {
        if self.consumed {
            return Err(AdError::GraphConsumed);
        }
        let loss_id = match loss.node {
            Some((gid, nid)) if gid == self.id => nid,
            _ => return Err(AdError::ForeignGraph),
        };
        if !loss.is_scalar() {
            return Err(AdError::NotScalar {
                shape: loss.shape(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            if matches!(self.nodes[id].op, Op::Param | Op::Constant) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(id, &g, &mut grads);
        }

        let mut map = BTreeMap::new();
        for (name, &nid) in &self.params {
            let node = &self.nodes[nid];
            let grad = match &grads[nid] {
                Some(g) => Tensor::new(node.rows, node.cols, g.clone())?,
                None => Tensor::zeros(node.rows, node.cols),
            };
            map.insert(name.clone(), grad);
        }
        Ok(GradientMap { map })
    }

    fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    fn shape_of(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, add: &[f64]) {
        let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
        for (s, a) in slot.iter_mut().zip(add) {
            *s += a;
        }
    }

    #[allow(clippy::too_many_lines)]
    fn apply_vjp(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape_of(*a);
                let (_, n) = self.shape_of(*b);
                // dA = dC · Bᵀ
                let bt = transpose_raw(self.value(*b), k, n);
                let da = matmul_raw(g, &bt, m, n, k);
                Self::accumulate(grads, *a, m * k, &da);
                // dB = Aᵀ · dC
                let at = transpose_raw(self.value(*a), m, k);
                let db = matmul_raw(&at, g, k, m, n);
                Self::accumulate(grads, *b, k * n, &db);
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape_of(*a);
                let da = transpose_raw(g, c, r);
                Self::accumulate(grads, *a, r * c, &da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape_of(p);
                    Self::accumulate(grads, p, pr * pc, &g[offset..offset + pr * pc]);
                    offset += pr * pc;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.rows;
                let cols = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.shape_of(p);
                    let mut dp = vec![0.0; pr * pc];
                    for r in 0..rows {
                        dp[r * pc..(r + 1) * pc]
                            .copy_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                    }
                    Self::accumulate(grads, p, pr * pc, &dp);
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape_of(*a);
                let len = node.cols;
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    da[row * c + start..row * c + start + len]
                        .copy_from_slice(&g[row * len..(row + 1) * len]);
                }
                Self::accumulate(grads, *a, r * c, &da);
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = self.shape_of(*a);
                let mut da = vec![0.0; r * c];
                for (out_row, &src) in indices.iter().enumerate() {
                    for k in 0..c {
                        da[src * c + k] += g[out_row * c + k];
                    }
                }
                Self::accumulate(grads, *a, r * c, &da);
            }
            Op::SoftmaxRows(a, tau) => {
                let (r, c) = self.shape_of(*a);
                let y = &node.values;
                let mut da = vec![0.0; r * c];
                for row in 0..r {
                    let yr = &y[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for k in 0..c {
                        da[row * c + k] = yr[k] * (gr[k] - dot) / tau;
                    }
                }
                Self::accumulate(grads, *a, r * c, &da);
            }
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g.len(), g);
                Self::accumulate(grads, *b, g.len(), g);
            }
            Op::Sub(a, b) => {
                Self::accumulate(grads, *a, g.len(), g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                Self::accumulate(grads, *b, g.len(), &neg);
            }
            Op::Mul(a, b) => {
                let da = zip_raw(g, self.value(*b), |x, y| x * y);
                let db = zip_raw(g, self.value(*a), |x, y| x * y);
                Self::accumulate(grads, *a, g.len(), &da);
                Self::accumulate(grads, *b, g.len(), &db);
            }
            Op::Scale(a, f) => {
                let da: Vec<f64> = g.iter().map(|v| v * f).collect();
                Self::accumulate(grads, *a, g.len(), &da);
            }
            Op::AddRowBroadcast(a, bias) => {
                Self::accumulate(grads, *a, g.len(), g);
                let cols = node.cols;
                let mut db = vec![0.0; cols];
                for (i, v) in g.iter().enumerate() {
                    db[i % cols] += v;
                }
                Self::accumulate(grads, *bias, cols, &db);
            }
            Op::Relu(a) => {
                let da = zip_raw(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                Self::accumulate(grads, *a, g.len(), &da);
            }
            Op::Gelu(a) => {
                let da = zip_raw(g, self.value(*a), |gv, x| gv * gelu_grad(x));
                Self::accumulate(grads, *a, g.len(), &da);
            }
            Op::Sigmoid(a) => {
                let da = zip_raw(g, &node.values, |gv, s| gv * s * (1.0 - s));
                Self::accumulate(grads, *a, g.len(), &da);
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (r, c) = self.shape_of(*x);
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for row in 0..r {
                    let xr = &xv[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let (mean, var) = mean_var(xr);
                    let inv = 1.0 / (var + eps).sqrt();
                    // x̂ and dx̂ = dC ∘ γ
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for k in 0..c {
                        dx[row * c + k] =
                            inv * (dxhat[k] - mean_dxhat - xhat[k] * mean_dxhat_xhat);
                        dgamma[k] += gr[k] * xhat[k];
                        dbeta[k] += gr[k];
                    }
                }
                Self::accumulate(grads, *x, r * c, &dx);
                Self::accumulate(grads, *gamma, c, &dgamma);
                Self::accumulate(grads, *beta, c, &dbeta);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape_of(*a);
                let da = vec![g[0]; r * c];
                Self::accumulate(grads, *a, r * c, &da);
            }
            Op::MeanAll(a) => {
                let (r, c) = self.shape_of(*a);
                let da = vec![g[0] / (r * c) as f64; r * c];
                Self::accumulate(grads, *a, r * c, &da);
            }
            Op::DivByScalar(a, s) => {
                let sv = self.value(*s)[0];
                let av = self.value(*a);
                let da: Vec<f64> = g.iter().map(|v| v / sv).collect();
                let ds: f64 = g
                    .iter()
                    .zip(av)
                    .map(|(gv, xa)| -gv * xa / (sv * sv))
                    .sum();
                Self::accumulate(grads, *a, av.len(), &da);
                Self::accumulate(grads, *s, 1, &[ds]);
            }
            Op::Log(a) => {
                let da = zip_raw(g, self.value(*a), |gv, x| gv / x);
                Self::accumulate(grads, *a, g.len(), &da);
            }
            Op::SmoothL1(a, b) => {
                let d = zip_raw(self.value(*a), self.value(*b), |x, y| x - y);
                let da = zip_raw(g, &d, |gv, dv| {
                    gv * if dv.abs() < 1.0 { dv } else { dv.signum() }
                });
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                Self::accumulate(grads, *a, g.len(), &da);
                Self::accumulate(grads, *b, g.len(), &db);
            }
            Op::SqErr(a, b) => {
                let d = zip_raw(self.value(*a), self.value(*b), |x, y| x - y);
                let da = zip_raw(g, &d, |gv, dv| 2.0 * gv * dv);
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                Self::accumulate(grads, *a, g.len(), &da);
                Self::accumulate(grads, *b, g.len(), &db);
            }
            Op::CosineSim(a, b) => {
                let (n, d) = self.shape_of(*a);
                let (m, _) = self.shape_of(*b);
                let av = self.value(*a);
                let bv = self.value(*b);
                let s = &node.values;
                let na: Vec<f64> = (0..n).map(|i| norm(&av[i * d..(i + 1) * d])).collect();
                let nb: Vec<f64> = (0..m).map(|j| norm(&bv[j * d..(j + 1) * d])).collect();
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    let ai = &av[i * d..(i + 1) * d];
                    let alpha = na[i] + COS_EPS;
                    // unit direction of a_i (zero vector for zero rows)
                    let ua: Vec<f64> = if na[i] > 0.0 {
                        ai.iter().map(|v| v / na[i]).collect()
                    } else {
                        vec![0.0; d]
                    };
                    let mut coef_a = 0.0;
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let sij = s[i * m + j];
                        let beta = nb[j] + COS_EPS;
                        let bj = &bv[j * d..(j + 1) * d];
                        let ub: Vec<f64> = if nb[j] > 0.0 {
                            bj.iter().map(|v| v / nb[j]).collect()
                        } else {
                            vec![0.0; d]
                        };
                        for k in 0..d {
                            da[i * d + k] += gij * bj[k] / (alpha * beta);
                            db[j * d + k] +=
                                gij * (ai[k] / (alpha * beta) - sij * ub[k] / beta);
                        }
                        coef_a += gij * sij;
                    }
                    for k in 0..d {
                        da[i * d + k] -= coef_a * ua[k] / alpha;
                    }
                }
                Self::accumulate(grads, *a, n * d, &da);
                Self::accumulate(grads, *b, m * d, &db);
            }
            Op::CrossEntropyRows(logits, targets) => {
                let (r, c) = self.shape_of(*logits);
                let lv = self.value(*logits);
                let mut dl = vec![0.0; r * c];
                let scale = g[0] / r as f64;
                for row in 0..r {
                    let p = softmax_row(&lv[row * c..(row + 1) * c]);
                    for k in 0..c {
                        let onehot = if k == targets[row] { 1.0 } else { 0.0 };
                        dl[row * c + k] = scale * (p[k] - onehot);
                    }
                }
                Self::accumulate(grads, *logits, r * c, &dl);
            }
            Op::BceMean(probs, targets) => {
                let pv = self.value(*probs);
                let n = targets.len() as f64;
                let da: Vec<f64> = pv
                    .iter()
                    .zip(targets)
                    .map(|(p, y)| {
                        // clamped region has zero local gradient
                        if *p <= PROB_CLAMP || *p >= 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            g[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                Self::accumulate(grads, *probs, pv.len(), &da);
            }
            Op::GroupMaxRows { x, argmax } => {
                let (r, c) = self.shape_of(*x);
                let mut dx = vec![0.0; r * c];
                for (i, &src_row) in argmax.iter().enumerate() {
                    let col = i % c;
                    dx[src_row * c + col] += g[i];
                }
                Self::accumulate(grads, *x, r * c, &dx);
            }
        }
    }
}

// ── Shared numeric helpers ──────────────────────────────────────────────

const COS_EPS: f64 = 1e-8;

fn zip_raw(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
