use std::rc::Rc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse attention pattern: for every query row, the list of key rows it
/// attends to. A row with no keys produces a zero output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl AttentionLayout {
    pub fn from_groups<G: AsRef<[usize]>>(groups: &[G]) -> Self {
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for g in groups {
            keys.extend_from_slice(g.as_ref());
            offsets.push(keys.len());
        }
        Self { offsets, keys }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn keys(&self, row: usize) -> &[usize] {
        &self.keys[self.offsets[row]..self.offsets[row + 1]]
    }

    pub fn total_keys(&self) -> usize {
        self.keys.len()
    }

    fn offset(&self, row: usize) -> usize {
        self.offsets[row]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    NegSqDist(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttentionLayout>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    VrLoss {
        yhat: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    SquaredError {
        x: Var,
        target: f64,
    },
    DotConst {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape of operations. Nodes are stored in creation order, so
/// every node's inputs precede it and a reverse sweep is a valid
/// topological traversal.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    macs: u64,
}

fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    Tensor {
        shape,
        data,
        requires_grad: false,
        grad: None,
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap_or(&1);
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by recorded matrix products
    /// and attention score/aggregation steps.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        let value = raw(t.shape, t.data);
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = raw(t.shape, t.data);
        self.push(value, Op::Leaf, false)
    }

    /// Records a named parameter leaf (value copied from `t`).
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let value = raw(t.shape.clone(), t.data.clone());
        let v = self.push(value, Op::Leaf, t.requires_grad);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    /// Adds the leaf gradient of `v` (if any) into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(a), self.data(b), m, k, n, &mut out);
        self.macs += (m * k * n) as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(raw(vec![m, n], out), Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(raw(shape, out), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        if self.value(bias).len() != n {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(r, c)| r + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(raw(shape, out), Op::AddBias(x, bias), needs))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(raw(shape, out), op, needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    /// Elementwise `-(x - center)²`.
    pub fn neg_sq_dist(&mut self, x: Var, center: f64) -> Var {
        self.unary(
            x,
            |v| -(v - center) * (v - center),
            Op::NegSqDist(x, center),
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                len: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..len {
                    buf[j] = src[(o * len + j) * inner + i];
                }
                kernels::softmax_in_place(&mut buf);
                for j in 0..len {
                    out[(o * len + j) * inner + i] = buf[j];
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(raw(shape, out), Op::Softmax { x, axis }, needs))
    }

    /// Normalizes every vector along the last axis (biased variance), then
    /// applies `gamma·x̂ + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim("layernorm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layernorm eps must be positive".into()));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            raw(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, cols) = rows_cols(self.shape(first));
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            raw(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if len == 0 || start + len > rows {
            return Err(Error::Index {
                what: "slice_rows",
                index: start + len.max(1) - 1,
                len: rows,
            });
        }
        let out = self.data(x)[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(x);
        Ok(self.push(raw(vec![len, cols], out), Op::SliceRows { x, start }, needs))
    }

    /// Row `r` of the output is row `index[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            raw(vec![index.len(), cols], out),
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Multi-head scaled dot-product attention restricted to `layout`.
    ///
    /// `q`, `k`, `v` are `R×D` with head `h` occupying columns
    /// `h·D/heads..(h+1)·D/heads`. Output row `r`, head `h` is
    /// `Σ_j softmax_j(q_rh·k_jh/√Hd)·v_jh` over `j ∈ layout.keys(r)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::dim("attention", &shape, self.shape(k)));
        }
        let (rows, d) = rows_cols(&shape);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        if layout.rows() != rows {
            return Err(Error::dim("attention layout", &[layout.rows()], &[rows]));
        }
        if let Some(&bad) = layout.keys.iter().find(|&&j| j >= rows) {
            return Err(Error::Index {
                what: "attention key",
                index: bad,
                len: rows,
            });
        }
        let hd = d / heads;
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; layout.total_keys() * heads];
        let mut w = Vec::new();
        for r in 0..rows {
            let keys = layout.keys(r);
            if keys.is_empty() {
                continue;
            }
            let base = layout.offset(r) * heads;
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let query = &qd[r * d..][cols.clone()];
                kernels::scaled_dot_weights(
                    query,
                    keys.iter().map(|&j| &kd[j * d..][cols.clone()]),
                    &mut w,
                );
                let orow = &mut out[r * d..][cols.clone()];
                for (&j, &p) in keys.iter().zip(&w) {
                    for (o, &val) in orow.iter_mut().zip(&vd[j * d..][cols.clone()]) {
                        *o += p * val;
                    }
                }
                probs[base + h * keys.len()..base + (h + 1) * keys.len()].copy_from_slice(&w);
            }
        }
        self.macs += 2 * (layout.total_keys() * d) as u64;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            raw(shape, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            needs,
        ))
    }

    /// Attention weights computed by an [`Graph::attention`] node for query
    /// row `row` and head `head`, in the order of `layout.keys(row)`.
    pub fn attention_weights(&self, node: Var, row: usize, head: usize) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention {
                heads,
                layout,
                probs,
                ..
            } => {
                if row >= layout.rows() || head >= *heads {
                    return None;
                }
                let n = layout.keys(row).len();
                let base = layout.offset(row) * heads + head * n;
                Some(&probs[base..base + n])
            }
            _ => None,
        }
    }

    pub fn attention_layout(&self, node: Var) -> Option<(&AttentionLayout, usize)> {
        match &self.nodes[node.0].op {
            Op::Attention { layout, heads, .. } => Some((layout, *heads)),
            _ => None,
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(raw(vec![1], vec![s]), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let needs = self.needs(x);
        self.push(raw(vec![1], vec![s]), Op::Mean(x), needs)
    }

    /// `1 − ⟨y, ŷ⟩ / (‖y‖·‖ŷ‖)` against a constant target `y`.
    pub fn vr_loss(&mut self, yhat: Var, target: &[f64]) -> Result<Var> {
        let pred = self.data(yhat);
        if pred.len() != target.len() {
            return Err(Error::dim("vr_loss", &[target.len()], self.shape(yhat)));
        }
        let loss = cosine_loss(target, pred)?;
        let needs = self.needs(yhat);
        Ok(self.push(
            raw(vec![1], vec![loss]),
            Op::VrLoss {
                yhat,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let mut probs = self.data(logits).to_vec();
        if target >= probs.len() {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: target,
                len: probs.len(),
            });
        }
        let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - probs[target];
        kernels::softmax_in_place(&mut probs);
        let needs = self.needs(logits);
        Ok(self.push(
            raw(vec![1], vec![loss]),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            needs,
        ))
    }

    /// `(x − target)²` for a single-element `x`.
    pub fn squared_error(&mut self, x: Var, target: f64) -> Result<Var> {
        if self.value(x).len() != 1 {
            return Err(Error::Contract("squared_error expects a scalar".into()));
        }
        let d = self.data(x)[0] - target;
        let needs = self.needs(x);
        Ok(self.push(
            raw(vec![1], vec![d * d]),
            Op::SquaredError { x, target },
            needs,
        ))
    }

    /// `Σ xᵢ·wᵢ` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return Err(Error::dim("dot_const", self.shape(x), &[weights.len()]));
        }
        let s = kernels::dot(self.data(x), weights);
        let needs = self.needs(x);
        Ok(self.push(
            raw(vec![1], vec![s]),
            Op::DotConst {
                x,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            if let Op::Leaf = self.nodes[idx].op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&nodes[a.0].value.shape);
                let n = out.shape[1];
                if let Some(ga) = slot(nodes, grads, *a) {
                    kernels::matmul_a_bt_acc(g, &nodes[b.0].value.data, m, n, k, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    kernels::matmul_at_b_acc(&nodes[a.0].value.data, g, m, k, n, gb);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_assign(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_assign(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_assign(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(s, v)| *s -= v);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let n = nodes[bias.0].value.data.len();
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_assign(gx, g);
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for row in g.chunks(n) {
                        add_assign(gb, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(s, v)| *s += c * v);
                }
            }
            Op::Gelu(x) => {
                let xd = &nodes[x.0].value.data;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xd[i]);
                    }
                }
            }
            Op::NegSqDist(x, c) => {
                let xd = &nodes[x.0].value.data;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += -2.0 * (xd[i] - c) * g[i];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&out.shape, *axis);
                let y = &out.data;
                if let Some(gx) = slot(nodes, grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let s: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
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
                let d = nodes[gamma.0].value.data.len();
                let gam = &nodes[gamma.0].value.data;
                if let Some(gg) = slot(nodes, grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *beta) {
                    for gr in g.chunks(d) {
                        add_assign(gb, gr);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let dn = d as f64;
                    let mut dh = vec![0.0; d];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                            s1 += dh[j];
                            s2 += dh[j] * hr[j];
                        }
                        let xr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            xr[j] += inv / dn * (dn * dh[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let n = nodes[p.0].value.data.len();
                    if let Some(gp) = slot(nodes, grads, *p) {
                        add_assign(gp, &g[at..at + n]);
                    }
                    at += n;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = out.shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_assign(&mut gx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::GatherRows { x, index } => {
                let cols = out.shape[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        add_assign(&mut gx[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.backprop_attention(g, (*q, *k, *v), *heads, layout, probs, grads),
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let c = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|s| *s += c);
                }
            }
            Op::VrLoss { yhat, target } => {
                let y = &nodes[yhat.0].value.data;
                if let Some(gy) = slot(nodes, grads, *yhat) {
                    let nt = target.iter().map(|t| t * t).sum::<f64>().sqrt();
                    let ny = y.iter().map(|t| t * t).sum::<f64>().sqrt();
                    let dot = kernels::dot(target, y);
                    for i in 0..y.len() {
                        let d = target[i] / (nt * ny) - dot * y[i] / (nt * ny * ny * ny);
                        gy[i] -= g[0] * d;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (i, p) in probs.iter().enumerate() {
                        let onehot = if i == *target { 1.0 } else { 0.0 };
                        gl[i] += g[0] * (p - onehot);
                    }
                }
            }
            Op::SquaredError { x, target } => {
                let xv = nodes[x.0].value.data[0];
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx[0] += 2.0 * (xv - target) * g[0];
                }
            }
            Op::DotConst { x, weights } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().zip(weights).for_each(|(s, w)| *s += g[0] * w);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        layout: &AttentionLayout,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (rows, d) = rows_cols(&nodes[q.0].value.shape);
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (
            &nodes[q.0].value.data,
            &nodes[k.0].value.data,
            &nodes[v.0].value.data,
        );
        let mut gq = nodes[q.0].needs_grad.then(|| vec![0.0; rows * d]);
        let mut gk = nodes[k.0].needs_grad.then(|| vec![0.0; rows * d]);
        let mut gv = nodes[v.0].needs_grad.then(|| vec![0.0; rows * d]);
        let mut dscore = Vec::new();
        for r in 0..rows {
            let keys = layout.keys(r);
            if keys.is_empty() {
                continue;
            }
            let base = layout.offset(r) * heads;
            for h in 0..heads {
                let c0 = h * hd;
                let p = &probs[base + h * keys.len()..base + (h + 1) * keys.len()];
                let go = &g[r * d + c0..r * d + c0 + hd];
                if let Some(gv) = gv.as_mut() {
                    for (&j, &pj) in keys.iter().zip(p) {
                        let dst = &mut gv[j * d + c0..j * d + c0 + hd];
                        dst.iter_mut().zip(go).for_each(|(s, o)| *s += pj * o);
                    }
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                dscore.clear();
                dscore.extend(
                    keys.iter()
                        .map(|&j| kernels::dot(go, &vd[j * d + c0..j * d + c0 + hd])),
                );
                let s: f64 = dscore.iter().zip(p).map(|(a, b)| a * b).sum();
                for (ds, &pj) in dscore.iter_mut().zip(p) {
                    *ds = pj * (*ds - s) * scale;
                }
                if let Some(gq) = gq.as_mut() {
                    let dst = &mut gq[r * d + c0..r * d + c0 + hd];
                    for (&j, &ds) in keys.iter().zip(&dscore) {
                        let kr = &kd[j * d + c0..j * d + c0 + hd];
                        dst.iter_mut().zip(kr).for_each(|(s, kv)| *s += ds * kv);
                    }
                }
                if let Some(gk) = gk.as_mut() {
                    let qr = &qd[r * d + c0..r * d + c0 + hd];
                    for (&j, &ds) in keys.iter().zip(&dscore) {
                        let dst = &mut gk[j * d + c0..j * d + c0 + hd];
                        dst.iter_mut().zip(qr).for_each(|(s, qv)| *s += ds * qv);
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(local) = local {
                let n = local.len();
                let dst = grads[var.0].get_or_insert_with(|| vec![0.0; n]);
                add_assign(dst, &local);
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn cosine_loss(y: &[f64], yhat: &[f64]) -> Result<f64> {
    // One pass with a shared summation order, and a single square root of
    // the product of squared norms: identical inputs then give exactly 0.
    let (mut yy, mut hh, mut yh) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        yy += a * a;
        hh += b * b;
        yh += a * b;
    }
    if yy == 0.0 || hh == 0.0 {
        return Err(Error::Contract("vr_loss on a zero-norm vector".into()));
    }
    Ok(1.0 - yh / (yy * hh).sqrt())
}
