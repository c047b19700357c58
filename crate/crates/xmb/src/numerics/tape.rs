//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Operations append nodes to the tape during the forward pass; `backward`
//! replays them in reverse creation order (which is a reverse topological
//! order, since parents always precede children) and accumulates gradients
//! additively into every node that requires them.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul, matmul_at, matmul_bt, Tensor};

pub const LAYER_NORM_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Add { a: usize, b: usize, bias_broadcast: bool },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f32 },
    EmbGather { table: usize, ids: Vec<usize> },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Softmax { x: usize },
    CausalSoftmax { x: usize },
    Gelu { x: usize },
    Reshape { x: usize },
    Slice { x: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Transpose { x: usize },
    Conv3x3 { x: usize, w: usize, b: usize },
    CrossEntropyMean { logits: usize, targets: Vec<usize> },
    SumAll { x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations with parent references.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Record an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("grad shape matches value shape")
        })
    }

    fn requires(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    // ── forward primitives ──────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Self::shape_err(
                "matmul",
                format!("expected 2-D operands, got {sa:?} and {sb:?}"),
            ));
        }
        if sa[1] != sb[0] {
            return Err(Self::shape_err(
                "matmul",
                format!("inner axes differ: lhs axis 1 is {}, rhs axis 0 is {}", sa[1], sb[0]),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul(self.nodes[a.0].value.data(), self.nodes[b.0].value.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.requires(&[a.0, b.0]);
        Ok(self.push(value, Op::Matmul { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise add. A trailing-axis vector on the right broadcasts over
    /// rows (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let bias_broadcast = sa != sb;
        if bias_broadcast && !(sb.len() == 1 && sa.last() == Some(&sb[0])) {
            return Err(Self::shape_err(
                "add",
                format!("shapes {sa:?} and {sb:?} neither match nor bias-broadcast"),
            ));
        }
        let bd = self.nodes[b.0].value.data();
        let data: Vec<f32> = if bias_broadcast {
            let n = sb[0];
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % n])
                .collect()
        } else {
            self.nodes[a.0].value.data().iter().zip(bd).map(|(&x, &y)| x + y).collect()
        };
        let value = Tensor::new(sa, data)?;
        let rg = self.requires(&[a.0, b.0]);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0, bias_broadcast }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Self::shape_err("mul", format!("shapes {sa:?} and {sb:?} differ")));
        }
        let data: Vec<f32> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(sa, data)?;
        let rg = self.requires(&[a.0, b.0]);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let data: Vec<f32> = self.nodes[a.0].value.data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data).unwrap();
        let rg = self.requires(&[a.0]);
        self.push(value, Op::Scale { a: a.0, c }, rg)
    }

    /// Gather rows of `table` ([V, d]) by id.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.nodes[table.0].value.shape();
        if st.len() != 2 {
            return Err(Self::shape_err(
                "embedding_gather",
                format!("table must be 2-D, got {st:?}"),
            ));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index {
                op: "embedding_gather",
                detail: format!("id {bad} out of range for table with {v} rows"),
            });
        }
        let td = self.nodes[table.0].value.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.requires(&[table.0]);
        Ok(self.push(value, Op::EmbGather { table: table.0, ids: ids.to_vec() }, rg))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let d = *sx.last().ok_or_else(|| {
            Self::shape_err("layer_norm", "input must have rank >= 1".into())
        })?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.nodes[v.0].value.shape();
            if s != [d] {
                return Err(Self::shape_err(
                    "layer_norm",
                    format!("{name} shape {s:?} does not match last axis {d}"),
                ));
            }
        }
        let xd = self.nodes[x.0].value.data();
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut data = vec![0.0f32; xd.len()];
        for (row, out) in xd.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out[j] = (row[j] - mean) * rstd * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(sx, data)?;
        let rg = self.requires(&[x.0, gamma.0, beta.0]);
        Ok(self.push(value, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 }, rg))
    }

    /// Row-wise softmax over the last axis, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let d = *sx.last().ok_or_else(|| {
            Self::shape_err("softmax", "input must have rank >= 1".into())
        })?;
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![0.0f32; xd.len()];
        for (row, out) in xd.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
            softmax_row(row, out);
        }
        let value = Tensor::new(sx, data)?;
        let rg = self.requires(&[x.0]);
        Ok(self.push(value, Op::Softmax { x: x.0 }, rg))
    }

    /// Softmax over a square score matrix where row `i` may only attend to
    /// columns `0..=i`; masked entries are exactly zero in the output.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        if sx.len() != 2 || sx[0] != sx[1] {
            return Err(Self::shape_err(
                "causal_softmax",
                format!("expected square 2-D scores, got {sx:?}"),
            ));
        }
        let t = sx[0];
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![0.0f32; xd.len()];
        for i in 0..t {
            let row = &xd[i * t..i * t + i + 1];
            softmax_row(row, &mut data[i * t..i * t + i + 1]);
        }
        let value = Tensor::new(sx, data)?;
        let rg = self.requires(&[x.0]);
        Ok(self.push(value, Op::CausalSoftmax { x: x.0 }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f32> = self.nodes[x.0].value.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data).unwrap();
        let rg = self.requires(&[x.0]);
        self.push(value, Op::Gelu { x: x.0 }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(Self::shape_err(
                "reshape",
                format!(
                    "cannot reshape {:?} ({} values) to {shape:?} ({numel} values)",
                    self.nodes[x.0].value.shape(),
                    self.nodes[x.0].value.numel()
                ),
            ));
        }
        let value = Tensor::new(shape, self.nodes[x.0].value.data().to_vec())?;
        let rg = self.requires(&[x.0]);
        Ok(self.push(value, Op::Reshape { x: x.0 }, rg))
    }

    /// Contiguous range along one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        if axis >= sx.len() {
            return Err(Self::shape_err(
                "slice",
                format!("axis {axis} out of range for shape {sx:?}"),
            ));
        }
        if start + len > sx[axis] {
            return Err(Self::shape_err(
                "slice",
                format!("range {start}..{} exceeds axis {axis} of extent {}", start + len, sx[axis]),
            ));
        }
        let mut out_shape = sx.clone();
        out_shape[axis] = len;
        let data = copy_axis_range(self.nodes[x.0].value.data(), &sx, axis, start, len);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.requires(&[x.0]);
        Ok(self.push(value, Op::Slice { x: x.0, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "no inputs".into()));
        }
        let s0 = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= s0.len() {
            return Err(Self::shape_err(
                "concat",
                format!("axis {axis} out of range for shape {s0:?}"),
            ));
        }
        let mut total = 0usize;
        for p in parts {
            let sp = self.nodes[p.0].value.shape();
            if sp.len() != s0.len()
                || sp.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Self::shape_err(
                    "concat",
                    format!("shape {sp:?} incompatible with {s0:?} along axis {axis}"),
                ));
            }
            total += sp[axis];
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = total;
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut data = vec![0.0f32; outer * total * inner];
        let mut offset = 0usize;
        for p in parts {
            let sp = self.nodes[p.0].value.shape();
            let ext = sp[axis];
            let pd = self.nodes[p.0].value.data();
            for o in 0..outer {
                let src = &pd[o * ext * inner..(o + 1) * ext * inner];
                let dst_start = (o * total + offset) * inner;
                data[dst_start..dst_start + ext * inner].copy_from_slice(src);
            }
            offset += ext;
        }
        let value = Tensor::new(out_shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.requires(&ids);
        Ok(self.push(value, Op::Concat { parts: ids, axis }, rg))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        if sx.len() != 2 {
            return Err(Self::shape_err("transpose", format!("expected 2-D, got {sx:?}")));
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = self.nodes[x.0].value.data();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        let rg = self.requires(&[x.0]);
        Ok(self.push(value, Op::Transpose { x: x.0 }, rg))
    }

    /// 3x3 same-padding convolution on a [C, H, W] image.
    /// `w` is [C_out, C_in * 9] with kernel index `cin * 9 + ky * 3 + kx`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let sw = self.nodes[w.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        if sx.len() != 3 {
            return Err(Self::shape_err("conv3x3", format!("input must be [C,H,W], got {sx:?}")));
        }
        let (cin, h, wd) = (sx[0], sx[1], sx[2]);
        if sw.len() != 2 || sw[1] != cin * 9 {
            return Err(Self::shape_err(
                "conv3x3",
                format!("weights must be [C_out, {}], got {sw:?}", cin * 9),
            ));
        }
        let cout = sw[0];
        if sb != [cout] {
            return Err(Self::shape_err(
                "conv3x3",
                format!("bias must be [{cout}], got {sb:?}"),
            ));
        }
        let xd = self.nodes[x.0].value.data();
        let wdta = self.nodes[w.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut data = vec![0.0f32; cout * h * wd];
        for co in 0..cout {
            let wrow = &wdta[co * cin * 9..(co + 1) * cin * 9];
            let out = &mut data[co * h * wd..(co + 1) * h * wd];
            out.fill(bd[co]);
            for ci in 0..cin {
                let plane = &xd[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = wrow[ci * 9 + ky * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_shifted(out, plane, h, wd, ky as isize - 1, kx as isize - 1, wv);
                    }
                }
            }
        }
        let value = Tensor::new(vec![cout, h, wd], data)?;
        let rg = self.requires(&[x.0, w.0, b.0]);
        Ok(self.push(value, Op::Conv3x3 { x: x.0, w: w.0, b: b.0 }, rg))
    }

    /// Mean over positions of -log softmax(logits)[t, target_t].
    pub fn cross_entropy_nll(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sl = self.nodes[logits.0].value.shape().to_vec();
        if sl.len() != 2 {
            return Err(Self::shape_err(
                "cross_entropy_nll",
                format!("logits must be [T, V], got {sl:?}"),
            ));
        }
        let (t, v) = (sl[0], sl[1]);
        if targets.len() != t {
            return Err(Self::shape_err(
                "cross_entropy_nll",
                format!("{} targets for {t} logit rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::Index {
                op: "cross_entropy_nll",
                detail: format!("target id {bad} out of range for vocabulary {v}"),
            });
        }
        let ld = self.nodes[logits.0].value.data();
        let mut total = 0.0f32;
        for (row, &tgt) in ld.chunks_exact(v).zip(targets) {
            total += nll_row(row, tgt);
        }
        let value = Tensor::scalar(total / t as f32);
        let rg = self.requires(&[logits.0]);
        Ok(self.push(
            value,
            Op::CrossEntropyMean { logits: logits.0, targets: targets.to_vec() },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: f32 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.requires(&[x.0]);
        self.push(Tensor::scalar(total), Op::SumAll { x: x.0 }, rg)
    }

    // ── backward ────────────────────────────────────────────────────

    fn push_grad(&mut self, id: usize, contribution: &[f32]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = &mut self.grads[id];
        match slot {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contribution) {
                    *gv += cv;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Populate gradients of `loss` with respect to every recorded value
    /// that requires them. `loss` must be a scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "backward on a loss that does not depend on any differentiable input".into(),
            ));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            for (parent, contribution) in self.propagate(id, &g) {
                self.push_grad(parent, &contribution);
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Gradient contributions of node `id` to its parents, given the
    /// incoming gradient `g`. Pure with respect to tape state.
    fn propagate(&self, id: usize, g: &[f32]) -> Vec<(usize, Vec<f32>)> {
        let mut out: Vec<(usize, Vec<f32>)> = Vec::new();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a].value.shape();
                let sb = self.nodes[b].value.shape();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a].requires_grad {
                    let da = matmul_bt(g, self.nodes[b].value.data(), m, n, k);
                    out.push((a, da));
                }
                if self.nodes[b].requires_grad {
                    let db = matmul_at(self.nodes[a].value.data(), g, m, k, n);
                    out.push((b, db));
                }
            }
            Op::Add { a, b, bias_broadcast } => {
                let (a, b, bias_broadcast) = (*a, *b, *bias_broadcast);
                out.push((a, g.to_vec()));
                if bias_broadcast {
                    let n = self.nodes[b].value.numel();
                    let mut db = vec![0.0f32; n];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    out.push((b, db));
                } else {
                    out.push((b, g.to_vec()));
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let da: Vec<f32> =
                        g.iter().zip(self.nodes[b].value.data()).map(|(&gv, &bv)| gv * bv).collect();
                    out.push((a, da));
                }
                if self.nodes[b].requires_grad {
                    let db: Vec<f32> =
                        g.iter().zip(self.nodes[a].value.data()).map(|(&gv, &av)| gv * av).collect();
                    out.push((b, db));
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<f32> = g.iter().map(|&gv| gv * c).collect();
                out.push((a, da));
            }
            Op::EmbGather { table, ids } => {
                let table = *table;
                let d = self.nodes[table].value.shape()[1];
                let mut dt = vec![0.0f32; self.nodes[table].value.numel()];
                for (t, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[t * d + j];
                    }
                }
                out.push((table, dt));
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = *self.nodes[x].value.shape().last().unwrap();
                let xd = self.nodes[x].value.data();
                let gd = self.nodes[gamma].value.data();
                let rows = xd.len() / d;
                let mut dx = vec![0.0f32; xd.len()];
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f32>() / d as f32;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let mut sum_gg = 0.0f32;
                    let mut sum_ggx = 0.0f32;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let gg = grow[j] * gd[j];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    let inv_d = 1.0 / d as f32;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * rstd;
                        let gg = grow[j] * gd[j];
                        dx[r * d + j] = rstd * (gg - inv_d * sum_gg - xhat * inv_d * sum_ggx);
                    }
                }
                out.push((x, dx));
                out.push((gamma, dgamma));
                out.push((beta, dbeta));
            }
            Op::Softmax { x } => {
                let x = *x;
                let d = *self.nodes[id].value.shape().last().unwrap();
                let yd = self.nodes[id].value.data();
                let mut dx = vec![0.0f32; yd.len()];
                for r in 0..yd.len() / d {
                    let y = &yd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let dot: f32 = y.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..d {
                        dx[r * d + j] = y[j] * (grow[j] - dot);
                    }
                }
                out.push((x, dx));
            }
            Op::CausalSoftmax { x } => {
                let x = *x;
                let t = self.nodes[id].value.shape()[0];
                let yd = self.nodes[id].value.data();
                let mut dx = vec![0.0f32; yd.len()];
                for i in 0..t {
                    let y = &yd[i * t..i * t + i + 1];
                    let grow = &g[i * t..i * t + i + 1];
                    let dot: f32 = y.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..=i {
                        dx[i * t + j] = y[j] * (grow[j] - dot);
                    }
                }
                out.push((x, dx));
            }
            Op::Gelu { x } => {
                let x = *x;
                let xd = self.nodes[x].value.data();
                let dx: Vec<f32> = xd.iter().zip(g).map(|(&v, &gv)| gv * gelu_bwd(v)).collect();
                out.push((x, dx));
            }
            Op::Reshape { x } => {
                let x = *x;
                out.push((x, g.to_vec()));
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let sx = self.nodes[x].value.shape().to_vec();
                let len = self.nodes[id].value.shape()[axis];
                let mut dx = vec![0.0f32; self.nodes[x].value.numel()];
                scatter_axis_range(&mut dx, g, &sx, axis, start, len);
                out.push((x, dx));
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0usize;
                for &p in parts {
                    let ext = self.nodes[p].value.shape()[axis];
                    if self.nodes[p].requires_grad {
                        let mut dp = vec![0.0f32; self.nodes[p].value.numel()];
                        for o in 0..outer {
                            let src_start = (o * total + offset) * inner;
                            dp[o * ext * inner..(o + 1) * ext * inner]
                                .copy_from_slice(&g[src_start..src_start + ext * inner]);
                        }
                        out.push((p, dp));
                    }
                    offset += ext;
                }
            }
            Op::Transpose { x } => {
                let x = *x;
                let sx = self.nodes[x].value.shape();
                let (m, n) = (sx[0], sx[1]);
                let mut dx = vec![0.0f32; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                out.push((x, dx));
            }
            Op::Conv3x3 { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let sx = self.nodes[x].value.shape().to_vec();
                let (cin, h, wd) = (sx[0], sx[1], sx[2]);
                let cout = self.nodes[w].value.shape()[0];
                let xd = self.nodes[x].value.data();
                let wdta = self.nodes[w].value.data();
                if self.nodes[b].requires_grad {
                    let mut db = vec![0.0f32; cout];
                    for co in 0..cout {
                        db[co] = g[co * h * wd..(co + 1) * h * wd].iter().sum();
                    }
                    out.push((b, db));
                }
                if self.nodes[w].requires_grad {
                    let mut dw = vec![0.0f32; cout * cin * 9];
                    for co in 0..cout {
                        let grow = &g[co * h * wd..(co + 1) * h * wd];
                        for ci in 0..cin {
                            let plane = &xd[ci * h * wd..(ci + 1) * h * wd];
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    dw[co * cin * 9 + ci * 9 + ky * 3 + kx] = dot_shifted(
                                        grow,
                                        plane,
                                        h,
                                        wd,
                                        ky as isize - 1,
                                        kx as isize - 1,
                                    );
                                }
                            }
                        }
                    }
                    out.push((w, dw));
                }
                if self.nodes[x].requires_grad {
                    let mut dx = vec![0.0f32; cin * h * wd];
                    for co in 0..cout {
                        let grow = &g[co * h * wd..(co + 1) * h * wd];
                        for ci in 0..cin {
                            let dplane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let wv = wdta[co * cin * 9 + ci * 9 + ky * 3 + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    // transposed conv: shift in the opposite direction
                                    accumulate_shifted(
                                        dplane,
                                        grow,
                                        h,
                                        wd,
                                        1 - ky as isize,
                                        1 - kx as isize,
                                        wv,
                                    );
                                }
                            }
                        }
                    }
                    out.push((x, dx));
                }
            }
            Op::CrossEntropyMean { logits, targets } => {
                let logits = *logits;
                let sl = self.nodes[logits].value.shape();
                let (t, v) = (sl[0], sl[1]);
                let ld = self.nodes[logits].value.data();
                let scale = g[0] / t as f32;
                let mut dl = vec![0.0f32; t * v];
                let mut probs = vec![0.0f32; v];
                for (r, &tgt) in targets.iter().enumerate() {
                    softmax_row(&ld[r * v..(r + 1) * v], &mut probs);
                    let drow = &mut dl[r * v..(r + 1) * v];
                    for j in 0..v {
                        drow[j] = probs[j] * scale;
                    }
                    drow[tgt] -= scale;
                }
                out.push((logits, dl));
            }
            Op::SumAll { x } => {
                let x = *x;
                let dx = vec![g[0]; self.nodes[x].value.numel()];
                out.push((x, dx));
            }
        }
        out
    }
}

// ── scalar helpers ─────────────────────────────────────────────────

pub(crate) fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub(crate) fn nll_row(row: &[f32], target: usize) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let logsum = row.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
    logsum - row[target]
}

pub(crate) fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn copy_axis_range(
    data: &[f32],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Vec<f32> {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ext = shape[axis];
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        out.extend_from_slice(&data[base..base + len * inner]);
    }
    out
}

fn scatter_axis_range(
    dst: &mut [f32],
    src: &[f32],
    shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ext = shape[axis];
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        dst[base..base + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
    }
}

/// out[i, j] += w * plane[i + dy, j + dx] for in-bounds source pixels.
fn accumulate_shifted(
    out: &mut [f32],
    plane: &[f32],
    h: usize,
    w: usize,
    dy: isize,
    dx: isize,
    wv: f32,
) {
    for i in 0..h as isize {
        let si = i + dy;
        if si < 0 || si >= h as isize {
            continue;
        }
        let (j0, j1) = ((-dx).max(0), (w as isize - dx).min(w as isize));
        let orow = &mut out[(i as usize) * w..(i as usize + 1) * w];
        let prow = &plane[(si as usize) * w..(si as usize + 1) * w];
        for j in j0..j1 {
            orow[j as usize] += wv * prow[(j + dx) as usize];
        }
    }
}

/// sum over (i, j) of g[i, j] * plane[i + dy, j + dx] for in-bounds pixels.
fn dot_shifted(g: &[f32], plane: &[f32], h: usize, w: usize, dy: isize, dx: isize) -> f32 {
    let mut acc = 0.0f32;
    for i in 0..h as isize {
        let si = i + dy;
        if si < 0 || si >= h as isize {
            continue;
        }
        let (j0, j1) = ((-dx).max(0), (w as isize - dx).min(w as isize));
        let grow = &g[(i as usize) * w..(i as usize + 1) * w];
        let prow = &plane[(si as usize) * w..(si as usize + 1) * w];
        for j in j0..j1 {
            acc += grow[j as usize] * prow[(j + dx) as usize];
        }
    }
    acc
}
