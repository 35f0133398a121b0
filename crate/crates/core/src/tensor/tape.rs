use super::{matmul_raw, sigmoid, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    ClampLn {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    RowSum(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SegmentMean {
        x: Var,
        ids: Vec<usize>,
        counts: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode computation graph recorded during one forward pass.
///
/// Kernels are methods on the tape; each appends one node and returns its
/// [`Var`]. Nodes are never mutated after creation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node reachable from it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Side of the kink each relu and clamp input lies on, in tape order.
    /// Two evaluations with equal patterns lie in the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.value(*x).data().iter().map(|v| *v > 0.0)),
                Op::ClampLn { x, lo, hi } => out.extend(self.value(*x).data().iter().map(|v| *v >= *lo && *v <= *hi)),
                _ => {}
            }
        }
        out
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::Dimension(format!(
                "matmul of {} and {}",
                shape_str(av),
                shape_str(bv)
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(Error::Dimension(format!("transpose of {}", shape_str(av))));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let out = transpose_raw(av.data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let bt = self.transpose(b)?;
        self.matmul(a, bt)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "{name} of {} and {}",
                shape_str(av),
                shape_str(bv)
            )));
        }
        Ok(av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "div", |x, y| x / y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Div(a, b), rg))
    }

    /// `x [rows × n] + bias [n]`, bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::Dimension(format!(
                "row-broadcast add of {} and {}",
                shape_str(xv),
                shape_str(bv)
            )));
        }
        let b = bv.data();
        let out: Vec<f64> = xv.data().iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), rg))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = xv.data().iter().map(|v| scale * v + shift).collect();
        let t = Tensor {
            shape: xv.shape().to_vec(),
            data: out,
        };
        let rg = self.rg(x);
        self.push(t, Op::Affine(x, scale), rg)
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor {
            shape: xv.shape().to_vec(),
            data: xv.data().iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary(x, sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn clamp_ln(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.unary(x, |v| v.clamp(lo, hi).ln());
        let rg = self.rg(x);
        self.push(t, Op::ClampLn { x, lo, hi }, rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sums of a `[rows × cols]` tensor, shape `[rows]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let out: Vec<f64> = xv.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::RowSum(x), rg)
    }

    /// Row-wise softmax of `logits + add_mask`, where `add_mask` holds
    /// `0` or `-inf`. A row that is masked everywhere is treated as
    /// unmasked, so every output row sums to one.
    pub fn masked_softmax_rows(&mut self, logits: Var, add_mask: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != add_mask.len() {
            return Err(Error::Dimension(format!(
                "masked softmax of {} with mask of {} entries",
                shape_str(lv),
                add_mask.len()
            )));
        }
        let c = lv.cols();
        let mut out = vec![0.0; lv.len()];
        for (r, (row, mrow)) in lv.data().chunks(c).zip(add_mask.chunks(c)).enumerate() {
            let fully_masked = mrow.iter().all(|m| *m == f64::NEG_INFINITY);
            let shifted: Vec<f64> = if fully_masked {
                row.to_vec()
            } else {
                row.iter().zip(mrow).map(|(x, m)| x + m).collect()
            };
            let max = shifted
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[r * c..(r + 1) * c];
            let mut total = 0.0;
            for (dst, v) in o.iter_mut().zip(&shifted) {
                let e = if *v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
                *dst = e;
                total += e;
            }
            for dst in o.iter_mut() {
                *dst /= total;
            }
        }
        let shape = lv.shape().to_vec();
        let rg = self.rg(logits);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedSoftmax(logits), rg))
    }

    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        let zeros = vec![0.0; self.value(logits).len()];
        self.masked_softmax_rows(logits, &zeros)
    }

    /// Per-row layer normalization over the last dimension followed by an
    /// affine transform; epsilon `1e-5` is added to the variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(Error::Dimension(format!(
                "layer norm of {} with gain {} and bias {}",
                shape_str(xv),
                shape_str(gv),
                shape_str(bv)
            )));
        }
        let rows = xv.rows();
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let n = (row[j] - mean) * inv;
                normalized[r * d + j] = n;
                out[r * d + j] = gv.data()[j] * n + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if xv.shape().len() != 2 || start + len > c {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} of {}",
                start + len,
                shape_str(xv)
            )));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        if let Some(bad) = parts.iter().find(|p| {
            let v = self.value(**p);
            v.shape().len() != 2 || v.rows() != rows
        }) {
            return Err(Error::Dimension(format!(
                "concat of {} rows with {}",
                rows,
                shape_str(self.value(*bad))
            )));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean of rows grouped by segment id; output row `j` averages the rows
    /// with `ids[i] == j`. Every segment in `0..segments` must be non-empty.
    pub fn segment_mean(&mut self, x: Var, ids: &[usize], segments: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || xv.rows() != ids.len() {
            return Err(Error::Dimension(format!(
                "segment mean of {} with {} ids",
                shape_str(xv),
                ids.len()
            )));
        }
        let c = xv.cols();
        let mut counts = vec![0usize; segments];
        let mut out = vec![0.0; segments * c];
        for (r, &id) in ids.iter().enumerate() {
            if id >= segments {
                return Err(Error::Contract(format!("segment id {id} out of range 0..{segments}")));
            }
            counts[id] += 1;
            for (o, v) in out[id * c..(id + 1) * c].iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Contract(format!("segment {empty} is empty")));
        }
        for (j, &n) in counts.iter().enumerate() {
            for o in &mut out[j * c..(j + 1) * c] {
                *o /= n as f64;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![segments, c], out)?,
            Op::SegmentMean {
                x,
                ids: ids.to_vec(),
                counts,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::Dimension(format!(
                "row {bad} out of range for {}",
                shape_str(xv)
            )));
        }
        let t = xv.select_rows(idx);
        let rg = self.rg(x);
        Ok(self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Entries at flat (row-major) indices, as a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Dimension(format!(
                "flat index {bad} out of range for {}",
                shape_str(xv)
            )));
        }
        let out: Vec<f64> = idx.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    /// Reverse-mode accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(lv)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let delta = delta.reshaped(self.nodes[v.0].value.shape().to_vec());
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let bt = transpose_raw(bv.data(), k, n);
                    let da = matmul_raw(gd, &bt, m, n, k);
                    acc(*a, Tensor::vector(da), grads);
                }
                if self.rg(*b) {
                    let at = transpose_raw(av.data(), m, k);
                    let db = matmul_raw(&at, gd, k, m, n);
                    acc(*b, Tensor::vector(db), grads);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*a, Tensor::vector(transpose_raw(gd, m, n)), grads);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, Tensor::vector(gd.iter().map(|v| -v).collect()), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                acc(*a, Tensor::vector(da), grads);
                acc(*b, Tensor::vector(db), grads);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(g, y)| g / y).collect();
                let db = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                acc(*a, Tensor::vector(da), grads);
                acc(*b, Tensor::vector(db), grads);
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.clone(), grads);
                let n = node.value.cols();
                let mut db = vec![0.0; n];
                for (i, v) in gd.iter().enumerate() {
                    db[i % n] += v;
                }
                acc(*bias, Tensor::vector(db), grads);
            }
            Op::Affine(x, scale) => {
                acc(*x, Tensor::vector(gd.iter().map(|v| v * scale).collect()), grads);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(*x, Tensor::vector(dx), grads);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, Tensor::vector(dx), grads);
            }
            Op::ClampLn { x, lo, hi } => {
                let xv = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { g / v } else { 0.0 })
                    .collect();
                acc(*x, Tensor::vector(dx), grads);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, Tensor::vector(vec![gd[0]; n]), grads);
            }
            Op::RowSum(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let dx = (0..xv.len()).map(|i| gd[i / c]).collect();
                acc(*x, Tensor::vector(dx), grads);
            }
            Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let ys = &y[r * c..(r + 1) * c];
                    let gs = &gd[r * c..(r + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                acc(*x, Tensor::vector(dx), grads);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = node.value.cols();
                let rows = node.value.rows();
                let gain_v = self.value(*gain).data();
                let mut dx = vec![0.0; normalized.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let xh = &normalized[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for j in 0..d {
                        dgain[j] += gr[j] * xh[j];
                        dbias[j] += gr[j];
                        let dxh = gr[j] * gain_v[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[j];
                    }
                    let inv = inv_std[r];
                    for j in 0..d {
                        let dxh = gr[j] * gain_v[j];
                        dx[r * d + j] = inv / d as f64 * (d as f64 * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                acc(*x, Tensor::vector(dx), grads);
                acc(*gain, Tensor::vector(dgain), grads);
                acc(*bias, Tensor::vector(dbias), grads);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let len = node.value.cols();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(*x, Tensor::vector(dx), grads);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.rg(*p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        acc(*p, Tensor::vector(dp), grads);
                    }
                    offset += w;
                }
            }
            Op::SegmentMean { x, ids, counts } => {
                let c = node.value.cols();
                let mut dx = vec![0.0; ids.len() * c];
                for (r, &id) in ids.iter().enumerate() {
                    let w = 1.0 / counts[id] as f64;
                    for j in 0..c {
                        dx[r * c + j] = gd[id * c + j] * w;
                    }
                }
                acc(*x, Tensor::vector(dx), grads);
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[r * c + j] += gd[k * c + j];
                    }
                }
                acc(*x, Tensor::vector(dx), grads);
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (k, &i) in idx.iter().enumerate() {
                    dx[i] += gd[k];
                }
                acc(*x, Tensor::vector(dx), grads);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let v = tape.constant(Tensor::from_rows(&[vec![5.0], vec![6.0]]));
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let iv = tape.matmul(eye, v).unwrap();
        let av = tape.matmul(a, v).unwrap();
        assert_eq!(tape.value(iv).data(), &[5.0, 6.0]);
        assert_eq!(tape.value(av).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 1]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 1]"), "{err}");
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transposed() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![5.0, 1.0], vec![6.0, -2.0]]));
        let p = tape.matmul(a, b).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        // ones[2×2] · Bᵀ: every row is the row sums of B.
        assert_eq!(g.get(a).unwrap().data(), &[6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn masked_softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]).reshaped(vec![1, 2]));
        let y = tape.masked_softmax_rows(x, &[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let x = tape.constant(Tensor::from_rows(&[vec![3f64.ln(), 0.0]]));
        let y = tape.masked_softmax_rows(x, &[0.0, 0.0]).unwrap();
        let d = tape.value(y).data();
        assert!(close(d[0], 0.75, 1e-15) && close(d[1], 0.25, 1e-15));

        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]]));
        let y = tape
            .masked_softmax_rows(x, &[f64::NEG_INFINITY, f64::NEG_INFINITY])
            .unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn pointwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 3f64.ln(), -2.0]));
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        let sv = tape.value(s).data();
        assert_eq!(sv[0], 0.5);
        assert!(close(sv[1], 0.75, 1e-15));
        assert_eq!(tape.value(r).data()[2], 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 5.0]]));
        let g = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let d = tape.value(y).data();
        assert!(close(d[0], -1.0, 1e-5) && close(d[1], 1.0, 1e-5));
        assert_eq!(&d[2..], &[0.0, 0.0]);
    }

    #[test]
    fn backward_simple_derivatives() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let g = tape.backward(sq).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[3]));
        let s = tape.sigmoid(x);
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25, 0.25, 0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_have_no_entry() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let unused = tape.param(Tensor::scalar(2.0));
        let loss = tape.scale(x, 2.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn segment_mean_hand_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0], vec![2.0, 2.0]]));
        let y = tape.segment_mean(x, &[0, 0, 1], 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 2.0, 2.0]);
        assert!(tape.segment_mean(x, &[0, 0, 2], 3).is_err());
    }
}
