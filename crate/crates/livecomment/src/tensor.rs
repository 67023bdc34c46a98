//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Operations executed through a [`Tape`] are recorded in topological
//! order; [`Tape::backward`] replays them in reverse to accumulate
//! gradients into every `requires_grad` tensor reachable from the loss.
//! Storage is row-major `f64`; shapes are validated at op boundaries.

use crate::error::{Error, Result};

/// Dense row-major tensor. `grad` is populated by [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init (Box-Muller), every value rounded through `f32` so the
    /// checkpoint payload is lossless.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl rand::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        while data.len() < numel {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(quantize_f32(r * theta.cos() * std));
            if data.len() < numel {
                data.push(quantize_f32(r * theta.sin() * std));
            }
        }
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }
}

/// Round through `f32` and back; keeps parameter values exactly
/// representable in the 32-bit checkpoint payload.
pub fn quantize_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Tid, b: Tid },
    Add { a: Tid, b: Tid },
    AddRow { m: Tid, v: Tid },
    Mul { a: Tid, b: Tid },
    Scale { a: Tid, k: f64 },
    Transpose { a: Tid },
    Relu { a: Tid },
    Softmax { a: Tid, axis: usize },
    MaskedSoftmaxRows { a: Tid, mask: Vec<bool> },
    LayerNorm { x: Tid, gamma: Tid, beta: Tid, eps: f64 },
    Embedding { table: Tid, ids: Vec<usize> },
    CrossEntropyMasked { logits: Tid, targets: Vec<usize>, ignore_id: usize },
    SliceRows { a: Tid, start: usize },
    SliceCols { a: Tid, start: usize },
    ConcatCols { parts: Vec<Tid> },
    ConcatRows { parts: Vec<Tid> },
    SumAll { a: Tid },
    MeanAll { a: Tid },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Record of executed operations in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// Raw row-major kernels. `mm_nt` multiplies by the transpose of `b`
// without materializing it; `mm_tn` by the transpose of `a`.

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    // a: [m×k], b: [n×k] (interpreted transposed) → c: [m×n]
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    c
}

fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    // a: [m×k] (interpreted transposed → [k×m]), b: [m×n] → c: [k×n]
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
    c
}

fn softmax_rows_raw(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (x - max).exp();
            *o = e;
            sum += e;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= sum;
        }
    }
    out
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

    pub fn data(&self, id: Tid) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: Tid) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: Tid) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Clone the recorded tensor (with any gradient) out of the tape.
    pub fn tensor(&self, id: Tid) -> Tensor {
        self.nodes[id.0].tensor.clone()
    }

    fn requires(&self, id: Tid) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tid {
        let id = Tid(self.nodes.len());
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            op,
        });
        id
    }

    /// Record an existing tensor as a leaf (input or parameter).
    pub fn input(&mut self, t: &Tensor) -> Tid {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tid> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = requires_grad;
        Ok(self.input(&t))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Tid> {
        self.leaf(shape, data, false)
    }

    fn check_2d(&self, id: Tid, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        let (m, k) = self.check_2d(a, "matmul")?;
        let (k2, n) = self.check_2d(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = mm_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], data, rg, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add { a, b }))
    }

    /// Broadcast-add a `[c]` vector to every row of a `[r×c]` matrix.
    pub fn add_row(&mut self, m: Tid, v: Tid) -> Result<Tid> {
        let (r, c) = self.check_2d(m, "add_row")?;
        let vs = self.shape(v);
        if vs != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(m).to_vec(),
                rhs: vs.to_vec(),
            });
        }
        let vd = self.data(v).to_vec();
        let mut data = self.data(m).to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(&vd) {
                *x += y;
            }
        }
        let rg = self.requires(m) || self.requires(v);
        Ok(self.push(vec![r, c], data, rg, Op::AddRow { m, v }))
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Result<Tid> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Tid, k: f64) -> Tid {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * k).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Scale { a, k })
    }

    pub fn transpose(&mut self, a: Tid) -> Result<Tid> {
        let (r, c) = self.check_2d(a, "transpose")?;
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![c, r], data, rg, Op::Transpose { a }))
    }

    pub fn relu(&mut self, a: Tid) -> Tid {
        let data: Vec<f64> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let rg = self.requires(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Relu { a })
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&mut self, a: Tid, axis: usize) -> Result<Tid> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis { axis, shape });
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| o * axis_len * inner + t * inner + i;
                let mut max = f64::NEG_INFINITY;
                for t in 0..axis_len {
                    max = max.max(src[idx(t)]);
                }
                let mut sum = 0.0;
                for t in 0..axis_len {
                    let e = (src[idx(t)] - max).exp();
                    data[idx(t)] = e;
                    sum += e;
                }
                for t in 0..axis_len {
                    data[idx(t)] /= sum;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(shape, data, rg, Op::Softmax { a, axis }))
    }

    /// Row-wise softmax over a 2-D score matrix where only `mask[r*cols+c] ==
    /// true` positions participate; masked positions come out exactly 0.
    pub fn masked_softmax_rows(&mut self, a: Tid, mask: &[bool]) -> Result<Tid> {
        let (r, c) = self.check_2d(a, "masked_softmax_rows")?;
        if mask.len() != r * c {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax_rows",
                lhs: vec![r, c],
                rhs: vec![mask.len()],
            });
        }
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let base = row * c;
            let mut max = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[base + j] {
                    max = max.max(src[base + j]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::AllKeysMasked { row });
            }
            let mut sum = 0.0;
            for j in 0..c {
                if mask[base + j] {
                    let e = (src[base + j] - max).exp();
                    data[base + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                if mask[base + j] {
                    data[base + j] /= sum;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(
            vec![r, c],
            data,
            rg,
            Op::MaskedSoftmaxRows {
                a,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Per-position layer norm over the last dimension (population variance),
    /// then affine transform by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Tid, gamma: Tid, beta: Tid, eps: f64) -> Result<Tid> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = vec![0.0; src.len()];
        for (out_row, row) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out_row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            rg,
            Op::LayerNorm { x, gamma, beta, eps },
        ))
    }

    /// Gather rows of `table` by id. Backward sums gradients into repeated rows.
    pub fn embedding(&mut self, table: Tid, ids: &[usize]) -> Result<Tid> {
        let (v, d) = self.check_2d(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("embedding ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::IndexOutOfRange {
                what: "embedding id",
                index: bad,
                size: v,
            });
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood over positions whose target is not
    /// `ignore_id`. Errors when every position is ignored.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Tid,
        targets: &[usize],
        ignore_id: usize,
    ) -> Result<Tid> {
        let (rows, v) = self.check_2d(logits, "cross_entropy_masked")?;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_masked",
                lhs: vec![rows, v],
                rhs: vec![targets.len()],
            });
        }
        let kept: Vec<usize> = (0..rows).filter(|&r| targets[r] != ignore_id).collect();
        if kept.is_empty() {
            return Err(Error::AllPositionsIgnored);
        }
        if let Some(&bad) = kept.iter().find(|&&r| targets[r] >= v) {
            return Err(Error::IndexOutOfRange {
                what: "cross-entropy target",
                index: targets[bad],
                size: v,
            });
        }
        let src = self.data(logits);
        let mut total = 0.0;
        for &r in &kept {
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            total -= row[targets[r]] - lse;
        }
        let loss = total / kept.len() as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                ignore_id,
            },
        ))
    }

    pub fn slice_rows(&mut self, a: Tid, start: usize, len: usize) -> Result<Tid> {
        let (r, c) = self.check_2d(a, "slice_rows")?;
        if start + len > r || len == 0 {
            return Err(Error::IndexOutOfRange {
                what: "row slice",
                index: start + len,
                size: r,
            });
        }
        let data = self.data(a)[start * c..(start + len) * c].to_vec();
        let rg = self.requires(a);
        Ok(self.push(vec![len, c], data, rg, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Tid, start: usize, len: usize) -> Result<Tid> {
        let (r, c) = self.check_2d(a, "slice_cols")?;
        if start + len > c || len == 0 {
            return Err(Error::IndexOutOfRange {
                what: "column slice",
                index: start + len,
                size: c,
            });
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.requires(a);
        Ok(self.push(vec![r, len], data, rg, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Tid]) -> Result<Tid> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols parts"));
        }
        let (r, _) = self.check_2d(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.check_2d(p, "concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            vec![r, total],
            data,
            rg,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Tid]) -> Result<Tid> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows parts"));
        }
        let (_, c) = self.check_2d(parts[0], "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.check_2d(p, "concat_rows")?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            total += pr;
        }
        let mut data = Vec::with_capacity(total * c);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            vec![total, c],
            data,
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: Tid) -> Tid {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.requires(a);
        self.push(vec![1], vec![s], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Tid) -> Tid {
        let n = self.data(a).len() as f64;
        let s: f64 = self.data(a).iter().sum::<f64>() / n;
        let rg = self.requires(a);
        self.push(vec![1], vec![s], rg, Op::MeanAll { a })
    }

    fn accumulate(&mut self, id: Tid, delta: &[f64]) {
        let t = &mut self.nodes[id.0].tensor;
        if !t.requires_grad {
            return;
        }
        let g = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
        for (gv, dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` tensor that the loss depends on.
    pub fn backward(&mut self, loss: Tid) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.requires(loss) {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let grad = match &self.nodes[i].tensor.grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.requires(a) {
                        let da = mm_nt(&grad, self.data(b), m, n, k);
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let db = mm_tn(self.data(a), &grad, m, k, n);
                        self.accumulate(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }
                Op::AddRow { m, v } => {
                    self.accumulate(m, &grad);
                    if self.requires(v) {
                        let c = self.shape(v)[0];
                        let mut dv = vec![0.0; c];
                        for row in grad.chunks(c) {
                            for (g, r) in dv.iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                        self.accumulate(v, &dv);
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires(a) {
                        let da: Vec<f64> =
                            grad.iter().zip(self.data(b)).map(|(g, y)| g * y).collect();
                        self.accumulate(a, &da);
                    }
                    if self.requires(b) {
                        let db: Vec<f64> =
                            grad.iter().zip(self.data(a)).map(|(g, x)| g * x).collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { a, k } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * k).collect();
                    self.accumulate(a, &da);
                }
                Op::Transpose { a } => {
                    let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = grad[j * r + i];
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::Relu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(self.data(a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Softmax { a, axis } => {
                    let shape = self.shape(a).to_vec();
                    let axis_len = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let out = &self.nodes[i].tensor.data;
                    let mut da = vec![0.0; out.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |t: usize| o * axis_len * inner + t * inner + ii;
                            let dot: f64 =
                                (0..axis_len).map(|t| grad[idx(t)] * out[idx(t)]).sum();
                            for t in 0..axis_len {
                                da[idx(t)] = out[idx(t)] * (grad[idx(t)] - dot);
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::MaskedSoftmaxRows { a, mask } => {
                    let (r, c) = (self.shape(i_id(i))[0], self.shape(i_id(i))[1]);
                    let out = &self.nodes[i].tensor.data;
                    let mut da = vec![0.0; out.len()];
                    for row in 0..r {
                        let base = row * c;
                        let mut dot = 0.0;
                        for j in 0..c {
                            if mask[base + j] {
                                dot += grad[base + j] * out[base + j];
                            }
                        }
                        for j in 0..c {
                            if mask[base + j] {
                                da[base + j] = out[base + j] * (grad[base + j] - dot);
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.shape(x).last().unwrap();
                    let src = self.data(x).to_vec();
                    let g_data = self.data(gamma).to_vec();
                    let rows = src.len() / d;
                    let mut dx = vec![0.0; src.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let row = &src[r * d..(r + 1) * d];
                        let grow = &grad[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dxhat[j] = grow[j] * g_data[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }
                Op::Embedding { table, ids } => {
                    if self.requires(table) {
                        let d = self.shape(table)[1];
                        let mut dt = vec![0.0; self.data(table).len()];
                        for (pos, &id) in ids.iter().enumerate() {
                            let src = &grad[pos * d..(pos + 1) * d];
                            let dst = &mut dt[id * d..(id + 1) * d];
                            for (a, b) in dst.iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                        self.accumulate(table, &dt);
                    }
                }
                Op::CrossEntropyMasked {
                    logits,
                    targets,
                    ignore_id,
                } => {
                    let (rows, v) = (self.shape(logits)[0], self.shape(logits)[1]);
                    let kept: Vec<usize> =
                        (0..rows).filter(|&r| targets[r] != ignore_id).collect();
                    let src = self.data(logits);
                    let probs = softmax_rows_raw(src, rows, v);
                    let scale = grad[0] / kept.len() as f64;
                    let mut dl = vec![0.0; rows * v];
                    for &r in &kept {
                        for j in 0..v {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            dl[r * v + j] = scale * (probs[r * v + j] - onehot);
                        }
                    }
                    self.accumulate(logits, &dl);
                }
                Op::SliceRows { a, start } => {
                    let c = self.shape(a)[1];
                    let mut da = vec![0.0; self.data(a).len()];
                    da[start * c..start * c + grad.len()].copy_from_slice(&grad);
                    self.accumulate(a, &da);
                }
                Op::SliceCols { a, start } => {
                    let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                    let w = grad.len() / r;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + start + w]
                            .copy_from_slice(&grad[i * w..(i + 1) * w]);
                    }
                    self.accumulate(a, &da);
                }
                Op::ConcatCols { parts } => {
                    let r = self.shape(i_id(i))[0];
                    let total = self.shape(i_id(i))[1];
                    let mut offset = 0;
                    for &p in &parts {
                        let w = self.shape(p)[1];
                        if self.requires(p) {
                            let mut dp = vec![0.0; r * w];
                            for row in 0..r {
                                dp[row * w..(row + 1) * w].copy_from_slice(
                                    &grad[row * total + offset..row * total + offset + w],
                                );
                            }
                            self.accumulate(p, &dp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let c = self.shape(i_id(i))[1];
                    let mut offset = 0;
                    for &p in &parts {
                        let pr = self.shape(p)[0];
                        if self.requires(p) {
                            let dp = grad[offset * c..(offset + pr) * c].to_vec();
                            self.accumulate(p, &dp);
                        }
                        offset += pr;
                    }
                }
                Op::SumAll { a } => {
                    let da = vec![grad[0]; self.data(a).len()];
                    self.accumulate(a, &da);
                }
                Op::MeanAll { a } => {
                    let n = self.data(a).len() as f64;
                    let da = vec![grad[0] / n; self.data(a).len()];
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
    }
}

fn i_id(i: usize) -> Tid {
    Tid(i)
}
