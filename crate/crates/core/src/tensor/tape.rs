use super::kernels::{
    elu_plus_one, elu_plus_one_slope, gelu, gelu_slope, matmul_at_into, matmul_bt_into,
    matmul_into, sigmoid, softmax_row,
};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    MatMulAt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    EluPlusOne(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    RowDivide(Var, Var),
    ColSum(Var),
    Sum(Var),
    Gate {
        ret: Var,
        dot: Var,
        gamma: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    tracked: bool,
}

/// Records executed operations so that gradients can be replayed in reverse.
///
/// A tape owns every intermediate value. Nodes are appended in execution
/// order, which is already a topological order, so the backward sweep is a
/// single reverse pass over the node list.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Drops every node recorded after the first `len`. Handles created
    /// after that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last backward pass with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears every gradient so that backward may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.require_matrix(op)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul")?;
        let (k2, n) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), tracked))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a, "matmul_bt")?;
        let (n, k2) = self.dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), tracked))
    }

    /// `aᵀ · b`.
    pub fn matmul_at(&mut self, a: Var, b: Var) -> Result<Var> {
        let (k, m) = self.dims(a, "matmul_at")?;
        let (k2, n) = self.dims(b, "matmul_at")?;
        if k != k2 {
            return Err(self.mismatch("matmul_at", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_at_into(self.value(a).data(), self.value(b).data(), &mut out, k, m, n);
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulAt(a, b), tracked))
    }

    fn zip_same(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(op_name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "add_row")?;
        let (r, n2) = self.dims(row, "add_row")?;
        if r != 1 || n != n2 {
            return Err(self.mismatch("add_row", x, row));
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(row).data();
        for i in 0..m {
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let tracked = self.any_tracked(&[x, row]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRow(x, row), tracked))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect())
            .expect("same shape");
        let tracked = self.any_tracked(&[x]);
        self.push(out, Op::Scale(x, c), tracked)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a + c).collect())
            .expect("same shape");
        let tracked = self.any_tracked(&[x]);
        self.push(out, Op::AddScalar(x), tracked)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
            .expect("same shape");
        let tracked = self.any_tracked(&[x]);
        self.push(out, op, tracked)
    }

    /// Element-wise ELU + 1, the strictly positive feature map of the memory.
    pub fn elu_plus_one(&mut self, x: Var) -> Var {
        self.map(x, elu_plus_one, Op::EluPlusOne(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Row-wise softmax. With `causal`, entries above the diagonal are masked out.
    pub fn row_softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims(x, "row_softmax")?;
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            softmax_row(&mut out[i * n..(i + 1) * n], causal.then_some(i));
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Softmax(x), tracked))
    }

    /// Per-row layer normalization with learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.dims(x, "layer_norm")?;
        if self.value(gain).shape() != [1, n] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).shape() != [1, n] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let z = (row[j] - mean) * is;
                normed[i * n + j] = z;
                out[i * n + j] = z * g[j] + b[j];
            }
        }
        let tracked = self.any_tracked(&[x, gain, bias]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            tracked,
        ))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims(x, "slice_cols")?;
        if start + width > n {
            return Err(TensorError::SliceOutOfBounds {
                start,
                end: start + width,
                width: n,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::matrix(m, width, out)?, Op::SliceCols(x, start), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Snapshot("empty concat".into()))?;
        let (m, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let tracked = self.any_tracked(parts);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Divides each row of `num` (m×n) by the matching entry of the column `den` (m×1).
    pub fn row_divide(&mut self, num: Var, den: Var) -> Result<Var> {
        let (m, n) = self.dims(num, "row_divide")?;
        let (r, c) = self.dims(den, "row_divide")?;
        if r != m || c != 1 {
            return Err(self.mismatch("row_divide", num, den));
        }
        let nd = self.value(num).data();
        let dd = self.value(den).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = nd[i * n + j] / dd[i];
            }
        }
        let tracked = self.any_tracked(&[num, den]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::RowDivide(num, den), tracked))
    }

    /// Sum over rows, giving a `1×n` row.
    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x, "col_sum")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&xd[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        let tracked = self.any_tracked(&[x]);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::ColSum(x), tracked))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let tracked = self.any_tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    /// `S(γ)·ret + (1 − S(γ))·dot` with a `1×1` gating scalar γ.
    pub fn gate(&mut self, ret: Var, dot: Var, gamma: Var) -> Result<Var> {
        if self.value(ret).shape() != self.value(dot).shape() {
            return Err(self.mismatch("gated_combine", ret, dot));
        }
        if self.value(gamma).len() != 1 {
            return Err(self.mismatch("gated_combine", gamma, ret));
        }
        let s = sigmoid(self.value(gamma).item());
        let out = self.zip_same(ret, dot, "gated_combine", |r, d| s * r + (1.0 - s) * d)?;
        let tracked = self.any_tracked(&[ret, dot, gamma]);
        Ok(self.push(out, Op::Gate { ret, dot, gamma }, tracked))
    }

    /// Gathers rows of `table` (vocab×d) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table, "embedding")?;
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::TargetOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let tracked = self.any_tracked(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (T×V), counting only positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        if let Some(&id) = targets.iter().find(|&&id| id >= v) {
            return Err(TensorError::TargetOutOfRange { id, vocab: v });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyTargets);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for i in 0..t {
            let row = &mut probs[i * v..(i + 1) * v];
            softmax_row(row, None);
            if mask[i] {
                total -= row[targets[i]].ln();
            }
        }
        let loss = total / count as f64;
        let tracked = self.any_tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            tracked,
        ))
    }

    /// Propagates d(loss)/d(node) to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].tracked {
            return Err(TensorError::Untracked);
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &Tensor)) {
        // Gradient buffers are only kept for tracked nodes; the split borrow
        // lets the closure read the node's own value while writing its grad.
        let node = &mut self.nodes[v.0];
        if !node.tracked {
            return;
        }
        let len = node.value.len();
        let grad = node.grad.get_or_insert_with(|| vec![0.0; len]);
        f(grad, &node.value);
    }

    fn add_into(&mut self, v: Var, delta: &[f64]) {
        self.accumulate(v, |g, _| {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        });
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Temporarily move the op out so the node list can be mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.dims(a, "").unwrap();
                let n = self.value(b).cols();
                if self.is_tracked(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_into(g, self.value(b).data(), &mut da, m, n, k);
                    self.add_into(a, &da);
                }
                if self.is_tracked(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_into(self.value(a).data(), g, &mut db, m, k, n);
                    self.add_into(b, &db);
                }
            }
            &Op::MatMulBt(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let (m, k) = self.dims(a, "").unwrap();
                let n = self.value(b).rows();
                if self.is_tracked(a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, self.value(b).data(), &mut da, m, n, k);
                    self.add_into(a, &da);
                }
                if self.is_tracked(b) {
                    let mut db = vec![0.0; n * k];
                    matmul_at_into(g, self.value(a).data(), &mut db, m, n, k);
                    self.add_into(b, &db);
                }
            }
            &Op::MatMulAt(a, b) => {
                // C = Aᵀ·B with A k×m: dA = B·dCᵀ, dB = A·dC
                let (k, m) = self.dims(a, "").unwrap();
                let n = self.value(b).cols();
                if self.is_tracked(a) {
                    let mut da = vec![0.0; k * m];
                    matmul_bt_into(self.value(b).data(), g, &mut da, k, n, m);
                    self.add_into(a, &da);
                }
                if self.is_tracked(b) {
                    let mut db = vec![0.0; k * n];
                    matmul_into(self.value(a).data(), g, &mut db, k, m, n);
                    self.add_into(b, &db);
                }
            }
            &Op::Add(a, b) => {
                self.add_into(a, g);
                self.add_into(b, g);
            }
            &Op::Sub(a, b) => {
                self.add_into(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_into(b, &neg);
            }
            &Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                self.add_into(a, &da);
                self.add_into(b, &db);
            }
            &Op::AddRow(x, row) => {
                self.add_into(x, g);
                let n = self.value(row).cols();
                let mut dr = vec![0.0; n];
                for chunk in g.chunks_exact(n) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                self.add_into(row, &dr);
            }
            &Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_into(x, &dx);
            }
            &Op::AddScalar(x) => self.add_into(x, g),
            &Op::EluPlusOne(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, &xv)| gv * elu_plus_one_slope(xv))
                    .collect();
                self.add_into(x, &dx);
            }
            &Op::Gelu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(gv, &xv)| gv * gelu_slope(xv))
                    .collect();
                self.add_into(x, &dx);
            }
            &Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data();
                let dx: Vec<f64> = g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect();
                self.add_into(x, &dx);
            }
            &Op::Softmax(x) => {
                let y = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(g.chunks_exact(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_into(x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let n = self.value(*x).cols();
                let gd = self.value(*gain).data().to_vec();
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                let mut dx = vec![0.0; g.len()];
                for (i, (gr, zr)) in g.chunks_exact(n).zip(normed.chunks_exact(n)).enumerate() {
                    let mut mean_dz = 0.0;
                    let mut mean_dz_z = 0.0;
                    for j in 0..n {
                        dgain[j] += gr[j] * zr[j];
                        dbias[j] += gr[j];
                        let dz = gr[j] * gd[j];
                        mean_dz += dz;
                        mean_dz_z += dz * zr[j];
                    }
                    mean_dz /= n as f64;
                    mean_dz_z /= n as f64;
                    for j in 0..n {
                        let dz = gr[j] * gd[j];
                        dx[i * n + j] = inv_std[i] * (dz - mean_dz - zr[j] * mean_dz_z);
                    }
                }
                self.add_into(*x, &dx);
                self.add_into(*gain, &dgain);
                self.add_into(*bias, &dbias);
            }
            &Op::SliceCols(x, start) => {
                let w = self.nodes[idx].value.cols();
                let n = self.value(x).cols();
                self.accumulate(x, |gx, _| {
                    for (i, gr) in g.chunks_exact(w).enumerate() {
                        for (a, b) in gx[i * n + start..i * n + start + w].iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(p, |gp, _| {
                        for (i, gr) in gp.chunks_exact_mut(w).enumerate() {
                            for (a, b) in gr.iter_mut().zip(&g[i * total + offset..i * total + offset + w]) {
                                *a += b;
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::RowDivide(num, den) => {
                let n = self.value(num).cols();
                let dd = self.value(den).data().to_vec();
                let nd = self.value(num).data();
                let mut dnum = vec![0.0; g.len()];
                let mut dden = vec![0.0; dd.len()];
                for i in 0..dd.len() {
                    let inv = 1.0 / dd[i];
                    let mut acc = 0.0;
                    for j in 0..n {
                        dnum[i * n + j] = g[i * n + j] * inv;
                        acc += g[i * n + j] * nd[i * n + j];
                    }
                    dden[i] = -acc * inv * inv;
                }
                self.add_into(num, &dnum);
                self.add_into(den, &dden);
            }
            &Op::ColSum(x) => {
                let n = g.len();
                self.accumulate(x, |gx, _| {
                    for chunk in gx.chunks_exact_mut(n) {
                        for (a, b) in chunk.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(x, |gx, _| gx.iter_mut().for_each(|a| *a += gv));
            }
            &Op::Gate { ret, dot, gamma } => {
                let s = sigmoid(self.value(gamma).item());
                let dret: Vec<f64> = g.iter().map(|v| v * s).collect();
                let ddot: Vec<f64> = g.iter().map(|v| v * (1.0 - s)).collect();
                let diff: f64 = g
                    .iter()
                    .zip(self.value(ret).data().iter().zip(self.value(dot).data()))
                    .map(|(gv, (r, d))| gv * (r - d))
                    .sum();
                self.add_into(ret, &dret);
                self.add_into(dot, &ddot);
                self.add_into(gamma, &[diff * s * (1.0 - s)]);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                self.accumulate(*table, |gt, _| {
                    for (i, &id) in ids.iter().enumerate() {
                        for (a, b) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *a += b;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, (&tgt, &live)) in targets.iter().zip(mask).enumerate() {
                    if !live {
                        continue;
                    }
                    for j in 0..v {
                        dl[i * v + j] = probs[i * v + j] * scale;
                    }
                    dl[i * v + tgt] -= scale;
                }
                self.add_into(*logits, &dl);
            }
        }
        self.nodes[idx].op = op;
    }
}
