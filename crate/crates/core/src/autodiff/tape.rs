use super::{ParamId, ParamSet};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Carries its matrix shape for convenience.
#[derive(Debug, Clone, Copy)]
pub struct Var {
    id: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Var {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// Matrix plus a broadcast 1 x n row vector.
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Matmul(usize, usize),
    /// Matmul whose inner reduction sums in a canonical (sorted) order, so
    /// the result is invariant to consistent row/column permutations of the
    /// operands.
    MatmulCanonical(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LayerNormRows {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
    Gelu(usize),
    SumAll(usize),
    GatherRows {
        table: usize,
        rows: Vec<usize>,
    },
    NarrowCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        smoothing: f64,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Append-only operation record. Node inputs always precede the node, so a
/// single reverse sweep visits every node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    macs: u64,
    // One leaf per parameter per tape; repeated lookups (e.g. embedding
    // tables used once per row of a batch) reuse it, so gradients from all
    // uses accumulate on a single node.
    param_leaves: std::collections::HashMap<usize, Var>,
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

    /// Multiply-accumulate operations recorded by matmul forwards so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = 0;
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn value_scalar(&self, v: Var) -> f64 {
        self.nodes[v.id].value[0]
    }

    /// Gradient of the last [`Tape::backward`] seed w.r.t. `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var {
            id: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ---- leaves ------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len(), "constant shape/data mismatch");
        self.push(rows, cols, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(1, 1, vec![x], Op::Leaf, false)
    }

    /// Insert a trainable leaf whose value is copied from the parameter set.
    /// Repeated calls with the same id on one tape return the same leaf.
    pub fn param(&mut self, id: ParamId, params: &ParamSet) -> Var {
        if let Some(&v) = self.param_leaves.get(&id.0) {
            return v;
        }
        let e = params.get(id);
        let (rows, cols) = e.tensor.as_matrix_dims();
        let v = self.push(rows, cols, e.tensor.data.clone(), Op::Leaf, true);
        self.nodes[v.id].param = Some(id);
        self.param_leaves.insert(id.0, v);
        v
    }

    /// Leaf that participates in gradient computation without being a
    /// parameter (used by gradient checks on inputs).
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(rows * cols, data.len());
        self.push(rows, cols, data, Op::Leaf, true)
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Error::Dimension(format!(
                "add: {}x{} vs {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let value = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(a.rows, a.cols, value, Op::Add(a.id, b.id), ng))
    }

    /// `a + row` where `row` is 1 x a.cols, broadcast over rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(Error::Dimension(format!(
                "add_row: {}x{} plus {}x{}",
                a.rows, a.cols, row.rows, row.cols
            )));
        }
        let rv = &self.nodes[row.id].value;
        let value = self.nodes[a.id]
            .value
            .chunks(a.cols)
            .flat_map(|r| r.iter().zip(rv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(a.id) || self.needs(row.id);
        Ok(self.push(a.rows, a.cols, value, Op::AddRow(a.id, row.id), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Error::Dimension(format!(
                "mul: {}x{} vs {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let value = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(a.rows, a.cols, value, Op::Mul(a.id, b.id), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.id].value.iter().map(|x| x * c).collect();
        let ng = self.needs(a.id);
        self.push(a.rows, a.cols, value, Op::Scale(a.id, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.iter().map(|x| x.exp()).collect();
        let ng = self.needs(a.id);
        self.push(a.rows, a.cols, value, Op::Exp(a.id), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.iter().map(|&x| gelu(x)).collect();
        let ng = self.needs(a.id);
        self.push(a.rows, a.cols, value, Op::Gelu(a.id), ng)
    }

    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl rand::Rng) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..a.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let value = self.nodes[a.id]
            .value
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let ng = self.needs(a.id);
        self.push(a.rows, a.cols, value, Op::Dropout { x: a.id, mask }, ng)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Dimension(format!(
                "matmul: {}x{} by {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let value = matmul_raw(&self.nodes[a.id].value, &self.nodes[b.id].value, m, k, n);
        self.macs += (m * k * n) as u64;
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(m, n, value, Op::Matmul(a.id, b.id), ng))
    }

    /// Like [`Tape::matmul`], but each output element sums its products in a
    /// canonical order. Used where a reduction runs over the feature axis so
    /// permuting input features leaves the output bitwise identical.
    pub fn matmul_canonical(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Dimension(format!(
                "matmul: {}x{} by {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let mut value = vec![0.0; m * n];
        let mut buf = vec![0.0; k];
        for r in 0..m {
            for j in 0..n {
                for c in 0..k {
                    buf[c] = av[r * k + c] * bv[c * n + j];
                }
                value[r * n + j] = canonical_sum(&mut buf);
            }
        }
        self.macs += (m * k * n) as u64;
        let ng = self.needs(a.id) || self.needs(b.id);
        Ok(self.push(m, n, value, Op::MatmulCanonical(a.id, b.id), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = transpose_raw(&self.nodes[a.id].value, a.rows, a.cols);
        let ng = self.needs(a.id);
        self.push(a.cols, a.rows, value, Op::Transpose(a.id), ng)
    }

    // ---- row-wise nonlinearities ----------------------------------------

    /// Softmax along the last axis, with max subtraction for stability.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = Vec::with_capacity(a.numel());
        for row in self.nodes[a.id].value.chunks(a.cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
            let s = canonical_sum(&mut exps.clone());
            value.extend(exps.iter().map(|e| e / s));
        }
        let ng = self.needs(a.id);
        self.push(a.rows, a.cols, value, Op::SoftmaxRows(a.id), ng)
    }

    /// Per-row standardization followed by an affine transform with 1 x n
    /// gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if gain.rows != 1 || gain.cols != x.cols || bias.rows != 1 || bias.cols != x.cols {
            return Err(Error::Dimension(format!(
                "layer_norm: x {}x{}, gain {}x{}, bias {}x{}",
                x.rows, x.cols, gain.rows, gain.cols, bias.rows, bias.cols
            )));
        }
        let n = x.cols as f64;
        let gv = self.nodes[gain.id].value.clone();
        let bv = self.nodes[bias.id].value.clone();
        let mut value = Vec::with_capacity(x.numel());
        for row in self.nodes[x.id].value.chunks(x.cols) {
            let mu: f64 = row.iter().sum::<f64>() / n;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                value.push(gv[j] * ((v - mu) * inv) + bv[j]);
            }
        }
        let ng = self.needs(x.id) || self.needs(gain.id) || self.needs(bias.id);
        Ok(self.push(
            x.rows,
            x.cols,
            value,
            Op::LayerNormRows {
                x: x.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            ng,
        ))
    }

    // ---- reductions and structure ----------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.id].value.iter().sum();
        let ng = self.needs(a.id);
        self.push(1, 1, vec![s], Op::SumAll(a.id), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = a.numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Select rows of `table` by index; the embedding-lookup primitive.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        for &r in rows {
            if r >= table.rows {
                return Err(Error::Validation(format!(
                    "gather_rows: index {r} out of range for {} rows",
                    table.rows
                )));
            }
        }
        let cols = table.cols;
        let tv = &self.nodes[table.id].value;
        let mut value = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            value.extend_from_slice(&tv[r * cols..(r + 1) * cols]);
        }
        let ng = self.needs(table.id);
        Ok(self.push(
            rows.len(),
            cols,
            value,
            Op::GatherRows {
                table: table.id,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > x.cols {
            return Err(Error::Dimension(format!(
                "narrow_cols: [{start}, {}) out of {} columns",
                start + len,
                x.cols
            )));
        }
        let mut value = Vec::with_capacity(x.rows * len);
        for row in self.nodes[x.id].value.chunks(x.cols) {
            value.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.needs(x.id);
        Ok(self.push(
            x.rows,
            len,
            value,
            Op::NarrowCols {
                x: x.id,
                start,
                len,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts[0].rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Dimension("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let pv = &self.nodes[p.id].value;
                value.extend_from_slice(&pv[r * p.cols..(r + 1) * p.cols]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(p.id));
        Ok(self.push(
            rows,
            cols,
            value,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts[0].cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::Dimension("concat_rows: column counts differ".into()));
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for p in parts {
            value.extend_from_slice(&self.nodes[p.id].value);
        }
        let ng = parts.iter().any(|p| self.needs(p.id));
        Ok(self.push(
            rows,
            cols,
            value,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            ng,
        ))
    }

    /// Row-major reinterpretation to a new matrix shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != x.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {}x{} to {rows}x{cols}",
                x.rows, x.cols
            )));
        }
        let value = self.nodes[x.id].value.clone();
        let ng = self.needs(x.id);
        Ok(self.push(rows, cols, value, Op::Reshape(x.id), ng))
    }

    // ---- losses ------------------------------------------------------------

    /// Mean label-smoothed cross-entropy over the batch. The target
    /// distribution gives `1 - smoothing + smoothing/c` to the true class
    /// and `smoothing/c` to every other class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        if targets.len() != logits.rows {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {} logit rows",
                targets.len(),
                logits.rows
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Validation(format!(
                "smoothing {smoothing} outside [0, 1)"
            )));
        }
        let c = logits.cols;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Validation(format!(
                    "class index {t} out of range for {c} classes at row {i}"
                )));
            }
        }
        let uniform = smoothing / c as f64;
        let mut total = 0.0;
        for (row, &t) in self.nodes[logits.id].value.chunks(c).zip(targets) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            for (j, &z) in row.iter().enumerate() {
                let q = if j == t {
                    1.0 - smoothing + uniform
                } else {
                    uniform
                };
                if q != 0.0 {
                    total -= q * (z - lse);
                }
            }
        }
        let value = vec![total / logits.rows as f64];
        let ng = self.needs(logits.id);
        Ok(self.push(
            1,
            1,
            value,
            Op::CrossEntropy {
                logits: logits.id,
                targets: targets.to_vec(),
                smoothing,
            },
            ng,
        ))
    }

    // ---- backward ------------------------------------------------------------

    /// Populate gradients of every reachable node w.r.t. the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward seed must be scalar, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].clone() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Add gradients of parameter leaves into the parameter set. Parameters
    /// never touched by the loss accumulate zero.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for e in params.iter_mut() {
            e.tensor.ensure_grad();
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(pid) = node.param else { continue };
            let Some(Some(g)) = self.grads.get(i) else {
                continue;
            };
            let dst = params.get_mut(pid).tensor.ensure_grad();
            for (d, s) in dst.iter_mut().zip(g) {
                *d += s;
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: usize, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
        contrib(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                let cols = node.cols;
                self.acc(grads, *b, |d| {
                    for row in g.chunks(cols) {
                        for (dj, gj) in d.iter_mut().zip(row) {
                            *dj += gj;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.acc(grads, *a, |d| {
                    for ((d, g), b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * b;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, |d| axpy(d, g, c));
            }
            Op::Exp(a) => {
                let out = &node.value;
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                        *d += g * y;
                    }
                });
            }
            Op::Matmul(a, b) | Op::MatmulCanonical(a, b) => {
                let (m, n) = (node.rows, node.cols);
                let k = self.nodes[*a].cols;
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                // a_grad = g . b^T
                self.acc(grads, *a, |d| {
                    for r in 0..m {
                        for j in 0..n {
                            let gv = g[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..k {
                                d[r * k + c] += gv * bv[c * n + j];
                            }
                        }
                    }
                });
                // b_grad = a^T . g
                self.acc(grads, *b, |d| {
                    for r in 0..m {
                        for c in 0..k {
                            let a_rc = av[r * k + c];
                            if a_rc == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                d[c * n + j] += a_rc * g[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (rows, cols) = (node.rows, node.cols);
                self.acc(grads, *a, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c * rows + r] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let cols = node.cols;
                let y = &node.value;
                self.acc(grads, *a, |d| {
                    for r in 0..node.rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..cols {
                            d[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let cols = node.cols;
                let n = cols as f64;
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                self.acc(grads, *bias, |d| {
                    for row in g.chunks(cols) {
                        for (dj, gj) in d.iter_mut().zip(row) {
                            *dj += gj;
                        }
                    }
                });
                // precompute per-row stats once
                let mut stats = Vec::with_capacity(node.rows);
                for row in xv.chunks(cols) {
                    let mu: f64 = row.iter().sum::<f64>() / n;
                    let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    stats.push((mu, 1.0 / (var + eps).sqrt()));
                }
                self.acc(grads, *gain, |d| {
                    for (r, row) in xv.chunks(cols).enumerate() {
                        let (mu, inv) = stats[r];
                        for j in 0..cols {
                            d[j] += g[r * cols + j] * (row[j] - mu) * inv;
                        }
                    }
                });
                self.acc(grads, *x, |d| {
                    for (r, row) in xv.chunks(cols).enumerate() {
                        let (mu, inv) = stats[r];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..cols {
                            let xhat = (row[j] - mu) * inv;
                            let dxhat = gr[j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= n;
                        mean_dxhat_xhat /= n;
                        for j in 0..cols {
                            let xhat = (row[j] - mu) * inv;
                            let dxhat = gr[j] * gv[j];
                            d[r * cols + j] +=
                                inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = &self.nodes[*a].value;
                self.acc(grads, *a, |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(xv) {
                        *d += g * gelu_deriv(x);
                    }
                });
            }
            Op::SumAll(a) => {
                let gs = g[0];
                self.acc(grads, *a, |d| {
                    for dj in d.iter_mut() {
                        *dj += gs;
                    }
                });
            }
            Op::GatherRows { table, rows } => {
                let cols = node.cols;
                self.acc(grads, *table, |d| {
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for j in 0..cols {
                            d[src_r * cols + j] += g[out_r * cols + j];
                        }
                    }
                });
            }
            Op::NarrowCols { x, start, len } => {
                let full = self.nodes[*x].cols;
                let (start, len) = (*start, *len);
                self.acc(grads, *x, |d| {
                    for r in 0..node.rows {
                        for j in 0..len {
                            d[r * full + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    self.acc(grads, p, |d| {
                        for r in 0..node.rows {
                            for j in 0..pc {
                                d[r * pc + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let pr = self.nodes[p].rows;
                    self.acc(grads, p, |d| {
                        for (dj, gj) in d
                            .iter_mut()
                            .zip(&g[offset * cols..(offset + pr) * cols])
                        {
                            *dj += gj;
                        }
                    });
                    offset += pr;
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |d| axpy(d, g, 1.0));
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
            } => {
                let c = self.nodes[*logits].cols;
                let b = targets.len() as f64;
                let uniform = smoothing / c as f64;
                let lv = &self.nodes[*logits].value;
                let gs = g[0];
                self.acc(grads, *logits, |d| {
                    for (r, (row, &t)) in lv.chunks(c).zip(targets).enumerate() {
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                        let s: f64 = exps.iter().sum();
                        for j in 0..c {
                            let p = exps[j] / s;
                            let q = if j == t {
                                1.0 - smoothing + uniform
                            } else {
                                uniform
                            };
                            d[r * c + j] += gs * (p - q) / b;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.acc(grads, *x, |d| {
                    for ((d, g), m) in d.iter_mut().zip(g).zip(mask) {
                        *d += g * m;
                    }
                });
            }
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Sum in a value-canonical order: equal multisets of addends produce
/// bitwise-equal results regardless of input order.
pub(crate) fn canonical_sum(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..k {
            let a_rc = a[r * k + c];
            if a_rc == 0.0 {
                continue;
            }
            let brow = &b[c * n..(c + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += a_rc * bv;
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

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
