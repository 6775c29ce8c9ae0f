use super::{log_sum_exp, matmul_raw, softmax_in_place, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Rows with a Euclidean norm below this are rejected by [`Graph::l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Tolerance on target-row sums for cross-entropy.
const TARGET_SUM_TOL: f64 = 1e-6;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SelectRows(usize, Vec<usize>),
    Softmax(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Tensor,
        probs: Tensor,
    },
    L2Normalize {
        input: usize,
        norms: Vec<f64>,
    },
    L2Distance(usize, usize),
    ContrastiveNll {
        logits: usize,
        positives: Vec<Vec<usize>>,
        probs: Tensor,
        valid: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a reverse sweep is a valid topological order for backpropagation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar root with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.expect_matrix(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] · [{k2}x{n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "transpose")?;
        let data = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::matrix(n, m, data)?, Op::Transpose(a.0), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.0, b.0), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.0, b.0), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.0, b.0), "mul", |x, y| x * y)
    }

    /// Adds a `[1×n]` row to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "add_row")?;
        let (r, n2) = self.mat(row, "add_row")?;
        if r != 1 || n != n2 {
            return Err(Error::dim("add_row", format!("[{m}x{n}] + [{r}x{n2}]")));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(value, Op::AddRow(a.0, row.0), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a.0]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a.0, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    /// Natural log; every input value must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::Contract(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a.0), f64::ln))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Degenerate("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a.0), rg))
    }

    /// Column means: `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "mean_rows")?;
        if m == 0 {
            return Err(Error::Degenerate("mean_rows of empty matrix".into()));
        }
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::MeanRows(a.0), rg))
    }

    /// Gathers rows by index; backward scatters (and accumulates repeats).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, _) = self.mat(a, "select_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::dim("select_rows", format!("row {bad} of {m}")));
        }
        let value = self.value(a).select_rows(indices);
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::SelectRows(a.0, indices.to_vec()), rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.mat(a, "softmax")?;
        let value = super::softmax_rows(self.value(a));
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::Softmax(a.0), rg))
    }

    /// Mean over the batch of `-Σ_c target_c · log softmax(logits)_c`.
    ///
    /// `targets` is a constant; each row must sum to one.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (b, c) = self.mat(logits, "softmax_cross_entropy")?;
        if targets.shape() != [b, c] {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits [{b}x{c}] vs targets {:?}", targets.shape()),
            ));
        }
        if b == 0 {
            return Err(Error::Degenerate("cross-entropy over an empty batch".into()));
        }
        for i in 0..b {
            let s: f64 = targets.row(i).iter().sum();
            if (s - 1.0).abs() > TARGET_SUM_TOL || targets.row(i).iter().any(|&t| t < 0.0) {
                return Err(Error::Contract(format!("target row {i} is not a distribution (sum {s})")));
            }
        }
        let lv = self.value(logits);
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for i in 0..b {
            let row = lv.row(i);
            let lse = log_sum_exp(row.iter().copied());
            loss -= targets
                .row(i)
                .iter()
                .zip(row)
                .map(|(&t, &l)| if t == 0.0 { 0.0 } else { t * (l - lse) })
                .sum::<f64>();
            softmax_in_place(probs.row_mut(i));
        }
        loss /= b as f64;
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.0,
                targets: targets.clone(),
                probs,
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm. Rows with norm below
    /// [`EPS_NORM`] are rejected.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat(a, "l2_normalize")?;
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = value.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm < EPS_NORM {
                return Err(Error::Degenerate(format!(
                    "row {i} of [{m}x{n}] has norm {norm:e} below {EPS_NORM:e}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[a.0]);
        Ok(self.push(value, Op::L2Normalize { input: a.0, norms }, rg))
    }

    /// Mean over rows of the squared Euclidean distance `‖a_i − b_i‖²`.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l2_distance")?;
        let (m, _) = self.mat(a, "l2_distance")?;
        if m == 0 {
            return Err(Error::Degenerate("l2_distance over zero rows".into()));
        }
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::scalar(s / m as f64), Op::L2Distance(a.0, b.0), rg))
    }

    /// InfoNCE-style negative log-likelihood over a square similarity matrix.
    ///
    /// For anchor `i` with positive set `P(i)` (which must exclude `i`):
    /// `-(1/|P(i)|) Σ_{s∈P(i)} [l_is − log Σ_{c≠i} exp(l_ic)]`. Anchors with an
    /// empty positive set are skipped; the result is the mean over the rest.
    pub fn contrastive_nll(&mut self, logits: Var, positives: &[Vec<usize>]) -> Result<Var> {
        let (n, n2) = self.mat(logits, "contrastive_nll")?;
        if n != n2 || positives.len() != n {
            return Err(Error::dim(
                "contrastive_nll",
                format!("[{n}x{n2}] logits with {} positive sets", positives.len()),
            ));
        }
        let lv = self.value(logits);
        let mut probs = Tensor::zeros(&[n, n]);
        let mut total = 0.0;
        let mut valid = 0;
        for i in 0..n {
            let pos = &positives[i];
            if pos.iter().any(|&s| s == i || s >= n) {
                return Err(Error::Contract(format!("anchor {i} has an invalid positive index")));
            }
            let row = lv.row(i);
            let others = row.iter().enumerate().filter(|&(c, _)| c != i).map(|(_, &v)| v);
            let lse = log_sum_exp(others);
            let prow = probs.row_mut(i);
            for c in (0..n).filter(|&c| c != i) {
                prow[c] = (row[c] - lse).exp();
            }
            if pos.is_empty() {
                continue;
            }
            valid += 1;
            total -= pos.iter().map(|&s| row[s] - lse).sum::<f64>() / pos.len() as f64;
        }
        if valid == 0 {
            return Err(Error::Degenerate("no anchor has a positive".into()));
        }
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(total / valid as f64),
            Op::ContrastiveNll {
                logits: logits.0,
                positives: positives.to_vec(),
                probs,
                valid,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar root. A graph may be differentiated once.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Graph(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if self.nodes[*a].requires_grad {
                    let bt = transpose_raw(val(*b).data(), k, n);
                    self.acc(grads, *a, &matmul_raw(gd, &bt, m, n, k));
                }
                if self.nodes[*b].requires_grad {
                    let at = transpose_raw(val(*a).data(), m, k);
                    self.acc(grads, *b, &matmul_raw(&at, gd, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                self.acc(grads, *a, &transpose_raw(gd, n, m));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd);
                self.acc(grads, *b, gd);
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, gd);
                let n = val(*row).cols();
                let mut col = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (c, v) in col.iter_mut().zip(chunk) {
                        *c += v;
                    }
                }
                self.acc(grads, *row, &col);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd);
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                self.acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = gd.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = gd.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                self.acc(grads, *a, &ga);
                self.acc(grads, *b, &gb);
            }
            Op::Scale(a, s) => {
                let ga: Vec<f64> = gd.iter().map(|g| g * s).collect();
                self.acc(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = gd
                    .iter()
                    .zip(val(*a).data())
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = gd.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                self.acc(grads, *a, &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = gd.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
                self.acc(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![gd[0]; val(*a).len()];
                self.acc(grads, *a, &ga);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let ga = vec![gd[0] / n as f64; n];
                self.acc(grads, *a, &ga);
            }
            Op::MeanRows(a) => {
                let (m, n) = (val(*a).rows(), val(*a).cols());
                let mut ga = Vec::with_capacity(m * n);
                for _ in 0..m {
                    ga.extend(gd.iter().map(|g| g / m as f64));
                }
                self.acc(grads, *a, &ga);
            }
            Op::SelectRows(a, idx) => {
                let n = val(*a).cols();
                let mut ga = vec![0.0; val(*a).len()];
                for (r, &src) in idx.iter().enumerate() {
                    for (dst, v) in ga[src * n..(src + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *dst += v;
                    }
                }
                self.acc(grads, *a, &ga);
            }
            Op::Softmax(a) => {
                let s = &node.value;
                let n = s.cols();
                let mut ga = vec![0.0; s.len()];
                for i in 0..s.rows() {
                    let (sr, gr) = (s.row(i), &gd[i * n..(i + 1) * n]);
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        ga[i * n + c] = sr[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, *a, &ga);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let (b, c) = (probs.rows(), probs.cols());
                let scale = gd[0] / b as f64;
                let mut ga = vec![0.0; b * c];
                for i in 0..b {
                    let tsum: f64 = targets.row(i).iter().sum();
                    for j in 0..c {
                        ga[i * c + j] = scale * (probs.get(i, j) * tsum - targets.get(i, j));
                    }
                }
                self.acc(grads, *logits, &ga);
            }
            Op::L2Normalize { input, norms } => {
                let y = &node.value;
                let n = y.cols();
                let mut ga = vec![0.0; y.len()];
                for (i, norm) in norms.iter().enumerate() {
                    let (yr, gr) = (y.row(i), &gd[i * n..(i + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        ga[i * n + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                self.acc(grads, *input, &ga);
            }
            Op::L2Distance(a, b) => {
                let m = val(*a).rows() as f64;
                let ga: Vec<f64> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(x, y)| 2.0 * (x - y) / m * gd[0])
                    .collect();
                let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                self.acc(grads, *a, &ga);
                self.acc(grads, *b, &gb);
            }
            Op::ContrastiveNll {
                logits,
                positives,
                probs,
                valid,
            } => {
                let n = probs.rows();
                let scale = gd[0] / *valid as f64;
                let mut ga = vec![0.0; n * n];
                for (i, pos) in positives.iter().enumerate() {
                    if pos.is_empty() {
                        continue;
                    }
                    let row = &mut ga[i * n..(i + 1) * n];
                    for (c, r) in row.iter_mut().enumerate() {
                        if c != i {
                            *r = scale * probs.get(i, c);
                        }
                    }
                    let w = scale / pos.len() as f64;
                    for &s in pos {
                        row[s] -= w;
                    }
                }
                self.acc(grads, *logits, &ga);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], target: usize, delta: &[f64]) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let slot = &mut grads[target];
        match slot {
            Some(t) => {
                for (a, d) in t.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => {
                let shape = self.nodes[target].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta.to_vec()).expect("gradient shape"));
            }
        }
    }
}
