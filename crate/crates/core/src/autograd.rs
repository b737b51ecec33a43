//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass as a
//! node on a tape. Parameters live outside the graph in a [`Params`] store
//! and are referenced by [`ParamId`]; the graph borrows the store for the
//! duration of the pass, so forward evaluation never mutates parameters.
//! [`Graph::backward`] walks the tape in reverse and returns a
//! [`Gradients`] holding one accumulated gradient per touched parameter.
//!
//! Every tensor is two-dimensional. Row vectors are `1 × n` matrices and
//! scalars are `1 × 1`.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Index of a parameter inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter storage.
///
/// Registration order is the canonical order used by checkpoints and by the
/// optimizer, so two stores built by the same code path line up exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, ParamId>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on duplicate names, which is always a
    /// model-construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    params: Vec<Option<Mat>>,
    inputs: BTreeMap<Var, Mat>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            params: vec![None; params.len()],
            inputs: BTreeMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params[id.0].as_ref()
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn input(&self, v: Var) -> Option<&Mat> {
        self.inputs.get(&v)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Mat)> {
        self.params
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub fn l2_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    fn accumulate(&mut self, id: ParamId, g: Mat) {
        match &mut self.params[id.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + r` with `r` a `1 × n` row broadcast over rows.
    AddRow(Var, Var),
    /// `a ⊙ r` with `r` a `1 × n` row broadcast over rows.
    MulRow(Var, Var),
    /// `a[i, j] · c[i, 0]`
    MulCol(Var, Var),
    /// `a + s` with `s` a `1 × 1` scalar broadcast everywhere.
    AddScalar(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Normalization without affine terms; `aux` caches `1/σ` per row.
    LayerNorm(Var),
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Gather(Var, Vec<(usize, usize)>),
    /// Places a `1 × m` row into chosen columns of a `1 × width` zero row.
    ScatterCols(Var, Vec<usize>),
    Reshape(Var),
    /// Rows scaled to unit L2 norm; `aux` caches the norms.
    NormalizeRows(Var),
    /// `1 / max(x, eps)` elementwise.
    RecipClamp(Var, f64),
    /// Mean cross-entropy of `logits` rows against integer targets;
    /// `aux` caches the softmax probabilities.
    CrossEntropy(Var, Vec<usize>),
    /// Squared coefficient of variation of a `1 × n` row.
    CvSquared(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Option<Mat>,
    aux: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

pub const NORM_EPS: f64 = 1e-12;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A recorded forward computation.
pub struct Graph<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.push_aux(value, None, op, needs_grad)
    }

    fn push_aux(&mut self, value: Mat, aux: Option<Mat>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            aux,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant; no gradient flows into it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Mat::zeros((rows, cols)))
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            aux: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1 x n row");
        let out = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1 x n row");
        let out = self.value(a) * self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an n x 1 column");
        let out = self.value(a) * self.value(col);
        let ng = self.ng(a) || self.ng(col);
        self.push(out, Op::MulCol(a, col), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let out = self.value(a).mapv(|x| x + k);
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::AddScalar(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).mapv(|x| x * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, false)
    }

    /// Row softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Var {
        let out = softmax_rows_value(self.value(a), causal);
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let lse = log_sum_exp(row.iter().copied());
            row.mapv_inplace(|v| v - lse);
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Per-row standardization (zero mean, unit variance).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, d) = x.dim();
        let mut out = Mat::zeros((n, d));
        let mut inv = Mat::zeros((n, 1));
        for i in 0..n {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv[[i, 0]] = r;
            for j in 0..d {
                out[[i, j]] = (x[[i, j]] - mean) * r;
            }
        }
        let ng = self.ng(a);
        self.push_aux(out, Some(inv), Op::LayerNorm(a), ng)
    }

    /// Mean over rows, giving a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.nrows() as f64;
        let out = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    /// Column sums, giving a `1 × n` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// Row gather; indices may repeat (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Picks individual entries into a `1 × m` row.
    pub fn gather(&mut self, a: Var, coords: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let out = Mat::from_shape_fn((1, coords.len()), |(_, k)| x[coords[k]]);
        let ng = self.ng(a);
        self.push(out, Op::Gather(a, coords.to_vec()), ng)
    }

    pub fn scatter_cols(&mut self, a: Var, cols: &[usize], width: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), (1, cols.len()));
        let mut out = Mat::zeros((1, width));
        for (k, &c) in cols.iter().enumerate() {
            out[[0, c]] += x[[0, k]];
        }
        let ng = self.ng(a);
        self.push(out, Op::ScatterCols(a, cols.to_vec()), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        let flat: Vec<f64> = x.iter().copied().collect();
        let out = Mat::from_shape_vec((rows, cols), flat).expect("reshape: element count differs");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, d) = x.dim();
        let mut norms = Mat::zeros((n, 1));
        let mut out = x.clone();
        for i in 0..n {
            let nrm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms[[i, 0]] = nrm;
            for j in 0..d {
                out[[i, j]] /= nrm;
            }
        }
        let ng = self.ng(a);
        self.push_aux(out, Some(norms), Op::NormalizeRows(a), ng)
    }

    pub fn recip_clamp(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / x.max(eps));
        let ng = self.ng(a);
        self.push(out, Op::RecipClamp(a, eps), ng)
    }

    /// Mean cross-entropy of each row of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "cross_entropy: one target per row");
        let probs = softmax_rows_value(x, false);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = x.row(i);
            total += log_sum_exp(row.iter().copied()) - row[t];
        }
        let out = Mat::from_elem((1, 1), total / targets.len() as f64);
        let ng = self.ng(logits);
        self.push_aux(out, Some(probs), Op::CrossEntropy(logits, targets.to_vec()), ng)
    }

    pub fn cv_squared(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), 1);
        let out = Mat::from_elem((1, 1), cv_squared_value(x.as_slice().expect("contiguous row")));
        let ng = self.ng(a);
        self.push(out, Op::CvSquared(a), ng)
    }

    /// Backpropagate from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        self.backward_with_seed(loss, Mat::from_elem((1, 1), 1.0))
    }

    /// Backpropagate an arbitrary upstream gradient `seed` into `out`.
    pub fn backward_with_seed(&self, out: Var, seed: Mat) -> Gradients {
        let mut grads = Gradients::zeros_like(self.params);
        let mut adj: Vec<Option<Mat>> = vec![None; out.0 + 1];
        adj[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads.inputs.insert(Var(idx), g);
                }
                Op::Param(id) => grads.accumulate(*id, g),
                op => self.propagate(idx, op, g, &mut adj),
            }
        }
        grads
    }

    fn send(&self, adj: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, op: &Op, g: Mat, adj: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.send(adj, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.send(adj, *b, self.value(*a).t().dot(&g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.send(adj, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.send(adj, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => self.send(adj, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.send(adj, *b, g.clone());
                }
                self.send(adj, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.send(adj, *b, -&g);
                }
                self.send(adj, *a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.send(adj, *a, &g * self.value(*b));
                }
                if self.ng(*b) {
                    self.send(adj, *b, &g * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                if self.ng(*r) {
                    self.send(adj, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                self.send(adj, *a, g);
            }
            Op::MulRow(a, r) => {
                if self.ng(*r) {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.send(adj, *r, gr);
                }
                if self.ng(*a) {
                    self.send(adj, *a, &g * self.value(*r));
                }
            }
            Op::MulCol(a, c) => {
                if self.ng(*c) {
                    let gc = (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.send(adj, *c, gc);
                }
                if self.ng(*a) {
                    self.send(adj, *a, &g * self.value(*c));
                }
            }
            Op::AddScalar(a, s) => {
                if self.ng(*s) {
                    self.send(adj, *s, Mat::from_elem((1, 1), g.sum()));
                }
                self.send(adj, *a, g);
            }
            Op::Scale(a, k) => self.send(adj, *a, g.mapv(|x| x * k)),
            Op::Relu(a) => {
                let mut ga = g;
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                self.send(adj, *a, ga);
            }
            Op::Log(a) => {
                let ga = &g / self.value(*a);
                self.send(adj, *a, ga);
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.as_ref().unwrap();
                let mut gx = Mat::zeros(y.dim());
                for i in 0..y.nrows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..y.ncols() {
                        gx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                    }
                }
                self.send(adj, *x, gx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.as_ref().unwrap();
                let mut gx = g.clone();
                for i in 0..y.nrows() {
                    let gs: f64 = g.row(i).sum();
                    for j in 0..y.ncols() {
                        gx[[i, j]] -= y[[i, j]].exp() * gs;
                    }
                }
                self.send(adj, *a, gx);
            }
            Op::LayerNorm(a) => {
                let y = node.value.as_ref().unwrap();
                let inv = node.aux.as_ref().unwrap();
                let (n, d) = y.dim();
                let mut gx = Mat::zeros((n, d));
                for i in 0..n {
                    let mg = g.row(i).sum() / d as f64;
                    let mgy = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        gx[[i, j]] = inv[[i, 0]] * (g[[i, j]] - mg - y[[i, j]] * mgy);
                    }
                }
                self.send(adj, *a, gx);
            }
            Op::MeanRows(a) => {
                let n = self.shape(*a).0;
                let row = g.row(0).mapv(|x| x / n as f64);
                let ga = row.broadcast((n, row.len())).unwrap().to_owned();
                self.send(adj, *a, ga);
            }
            Op::SumRows(a) => {
                let n = self.shape(*a).0;
                let ga = g.broadcast((n, g.ncols())).unwrap().to_owned();
                self.send(adj, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                self.send(adj, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.ng(*p) {
                        self.send(adj, *p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.ng(*p) {
                        self.send(adj, *p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Mat::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                self.send(adj, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let mut ga = Mat::zeros(self.shape(*a));
                ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                self.send(adj, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let mut ga = Mat::zeros(self.shape(*a));
                for (k, &r) in idx.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(k);
                }
                self.send(adj, *a, ga);
            }
            Op::Gather(a, coords) => {
                let mut ga = Mat::zeros(self.shape(*a));
                for (k, c) in coords.iter().enumerate() {
                    ga[*c] += g[[0, k]];
                }
                self.send(adj, *a, ga);
            }
            Op::ScatterCols(a, cols) => {
                let ga = Mat::from_shape_fn((1, cols.len()), |(_, k)| g[[0, cols[k]]]);
                self.send(adj, *a, ga);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a);
                let flat: Vec<f64> = g.iter().copied().collect();
                self.send(adj, *a, Mat::from_shape_vec(shape, flat).unwrap());
            }
            Op::NormalizeRows(a) => {
                let y = node.value.as_ref().unwrap();
                let norms = node.aux.as_ref().unwrap();
                let (n, d) = y.dim();
                let mut gx = Mat::zeros((n, d));
                for i in 0..n {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[[i, j]] = (g[[i, j]] - y[[i, j]] * dot) / norms[[i, 0]];
                    }
                }
                self.send(adj, *a, gx);
            }
            Op::RecipClamp(a, eps) => {
                let mut ga = g;
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                    *gv = if x > *eps { -*gv / (x * x) } else { 0.0 };
                });
                self.send(adj, *a, ga);
            }
            Op::CrossEntropy(a, targets) => {
                let probs = node.aux.as_ref().unwrap();
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut ga = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    ga[[i, t]] -= 1.0;
                }
                ga.mapv_inplace(|x| x * scale);
                self.send(adj, *a, ga);
            }
            Op::CvSquared(a) => {
                let x = self.value(*a);
                let xs = x.as_slice().unwrap();
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let ga = if mean.abs() < NORM_EPS {
                    Mat::zeros(x.dim())
                } else {
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    // d/dx_i [var / mean²] = 2(x_i − m)/(n m²) − 2 var/(n m³)
                    x.mapv(|v| {
                        g[[0, 0]]
                            * (2.0 * (v - mean) / (n * mean * mean)
                                - 2.0 * var / (n * mean * mean * mean))
                    })
                };
                self.send(adj, *a, ga);
            }
        }
    }
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows_value(x: &Mat, causal: bool) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for i in 0..x.nrows() {
        let upto = if causal { (i + 1).min(x.ncols()) } else { x.ncols() };
        let row = x.slice(s![i, ..upto]);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..upto {
            let e = (x[[i, j]] - m).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..upto {
            out[[i, j]] /= sum;
        }
    }
    out
}

/// Population variance over squared mean; zero for a zero-mean input.
pub fn cv_squared_value(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean.abs() < NORM_EPS {
        return 0.0;
    }
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var / (mean * mean)
}
