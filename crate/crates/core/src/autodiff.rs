//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and the recipe for its backward rule. [`Graph::backward`] walks the tape
//! in reverse, so gradient accumulation order (and hence every bit of the
//! result) is fixed by construction order.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::mathfn;
use crate::sparse::{conv_accumulate, conv_backward, KernelMap};
use crate::tensor::{gemm_into, Mat, Real};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("{0}")]
    Invalid(String),
}

type Res<T> = Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable matrix plus adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Mat<T>,
    pub m: Mat<T>,
    pub v: Mat<T>,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> Res<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(AutodiffError::Invalid(format!("duplicate parameter name '{name}'")));
        }
        let id = ParamId(self.params.len());
        let (r, c) = value.shape();
        self.params.push(Parameter {
            name: name.clone(),
            value,
            m: Mat::zeros(r, c),
            v: Mat::zeros(r, c),
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.as_slice().len()).sum()
    }

    /// Same parameters converted to another precision (optimizer state included).
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Grouping of rows into attention windows.
pub type RowGroups = Arc<Vec<Vec<u32>>>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Relu(Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Arc<Vec<u32>> },
    ScatterAddRows { x: Var, idx: Arc<Vec<u32>> },
    MeanOverRows(Var),
    MeanOverCols(Var),
    SqrtSigned(Var),
    Scale(Var, f64),
    RoundSte(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    SparseConv { x: Var, w: Var, map: Arc<KernelMap> },
    WindowAttention(Box<AttentionTape>),
    GaussianBits { y: Var, mu: Var, sigma: Var, cap: f64 },
}

#[derive(Debug)]
struct AttentionTape {
    q: Var,
    k: Var,
    v: Var,
    groups: RowGroups,
    heads: usize,
    /// softmax probabilities per (group, head), flattened group-major
    probs: Vec<Vec<f64>>,
}

struct Node<T> {
    value: Mat<T>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape bound to a parameter store.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Mat<T>>>,
    params: Option<&'p ParamStore<T>>,
    bound: HashMap<ParamId, Var>,
    /// reject non-finite forward values
    pub debug_checks: bool,
}

impl<'p, T: Real> Default for Graph<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

macro_rules! shape_check {
    ($op:expr, $a:expr, $b:expr, $cond:expr) => {
        if !$cond {
            return Err(AutodiffError::Shape {
                op: $op,
                lhs: $a,
                rhs: $b,
            });
        }
    };
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: None,
            bound: HashMap::new(),
            debug_checks: cfg!(debug_assertions),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        let mut g = Self::new();
        g.params = Some(params);
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[(0, 0)].to_f64()
    }

    fn push(&mut self, value: Mat<T>, op: Op, requires_grad: bool, name: &'static str) -> Res<Var> {
        if self.debug_checks && value.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(AutodiffError::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient is accumulated for it).
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted.
    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.params.expect("graph has no parameter store");
        let v = self.input(store.value(id).clone());
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        shape_check!("matmul", sa, sb, sa.1 == sb.0);
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Res<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        shape_check!(name, sa, sb, sa == sb);
        let out = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Res<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + 1 row` broadcast over all rows (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Res<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        shape_check!("add_row", sx, sr, sr.0 == 1 && sr.1 == sx.1);
        let mut out = self.value(x).clone();
        let r = self.value(row).row(0).to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, row]);
        self.push(out, Op::AddRow(x, row), rg, "add_row")
    }

    pub fn relu(&mut self, x: Var) -> Res<Var> {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn softmax_rows(&mut self, x: Var) -> Res<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg, "softmax_rows")
    }

    /// Channel (column) concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Res<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::Invalid("concat of nothing".into()));
        }
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            shape_check!("concat", self.shape(parts[0]), self.shape(p), self.shape(p).0 == rows);
        }
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::hcat(&mats);
        let rg = self.rg(parts);
        self.push(out, Op::Concat(parts.to_vec()), rg, "concat")
    }

    /// Columns `start .. start + width`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Res<Var> {
        let s = self.shape(x);
        shape_check!("slice_cols", s, (start, width), start + width <= s.1);
        let out = self.value(x).cols_range(start, width);
        let rg = self.rg(&[x]);
        self.push(out, Op::SliceCols { x, start }, rg, "slice_cols")
    }

    /// Split columns into consecutive pieces of the given widths.
    pub fn split(&mut self, x: Var, widths: &[usize]) -> Res<Vec<Var>> {
        let total: usize = widths.iter().sum();
        shape_check!("split", self.shape(x), (0, total), self.shape(x).1 == total);
        let mut start = 0;
        let mut out = Vec::with_capacity(widths.len());
        for &w in widths {
            out.push(self.slice_cols(x, start, w)?);
            start += w;
        }
        Ok(out)
    }

    /// Output row `r` is input row `idx[r]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<u32>>) -> Res<Var> {
        let src = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= src.rows()) {
            return Err(AutodiffError::Invalid(format!("gather index {bad} out of range")));
        }
        let c = src.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(src.row(i as usize));
        }
        let out = Mat::from_vec(idx.len(), c, data);
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows { x, idx }, rg, "gather_rows")
    }

    /// Output has `out_rows` rows; input row `r` is added into output row `idx[r]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Arc<Vec<u32>>, out_rows: usize) -> Res<Var> {
        let src = self.value(x);
        shape_check!("scatter_add_rows", src.shape(), (idx.len(), 0), src.rows() == idx.len());
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= out_rows) {
            return Err(AutodiffError::Invalid(format!("scatter index {bad} out of range")));
        }
        let mut out = Mat::zeros(out_rows, src.cols());
        for (r, &i) in idx.iter().enumerate() {
            for (o, &v) in out.row_mut(i as usize).iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::ScatterAddRows { x, idx }, rg, "scatter_add_rows")
    }

    /// Average over rows: `N x C -> 1 x C` (spatial pooling).
    pub fn mean_over_rows(&mut self, x: Var) -> Res<Var> {
        if self.shape(x).0 == 0 {
            return Err(AutodiffError::Invalid("mean over zero rows".into()));
        }
        let out = crate::sparse::col_means(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanOverRows(x), rg, "mean_over_rows")
    }

    /// Average over columns: `N x C -> N x 1` (channel pooling).
    pub fn mean_over_cols(&mut self, x: Var) -> Res<Var> {
        if self.shape(x).1 == 0 {
            return Err(AutodiffError::Invalid("mean over zero columns".into()));
        }
        let out = crate::sparse::row_means(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanOverCols(x), rg, "mean_over_cols")
    }

    /// `sign(x) * sqrt(|x|)`.
    pub fn sqrt_signed(&mut self, x: Var) -> Res<Var> {
        let out = self.value(x).map(sqrt_signed);
        let rg = self.rg(&[x]);
        self.push(out, Op::SqrtSigned(x), rg, "sqrt_signed")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Res<Var> {
        let st = T::from_f64(s);
        let out = self.value(x).map(|v| v * st);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg, "scale")
    }

    /// Round half away from zero forward, identity gradient backward.
    pub fn round_ste(&mut self, x: Var) -> Res<Var> {
        let out = self.value(x).map(round_half_away);
        let rg = self.rg(&[x]);
        self.push(out, Op::RoundSte(x), rg, "round_ste")
    }

    pub fn exp(&mut self, x: Var) -> Res<Var> {
        let out = self.value(x).map(|v| v.exp());
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg, "exp")
    }

    /// Elementwise clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Res<Var> {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let out = self.value(x).map(|v| {
            if v < l {
                l
            } else if v > h {
                h
            } else {
                v
            }
        });
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg, "clamp")
    }

    pub fn sum(&mut self, x: Var) -> Res<Var> {
        let mut s = T::ZERO;
        for &v in self.value(x).as_slice() {
            s += v;
        }
        let rg = self.rg(&[x]);
        self.push(Mat::filled(1, 1, s), Op::Sum(x), rg, "sum")
    }

    /// Sparse convolution over a prebuilt kernel map. `w` stacks the per-offset
    /// `[C_in, C_out]` matrices row-wise.
    pub fn sparse_conv(&mut self, x: Var, w: Var, map: Arc<KernelMap>) -> Res<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        shape_check!(
            "sparse_conv",
            sx,
            sw,
            sw.0 == map.offsets.len() * sx.1 && sx.0 == map.input_len
        );
        let mut out = Mat::zeros(map.output_len, sw.1);
        conv_accumulate(self.value(x), self.value(w), &map, &mut out);
        let rg = self.rg(&[x, w]);
        self.push(out, Op::SparseConv { x, w, map }, rg, "sparse_conv")
    }

    /// Multi-head softmax attention restricted to row groups.
    ///
    /// Returns the concatenated head outputs `A V` (before any output projection).
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: RowGroups,
        heads: usize,
    ) -> Res<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        shape_check!("window_attention", sq, sk, sq == sk && sk == sv);
        if heads == 0 || sq.1 % heads != 0 {
            return Err(AutodiffError::Invalid(format!(
                "{} channels not divisible into {heads} heads",
                sq.1
            )));
        }
        let d = sq.1 / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros(sq.0, sq.1);
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for rows in groups.iter() {
            let n = rows.len();
            for h in 0..heads {
                let c0 = h * d;
                let mut p = vec![0.0f64; n * n];
                for (a, &ra) in rows.iter().enumerate() {
                    let qa = &qm.row(ra as usize)[c0..c0 + d];
                    for (b, &rb) in rows.iter().enumerate() {
                        let kb = &km.row(rb as usize)[c0..c0 + d];
                        let mut s = 0.0;
                        for t in 0..d {
                            s += qa[t].to_f64() * kb[t].to_f64();
                        }
                        p[a * n + b] = s * scale;
                    }
                    softmax_in_place(&mut p[a * n..(a + 1) * n]);
                }
                for (a, &ra) in rows.iter().enumerate() {
                    let orow = &mut out.row_mut(ra as usize)[c0..c0 + d];
                    let mut acc = vec![0.0f64; d];
                    for (b, &rb) in rows.iter().enumerate() {
                        let w = p[a * n + b];
                        let vb = &vm.row(rb as usize)[c0..c0 + d];
                        for t in 0..d {
                            acc[t] += w * vb[t].to_f64();
                        }
                    }
                    for t in 0..d {
                        orow[t] = T::from_f64(acc[t]);
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        let tape = AttentionTape {
            q,
            k,
            v,
            groups,
            heads,
            probs,
        };
        self.push(out, Op::WindowAttention(Box::new(tape)), rg, "window_attention")
    }

    /// Total bits `sum -log2 P(y)` of integers `y` under discretized Gaussians
    /// `N(mu, sigma^2)`. Per-element cost is capped at `cap` bits; capped
    /// elements contribute no gradient.
    pub fn gaussian_bits(&mut self, y: Var, mu: Var, sigma: Var, cap: f64) -> Res<Var> {
        let (sy, sm, ss) = (self.shape(y), self.shape(mu), self.shape(sigma));
        shape_check!("gaussian_bits", sy, sm, sy == sm);
        shape_check!("gaussian_bits", sy, ss, sy == ss);
        let mut total = 0.0f64;
        for ((&yv, &mv), &sv) in self
            .value(y)
            .as_slice()
            .iter()
            .zip(self.value(mu).as_slice())
            .zip(self.value(sigma).as_slice())
        {
            total += element_bits(yv.to_f64(), mv.to_f64(), sv.to_f64(), cap).0;
        }
        let rg = self.rg(&[y, mu, sigma]);
        self.push(
            Mat::filled(1, 1, T::from_f64(total)),
            Op::GaussianBits { y, mu, sigma, cap },
            rg,
            "gaussian_bits",
        )
    }

    /// Gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter.
    pub fn param_grads(&self) -> Vec<(ParamId, &Mat<T>)> {
        let mut out: Vec<(ParamId, &Mat<T>)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn acc(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&mut self, loss: Var) -> Res<()> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(AutodiffError::NotScalar(s));
        }
        let mut grads: Vec<Option<Mat<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::filled(1, 1, T::ONE));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(a) {
                    let mut ga = Mat::zeros(va.rows(), va.cols());
                    gemm_into(g, false, vb, true, &mut ga, T::ZERO);
                    Self::acc(grads, *a, ga);
                }
                if needs(b) {
                    let mut gb = Mat::zeros(vb.rows(), vb.cols());
                    gemm_into(va, true, g, false, &mut gb, T::ZERO);
                    Self::acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    Self::acc(grads, *a, g.clone());
                }
                if needs(b) {
                    Self::acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    Self::acc(grads, *a, g.clone());
                }
                if needs(b) {
                    Self::acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    Self::acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if needs(b) {
                    Self::acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                if needs(x) {
                    Self::acc(grads, *x, g.clone());
                }
                if needs(row) {
                    let mut gr = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gr.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    Self::acc(grads, *row, gr);
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > T::ZERO { gv } else { T::ZERO });
                Self::acc(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mut dot = T::ZERO;
                    for (&a, &b) in yr.iter().zip(gr) {
                        dot += a * b;
                    }
                    for ((o, &a), &b) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = a * (b - dot);
                    }
                }
                Self::acc(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if needs(p) {
                        Self::acc(grads, *p, g.cols_range(start, w));
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let mut gx = Mat::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    gx.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                Self::acc(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut gx = Mat::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i as usize).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                Self::acc(grads, *x, gx);
            }
            Op::ScatterAddRows { x, idx } => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    data.extend_from_slice(g.row(i as usize));
                }
                Self::acc(grads, *x, Mat::from_vec(idx.len(), c, data));
            }
            Op::MeanOverRows(x) => {
                let (r, c) = self.shape(*x);
                let inv = T::ONE / T::from_f64(r as f64);
                let row: Vec<T> = g.row(0).iter().map(|&v| v * inv).collect();
                let mut gx = Mat::zeros(r, c);
                for i in 0..r {
                    gx.row_mut(i).copy_from_slice(&row);
                }
                Self::acc(grads, *x, gx);
            }
            Op::MeanOverCols(x) => {
                let (r, c) = self.shape(*x);
                let inv = T::ONE / T::from_f64(c as f64);
                let gx = Mat::from_fn(r, c, |i, _| g[(i, 0)] * inv);
                Self::acc(grads, *x, gx);
            }
            Op::SqrtSigned(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    let a = xv.abs();
                    if a == T::ZERO {
                        T::ZERO
                    } else {
                        gv / (T::from_f64(2.0) * a.sqrt())
                    }
                });
                Self::acc(grads, *x, gx);
            }
            Op::Scale(x, s) => {
                let st = T::from_f64(*s);
                Self::acc(grads, *x, g.map(|v| v * st));
            }
            Op::RoundSte(x) => Self::acc(grads, *x, g.clone()),
            Op::Exp(x) => Self::acc(grads, *x, g.zip_map(&node.value, |gv, yv| gv * yv)),
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > l && xv < h {
                        gv
                    } else {
                        T::ZERO
                    }
                });
                Self::acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                let (r, c) = self.shape(*x);
                Self::acc(grads, *x, Mat::filled(r, c, g[(0, 0)]));
            }
            Op::SparseConv { x, w, map } => {
                let (gx, gw) = conv_backward(self.value(*x), self.value(*w), map, g);
                if needs(x) {
                    Self::acc(grads, *x, gx);
                }
                if needs(w) {
                    Self::acc(grads, *w, gw);
                }
            }
            Op::WindowAttention(tape) => self.attention_backward(tape, g, grads),
            Op::GaussianBits { y, mu, sigma, cap } => {
                let g0 = g[(0, 0)];
                let (vy, vm, vs) = (self.value(*y), self.value(*mu), self.value(*sigma));
                let (r, c) = vy.shape();
                let mut gy = Mat::zeros(r, c);
                let mut gm = Mat::zeros(r, c);
                let mut gs = Mat::zeros(r, c);
                for idx in 0..r * c {
                    let (_, dy, dm, ds) = element_bits(
                        vy.as_slice()[idx].to_f64(),
                        vm.as_slice()[idx].to_f64(),
                        vs.as_slice()[idx].to_f64(),
                        *cap,
                    );
                    gy.as_mut_slice()[idx] = g0 * T::from_f64(dy);
                    gm.as_mut_slice()[idx] = g0 * T::from_f64(dm);
                    gs.as_mut_slice()[idx] = g0 * T::from_f64(ds);
                }
                if needs(y) {
                    Self::acc(grads, *y, gy);
                }
                if needs(mu) {
                    Self::acc(grads, *mu, gm);
                }
                if needs(sigma) {
                    Self::acc(grads, *sigma, gs);
                }
            }
        }
    }

    fn attention_backward(&self, tape: &AttentionTape, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let (qm, km, vm) = (self.value(tape.q), self.value(tape.k), self.value(tape.v));
        let (rows_total, ch) = qm.shape();
        let d = ch / tape.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut gq = vec![0.0f64; rows_total * ch];
        let mut gk = vec![0.0f64; rows_total * ch];
        let mut gv = vec![0.0f64; rows_total * ch];
        let mut pi = 0;
        for rows in tape.groups.iter() {
            let n = rows.len();
            for h in 0..tape.heads {
                let c0 = h * d;
                let p = &tape.probs[pi];
                pi += 1;
                // dP = dO V^T ; dV = P^T dO
                let mut dp = vec![0.0f64; n * n];
                for (a, &ra) in rows.iter().enumerate() {
                    let go = &g.row(ra as usize)[c0..c0 + d];
                    for (b, &rb) in rows.iter().enumerate() {
                        let vb = &vm.row(rb as usize)[c0..c0 + d];
                        let mut s = 0.0;
                        for t in 0..d {
                            s += go[t].to_f64() * vb[t].to_f64();
                        }
                        dp[a * n + b] = s;
                        let w = p[a * n + b];
                        let base = rb as usize * ch + c0;
                        for t in 0..d {
                            gv[base + t] += w * go[t].to_f64();
                        }
                    }
                }
                // dS = P * (dP - rowsum(dP * P)), scaled into dQ, dK
                for a in 0..n {
                    let pr = &p[a * n..(a + 1) * n];
                    let dr = &mut dp[a * n..(a + 1) * n];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(x, y)| x * y).sum();
                    for (dv, &pv) in dr.iter_mut().zip(pr) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                for (a, &ra) in rows.iter().enumerate() {
                    let qbase = ra as usize * ch + c0;
                    for (b, &rb) in rows.iter().enumerate() {
                        let ds = dp[a * n + b];
                        if ds == 0.0 {
                            continue;
                        }
                        let kb = &km.row(rb as usize)[c0..c0 + d];
                        let qa = &qm.row(ra as usize)[c0..c0 + d];
                        let kbase = rb as usize * ch + c0;
                        for t in 0..d {
                            gq[qbase + t] += ds * kb[t].to_f64();
                            gk[kbase + t] += ds * qa[t].to_f64();
                        }
                    }
                }
            }
        }
        let to_mat = |v: Vec<f64>| Mat::from_vec(rows_total, ch, v.into_iter().map(T::from_f64).collect());
        if self.nodes[tape.q.0].requires_grad {
            Self::acc(grads, tape.q, to_mat(gq));
        }
        if self.nodes[tape.k.0].requires_grad {
            Self::acc(grads, tape.k, to_mat(gk));
        }
        if self.nodes[tape.v.0].requires_grad {
            Self::acc(grads, tape.v, to_mat(gv));
        }
    }
}

fn softmax_in_place<U: Real>(row: &mut [U]) {
    let mut max = f64::NEG_INFINITY;
    for v in row.iter() {
        max = max.max(v.to_f64());
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        let e = (v.to_f64() - max).exp();
        sum += e;
        *v = U::from_f64(e);
    }
    for v in row.iter_mut() {
        *v = U::from_f64(v.to_f64() / sum);
    }
}

#[inline]
pub fn sqrt_signed<T: Real>(v: T) -> T {
    if v < T::ZERO {
        -(-v).sqrt()
    } else {
        v.sqrt()
    }
}

#[inline]
pub fn round_half_away<T: Real>(v: T) -> T {
    T::from_f64(v.to_f64().round())
}

const LN2: f64 = std::f64::consts::LN_2;

/// `(bits, d/dy, d/dmu, d/dsigma)` for one discretized Gaussian element.
fn element_bits(y: f64, mu: f64, sigma: f64, cap: f64) -> (f64, f64, f64, f64) {
    let diff = y - mu;
    let v = diff.abs();
    let a = (0.5 - v) / sigma;
    let b = (-0.5 - v) / sigma;
    let p = mathfn::normal_cdf(a) - mathfn::normal_cdf(b);
    let bits = if p > 0.0 { -p.ln() / LN2 } else { f64::INFINITY };
    if bits >= cap {
        return (cap, 0.0, 0.0, 0.0);
    }
    let (pa, pb) = (mathfn::normal_pdf(a), mathfn::normal_pdf(b));
    let dp_dv = (pb - pa) / sigma;
    let dp_ds = (b * pb - a * pa) / sigma;
    let dbits_dp = -1.0 / (p * LN2);
    let sgn = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    let dv = dbits_dp * dp_dv;
    (bits, dv * sgn, -dv * sgn, dbits_dp * dp_ds)
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for relative errors of near-zero gradients.
const GRAD_CHECK_FLOOR: f64 = 1e-6;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

fn report(errs: impl Iterator<Item = (usize, f64)>, tol: f64) -> GradCheckReport {
    let mut r = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        tol,
        passed: true,
    };
    for (i, e) in errs {
        r.checked += 1;
        if e > r.max_rel_error || e.is_nan() {
            r.max_rel_error = e;
            r.worst_index = i;
        }
    }
    r.passed = r.max_rel_error <= tol;
    r
}

/// Compare `d f(x) / dx` against central differences with step `eps`.
///
/// `f` must build a scalar on the supplied graph from the input node.
pub fn grad_check<F>(f: F, x: &Mat<f64>, eps: f64, tol: f64) -> Res<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Res<Var>,
{
    grad_check_with(&ParamStore::new(), f, x, eps, tol)
}

/// [`grad_check`] on a graph bound to `params`.
pub fn grad_check_with<F>(
    params: &ParamStore<f64>,
    f: F,
    x: &Mat<f64>,
    eps: f64,
    tol: f64,
) -> Res<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Res<Var>,
{
    let eval = |xv: Mat<f64>| -> Res<f64> {
        let mut g = Graph::with_params(params);
        let xi = g.constant(xv);
        let out = f(&mut g, xi)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::with_params(params);
    let xi = g.input(x.clone());
    let out = f(&mut g, xi)?;
    g.backward(out)?;
    let analytic = g
        .grad(xi)
        .cloned()
        .unwrap_or_else(|| Mat::zeros(x.rows(), x.cols()));
    let mut errs = Vec::with_capacity(x.as_slice().len());
    for i in 0..x.as_slice().len() {
        let mut xp = x.clone();
        xp.as_mut_slice()[i] += eps;
        let mut xm = x.clone();
        xm.as_mut_slice()[i] -= eps;
        let num = (eval(xp)? - eval(xm)?) / (2.0 * eps);
        errs.push((i, rel_error(analytic.as_slice()[i], num)));
    }
    Ok(report(errs.into_iter(), tol))
}

/// Central-difference check of parameter gradients.
///
/// At most `max_per_param` evenly spaced elements of each parameter are perturbed.
pub fn grad_check_params<F>(
    params: &mut ParamStore<f64>,
    f: F,
    x: &Mat<f64>,
    eps: f64,
    tol: f64,
    max_per_param: usize,
) -> Res<Vec<(String, GradCheckReport)>>
where
    F: Fn(&mut Graph<f64>, Var) -> Res<Var>,
{
    let analytic: Vec<(ParamId, Mat<f64>)> = {
        let mut g = Graph::with_params(params);
        let xi = g.constant(x.clone());
        let out = f(&mut g, xi)?;
        g.backward(out)?;
        let grads: HashMap<ParamId, Mat<f64>> =
            g.param_grads().into_iter().map(|(id, m)| (id, m.clone())).collect();
        params
            .iter()
            .map(|(id, p)| {
                let (r, c) = p.value.shape();
                (id, grads.get(&id).cloned().unwrap_or_else(|| Mat::zeros(r, c)))
            })
            .collect()
    };
    let eval = |params: &ParamStore<f64>| -> Res<f64> {
        let mut g = Graph::with_params(params);
        let xi = g.constant(x.clone());
        let out = f(&mut g, xi)?;
        Ok(g.scalar(out))
    };
    let mut out = Vec::new();
    for (id, grad) in analytic {
        let len = grad.as_slice().len();
        let step = len.div_ceil(max_per_param.max(1)).max(1);
        let mut errs = Vec::new();
        for i in (0..len).step_by(step) {
            let orig = params.value(id).as_slice()[i];
            params.value_mut(id).as_mut_slice()[i] = orig + eps;
            let fp = eval(params)?;
            params.value_mut(id).as_mut_slice()[i] = orig - eps;
            let fm = eval(params)?;
            params.value_mut(id).as_mut_slice()[i] = orig;
            errs.push((i, rel_error(grad.as_slice()[i], (fp - fm) / (2.0 * eps))));
        }
        out.push((params.get(id).name.clone(), report(errs.into_iter(), tol)));
    }
    Ok(out)
}
