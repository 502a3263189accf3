//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass together with whatever
//! it needs for the backward pass. All values are 2-D: rows are time steps and
//! columns are channels, scalars are `1 x 1`. Parameters live in a shared
//! [`ParamSet`] and are referenced by index, never copied into the graph.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::Real;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Array2<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Array2<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: usize) -> &Array2<T> {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Array2<T> {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = Self::new();
        for (n, t) in self.iter() {
            out.insert(n, Array2::zeros(t.raw_dim()));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.insert(n, t.mapv(|v| U::of(v.f64())));
        }
        out
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Param(usize),
    Input,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Swish(Var),
    Glu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        rstd: Array1<T>,
    },
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Frames {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
    },
    RelShift(Var),
    Sum(Var),
    Dropout(Var, Array2<T>),
    MultiXent {
        logits: Var,
        targets: Vec<(usize, Vec<u32>)>,
        vocab: usize,
        scale: T,
    },
    /// Gradient of the loss with respect to the logits, precomputed in forward.
    Precomputed(Var, Array2<T>),
    WeightedSum {
        states: Vec<Var>,
        logits: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
}

/// Parameter gradients indexed like the [`ParamSet`] they came from.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: usize) -> Option<&Array2<T>> {
        self.grads[id].as_ref()
    }

    /// Add another gradient set into this one.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (a, b) in self.grads.iter_mut().zip(other.grads) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => *x += &y,
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v.f64() * v.f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const LN_EPS: f64 = 1e-5;

/// One recorded forward pass.
pub struct Graph<T: Real> {
    params: Arc<ParamSet<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
}

impl<T: Real> Graph<T> {
    pub fn new(params: Arc<ParamSet<T>>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(x), _) => x,
            (None, Op::Param(i)) => self.params.tensor(*i),
            _ => unreachable!("node without value"),
        }
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    /// Leaf for a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, x: Array2<T>) -> Var {
        self.push(x, Op::Input)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        self.push(y, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        self.push(y, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b))
    }

    /// Add a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let y = self.value(a) + self.value(row);
        self.push(y, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        self.push(y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).mapv(|v| v * s);
        self.push(y, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| v.max(T::zero()));
        self.push(y, Op::Relu(a))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|v| v * sigmoid(v));
        self.push(y, Op::Swish(a))
    }

    /// Gated linear unit over the two column halves: `left * sigmoid(right)`.
    pub fn glu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let h = x.ncols() / 2;
        let mut y = x.slice(s![.., ..h]).to_owned();
        Zip::from(&mut y)
            .and(x.slice(s![.., h..]))
            .for_each(|o, &g| *o *= sigmoid(g));
        self.push(y, Op::Glu(a))
    }

    /// Per-row layer normalization with `1 x C` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = T::of(xv.ncols() as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = xv.to_owned();
        let mut rstd = Array1::zeros(xv.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / c;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / c;
            *r = T::one() / (var + eps).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let y = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut y = self.value(a).to_owned();
        for mut row in y.rows_mut() {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        self.push(y, Op::Softmax(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(y, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(y, Op::ConcatCols(parts.to_vec()))
    }

    /// Unfold `kernel` consecutive rows starting every `stride` rows into one row.
    ///
    /// Produces `floor(T / stride)` rows; positions past the end read as zero.
    pub fn frames(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.dim();
        let out_len = t / stride;
        let mut y = Array2::zeros((out_len, kernel * c));
        for o in 0..out_len {
            for k in 0..kernel {
                let src = o * stride + k;
                if src < t {
                    y.slice_mut(s![o, k * c..(k + 1) * c]).assign(&xv.row(src));
                }
            }
        }
        self.push(y, Op::Frames { x, kernel, stride })
    }

    /// Same-length depthwise convolution; `w` is `K x C` with odd `K`, zero padded.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (t, c) = xv.dim();
        let k = wv.nrows();
        let pad = (k - 1) / 2;
        let mut y = Array2::zeros((t, c));
        for i in 0..t {
            for kk in 0..k {
                let src = i as isize + kk as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let mut out = y.row_mut(i);
                Zip::from(&mut out)
                    .and(xv.row(src as usize))
                    .and(wv.row(kk))
                    .for_each(|o, &a, &b| *o += a * b);
            }
        }
        self.push(y, Op::DepthwiseConv { x, w })
    }

    /// Map `L x (2L-1)` relative scores (columns ordered by offset `L-1` down to
    /// `-(L-1)`) to `L x L` with `out[i, j] = a[i, L-1-i+j]`.
    pub fn rel_shift(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let l = av.nrows();
        assert_eq!(av.ncols(), 2 * l - 1, "rel_shift expects L x (2L-1)");
        let y = Array2::from_shape_fn((l, l), |(i, j)| av[[i, l - 1 - i + j]]);
        self.push(y, Op::RelShift(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    /// Inverted dropout with an explicit keep mask already scaled by `1/(1-p)`.
    pub fn dropout(&mut self, a: Var, mask: Array2<T>) -> Var {
        let y = self.value(a) * &mask;
        self.push(y, Op::Dropout(a, mask))
    }

    /// `scale * sum_r sum_j -log softmax(logits[r, j*V..(j+1)*V])[label_rj]` over the
    /// listed rows.
    pub fn multi_softmax_xent(
        &mut self,
        logits: Var,
        targets: Vec<(usize, Vec<u32>)>,
        vocab: usize,
        scale: T,
    ) -> Var {
        let lv = self.value(logits);
        let mut total = 0.0f64;
        for (r, labels) in &targets {
            let row = lv.row(*r);
            for (j, &lab) in labels.iter().enumerate() {
                let seg = row.slice(s![j * vocab..(j + 1) * vocab]);
                let m = seg.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.f64()));
                let lse = m + seg.iter().map(|&v| (v.f64() - m).exp()).sum::<f64>().ln();
                total += lse - seg[lab as usize].f64();
            }
        }
        let y = Array2::from_elem((1, 1), T::of(total) * scale);
        self.push(
            y,
            Op::MultiXent {
                logits,
                targets,
                vocab,
                scale,
            },
        )
    }

    /// Scalar node whose value and gradient with respect to `x` were computed
    /// externally (for fused losses such as CTC).
    pub fn precomputed(&mut self, x: Var, value: T, grad: Array2<T>) -> Var {
        assert_eq!(grad.dim(), self.value(x).dim());
        self.push(Array2::from_elem((1, 1), value), Op::Precomputed(x, grad))
    }

    /// Softmax-weighted sum of equally shaped states; `logits` is `1 x n`.
    pub fn weighted_sum(&mut self, states: &[Var], logits: Var) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), states.len());
        let m = lv.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let e: Vec<T> = lv.iter().map(|&v| (v - m).exp()).collect();
        let z: T = e.iter().copied().sum();
        let weights: Vec<T> = e.into_iter().map(|v| v / z).collect();
        let mut y = Array2::zeros(self.value(states[0]).raw_dim());
        for (&s, &w) in states.iter().zip(&weights) {
            y.scaled_add(w, self.value(s));
        }
        self.push(
            y,
            Op::WeightedSum {
                states: states.to_vec(),
                logits,
                weights,
            },
        )
    }

    /// Backpropagate from a scalar loss.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        self.backward_from(&[(loss, Array2::ones((1, 1)))])
    }

    /// Backpropagate from explicit upstream gradients on any set of nodes.
    pub fn backward_from(&self, seeds: &[(Var, Array2<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            acc(&mut grads, *v, g.clone());
        }
        let mut out = Gradients::empty(self.params.len());
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads, &mut out);
        }
        out
    }

    fn backward_node(
        &self,
        i: usize,
        g: Array2<T>,
        grads: &mut [Option<Array2<T>>],
        out: &mut Gradients<T>,
    ) {
        match &self.nodes[i].op {
            Op::Param(id) => match &mut out.grads[*id] {
                Some(x) => *x += &g,
                slot => *slot = Some(g),
            },
            Op::Input => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(&g);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let da = g.dot(self.value(*b));
                let db = g.t().dot(self.value(*a));
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                acc(grads, *b, g.clone());
                acc(grads, *a, g);
            }
            Op::AddRow(a, r) => {
                acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let da = &g * self.value(*b);
                let db = &g * self.value(*a);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(grads, *a, g.mapv(|v| v * s));
            }
            Op::Relu(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero()
                        }
                    });
                acc(grads, *a, d);
            }
            Op::Swish(a) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let sg = sigmoid(x);
                    *d *= sg + x * sg * (T::one() - sg);
                });
                acc(grads, *a, d);
            }
            Op::Glu(a) => {
                let x = self.value(*a);
                let h = x.ncols() / 2;
                let mut d = Array2::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    for c in 0..h {
                        let lin = x[[r, c]];
                        let sg = sigmoid(x[[r, c + h]]);
                        d[[r, c]] = g[[r, c]] * sg;
                        d[[r, c + h]] = g[[r, c]] * lin * sg * (T::one() - sg);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(
                    grads,
                    *gamma,
                    (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                let dxhat = &g * gv;
                let c = T::of(xhat.ncols() as f64);
                let mut dx = Array2::zeros(xhat.raw_dim());
                for r in 0..xhat.nrows() {
                    let dh = dxhat.row(r);
                    let xh = xhat.row(r);
                    let m1 = dh.sum() / c;
                    let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / c;
                    let rs = rstd[r];
                    for col in 0..xhat.ncols() {
                        dx[[r, col]] = rs * (dh[col] - m1 - xh[col] * m2);
                    }
                }
                acc(grads, *x, dx);
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.as_ref().expect("softmax value");
                let mut d = &g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = drow.sum();
                    Zip::from(&mut drow).and(yrow).for_each(|d, &yv| *d -= yv * s);
                }
                acc(grads, *a, d);
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    acc(grads, p, g.slice(s![.., off..off + w]).to_owned());
                    off += w;
                }
            }
            Op::Frames { x, kernel, stride } => {
                let (t, c) = self.value(*x).dim();
                let mut d = Array2::zeros((t, c));
                for o in 0..g.nrows() {
                    for k in 0..*kernel {
                        let src = o * stride + k;
                        if src < t {
                            let mut row = d.row_mut(src);
                            row += &g.slice(s![o, k * c..(k + 1) * c]);
                        }
                    }
                }
                acc(grads, *x, d);
            }
            Op::DepthwiseConv { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (t, _) = xv.dim();
                let k = wv.nrows();
                let pad = (k - 1) / 2;
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dw = Array2::zeros(wv.raw_dim());
                for i in 0..t {
                    for kk in 0..k {
                        let src = i as isize + kk as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        let gr = g.row(i);
                        Zip::from(dx.row_mut(src))
                            .and(gr)
                            .and(wv.row(kk))
                            .for_each(|d, &gv, &wv| *d += gv * wv);
                        Zip::from(dw.row_mut(kk))
                            .and(gr)
                            .and(xv.row(src))
                            .for_each(|d, &gv, &xv| *d += gv * xv);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *w, dw);
            }
            Op::RelShift(a) => {
                let l = g.nrows();
                let mut d = Array2::zeros((l, 2 * l - 1));
                for i in 0..l {
                    for j in 0..l {
                        d[[i, l - 1 - i + j]] += g[[i, j]];
                    }
                }
                acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                acc(grads, *a, d);
            }
            Op::Dropout(a, mask) => acc(grads, *a, &g * mask),
            Op::MultiXent {
                logits,
                targets,
                vocab,
                scale,
            } => {
                let lv = self.value(*logits);
                let mut d = Array2::zeros(lv.raw_dim());
                let up = g[[0, 0]] * *scale;
                for (r, labels) in targets {
                    for (j, &lab) in labels.iter().enumerate() {
                        let seg = lv.slice(s![*r, j * vocab..(j + 1) * vocab]);
                        let m = seg.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                        let z: T = seg.iter().map(|&v| (v - m).exp()).sum();
                        let mut out = d.slice_mut(s![*r, j * vocab..(j + 1) * vocab]);
                        Zip::from(&mut out)
                            .and(seg)
                            .for_each(|o, &v| *o = up * (v - m).exp() / z);
                        out[lab as usize] -= up;
                    }
                }
                acc(grads, *logits, d);
            }
            Op::Precomputed(x, grad) => {
                let up = g[[0, 0]];
                acc(grads, *x, grad.mapv(|v| v * up));
            }
            Op::WeightedSum {
                states,
                logits,
                weights,
            } => {
                let dw: Vec<T> = states
                    .iter()
                    .map(|&s| (&g * self.value(s)).sum())
                    .collect();
                let mean: T = dw.iter().zip(weights).map(|(&d, &w)| d * w).sum();
                let dl = Array2::from_shape_fn((1, weights.len()), |(_, l)| {
                    weights[l] * (dw[l] - mean)
                });
                acc(grads, *logits, dl);
                for (&s, &w) in states.iter().zip(weights) {
                    acc(grads, s, g.mapv(|v| v * w));
                }
            }
        }
    }
}

fn acc<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(x) => *x += &g,
        slot => *slot = Some(g),
    }
}
