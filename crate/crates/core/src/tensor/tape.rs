use std::collections::HashMap;

use super::params::ParamId;
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Abs,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub oh: usize,
    pub ow: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MatGeom {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_b: bool,
    pub b_shared: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ResizeGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var, MatGeom),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    MaskedSoftmax {
        x: Var,
        n: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        norms: Vec<f64>,
        eps: f64,
    },
    Conv2d(Var, Var, ConvGeom),
    Bilinear(Var, ResizeGeom),
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        n_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Expand {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
        d: usize,
    },
    SplitHeads {
        x: Var,
        b: usize,
        n: usize,
        h: usize,
        d: usize,
    },
    MergeHeads {
        x: Var,
        b: usize,
        n: usize,
        h: usize,
        d: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    BceLogitsMean {
        z: Var,
        labels: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Unary(..) => "unary",
            Op::Binary(..) => "binary",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Conv2d(..) => "conv2d",
            Op::Bilinear(..) => "bilinear_resize",
            Op::MaxAxis { .. } => "max_axis",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Expand { .. } => "expand",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::BceLogitsMean { .. } => "bce_logits_mean",
        }
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub needs_grad: bool,
}

/// A single-threaded record of one forward pass.
///
/// Tapes are rebuilt for every forward pass; [`Tape::backward`] leaves the
/// recorded values untouched so diagnostics can still be read afterwards.
/// Parameters are bound at most once per tape, so a weight shared between the
/// template and search branches accumulates both contributions.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    verify_finite: bool,
    nonfinite: Option<(usize, &'static str)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Debug verification mode: every op output is scanned for NaN/Inf and
    /// the first offender is reported by [`Tape::check_finite`] and
    /// [`Tape::backward`].
    pub fn verifying() -> Self {
        Self {
            verify_finite: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.nonfinite = None;
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub(crate) fn bind_param(&mut self, id: ParamId, t: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    /// Makes later binds of `id` resolve to `v` instead of the store value.
    /// Used to differentiate a model with respect to externally supplied
    /// parameter leaves (finite-difference checks).
    pub fn alias_param(&mut self, id: ParamId, v: Var) {
        self.params.insert(id, v);
    }

    pub(crate) fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.nonfinite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let idx = self.nodes.len();
        if self.verify_finite && self.nonfinite.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.nonfinite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(idx)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check_finite()?;
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut g = GradBuf {
            bufs: (0..self.nodes.len()).map(|_| None).collect(),
        };
        g.bufs[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = g.bufs[i].take() else {
                continue;
            };
            self.backward_node(i, &grad, &mut g);
            g.bufs[i] = Some(grad);
        }
        Ok(Gradients { bufs: g.bufs })
    }

    fn backward_node(&self, i: usize, g: &[f64], gb: &mut GradBuf) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                if !self.needs_grad(*x) {
                    return;
                }
                let xv = &self.nodes[x.0].value;
                let dx = gb.slot(*x, xv.len());
                for j in 0..xv.len() {
                    let d = match kind {
                        Unary::Relu => {
                            if xv[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Gelu => gelu_grad(xv[j]),
                        Unary::Sigmoid => y[j] * (1.0 - y[j]),
                        Unary::Tanh => 1.0 - y[j] * y[j],
                        Unary::Exp => y[j],
                        Unary::Ln => 1.0 / xv[j],
                        Unary::Abs => {
                            if xv[j] > 0.0 {
                                1.0
                            } else if xv[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Neg => -1.0,
                    };
                    dx[j] += g[j] * d;
                }
            }
            Op::Binary(a, b, kind) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let n = av.len();
                if self.needs_grad(*a) {
                    let da = gb.slot(*a, n);
                    for j in 0..n {
                        da[j] += g[j]
                            * match kind {
                                Binary::Add | Binary::Sub => 1.0,
                                Binary::Mul => bv[j],
                                Binary::Div => 1.0 / bv[j],
                                Binary::Min => (av[j] <= bv[j]) as u8 as f64,
                                Binary::Max => (av[j] >= bv[j]) as u8 as f64,
                            };
                    }
                }
                if self.needs_grad(*b) {
                    let db = gb.slot(*b, n);
                    for j in 0..n {
                        db[j] += g[j]
                            * match kind {
                                Binary::Add => 1.0,
                                Binary::Sub => -1.0,
                                Binary::Mul => av[j],
                                Binary::Div => -av[j] / (bv[j] * bv[j]),
                                Binary::Min => (av[j] > bv[j]) as u8 as f64,
                                Binary::Max => (av[j] < bv[j]) as u8 as f64,
                            };
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.needs_grad(*x) {
                    let dx = gb.slot(*x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += c * gi);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.needs_grad(*x) {
                    let dx = gb.slot(*x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::AddRow(x, b) => {
                if self.needs_grad(*x) {
                    let dx = gb.slot(*x, g.len());
                    dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if self.needs_grad(*b) {
                    let c = self.nodes[b.0].value.len();
                    let db = gb.slot(*b, c);
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::MatMul(a, b, geo) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (m, k, n) = (geo.m, geo.k, geo.n);
                if self.needs_grad(*a) {
                    let da = gb.slot(*a, av.len());
                    for bi in 0..geo.batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let boff = if geo.b_shared { 0 } else { bi * k * n };
                        let bs = &bv[boff..boff + k * n];
                        let das = &mut da[bi * m * k..(bi + 1) * m * k];
                        if geo.trans_b {
                            gemm_nn(gs, bs, das, m, n, k);
                        } else {
                            gemm_nt(gs, bs, das, m, n, k);
                        }
                    }
                }
                if self.needs_grad(*b) {
                    let db = gb.slot(*b, bv.len());
                    for bi in 0..geo.batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &av[bi * m * k..(bi + 1) * m * k];
                        let boff = if geo.b_shared { 0 } else { bi * k * n };
                        let dbs = &mut db[boff..boff + k * n];
                        if geo.trans_b {
                            gemm_tn(gs, as_, dbs, m, n, k);
                        } else {
                            gemm_tn(as_, gs, dbs, m, k, n);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let dx = gb.slot(*x, y.len());
                for o in 0..*outer {
                    for q in 0..*inner {
                        let base = o * n * inner + q;
                        let mut dot = 0.0;
                        for j in 0..*n {
                            let idx = base + j * inner;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..*n {
                            let idx = base + j * inner;
                            dx[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, n } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let dx = gb.slot(*x, y.len());
                for (r, (yr, gr)) in y.chunks(*n).zip(g.chunks(*n)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let dxr = &mut dx[r * n..(r + 1) * n];
                    for j in 0..*n {
                        dxr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = &self.nodes[gamma.0].value;
                let c = gv.len();
                if self.needs_grad(*gamma) {
                    let dg = gb.slot(*gamma, c);
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.needs_grad(*beta) {
                    let db = gb.slot(*beta, c);
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, gi)| *d += gi);
                    }
                }
                if self.needs_grad(*x) {
                    let dx = gb.slot(*x, g.len());
                    let cf = c as f64;
                    for (r, (gr, xr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        let dxr = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            dxr[j] += rstd[r] * (dxh - m1 - xr[j] * m2);
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = &self.nodes[gamma.0].value;
                let c = gv.len();
                let rows = g.len() / c;
                let rf = rows as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * xr[j];
                    }
                }
                if self.needs_grad(*gamma) {
                    let dg = gb.slot(*gamma, c);
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if self.needs_grad(*beta) {
                    let db = gb.slot(*beta, c);
                    db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                if self.needs_grad(*x) {
                    let dx = gb.slot(*x, g.len());
                    for r in 0..rows {
                        for j in 0..c {
                            let idx = r * c + j;
                            dx[idx] += gv[j] * rstd[j] / rf
                                * (rf * g[idx] - sum_g[j] - xhat[idx] * sum_gx[j]);
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = &self.nodes[gamma.0].value;
                let c = gv.len();
                if self.needs_grad(*gamma) {
                    let dg = gb.slot(*gamma, c);
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.needs_grad(*beta) {
                    let db = gb.slot(*beta, c);
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, gi)| *d += gi);
                    }
                }
                if self.needs_grad(*x) {
                    let dx = gb.slot(*x, g.len());
                    for (r, gr) in g.chunks(c).enumerate() {
                        for j in 0..c {
                            dx[r * c + j] += gr[j] * gv[j] * rstd[j];
                        }
                    }
                }
            }
            Op::L2Normalize {
                x,
                outer,
                n,
                inner,
                norms,
                eps,
            } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let dx = gb.slot(*x, y.len());
                for o in 0..*outer {
                    for q in 0..*inner {
                        let base = o * n * inner + q;
                        let norm = norms[o * inner + q];
                        if norm > *eps {
                            let mut dot = 0.0;
                            for j in 0..*n {
                                let idx = base + j * inner;
                                dot += y[idx] * g[idx];
                            }
                            for j in 0..*n {
                                let idx = base + j * inner;
                                dx[idx] += (g[idx] - y[idx] * dot) / norm;
                            }
                        } else {
                            for j in 0..*n {
                                let idx = base + j * inner;
                                dx[idx] += g[idx] / eps;
                            }
                        }
                    }
                }
            }
            Op::Conv2d(x, w, geo) => {
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                if self.needs_grad(*x) {
                    let dx = gb.slot(*x, xv.len());
                    conv2d_backward_input(g, wv, dx, geo);
                }
                if self.needs_grad(*w) {
                    let dw = gb.slot(*w, wv.len());
                    conv2d_backward_weight(g, xv, dw, geo);
                }
            }
            Op::Bilinear(x, geo) => {
                if !self.needs_grad(*x) {
                    return;
                }
                let n = self.nodes[x.0].value.len();
                let dx = gb.slot(*x, n);
                let taps_y = bilinear_taps(geo.h, geo.oh);
                let taps_x = bilinear_taps(geo.w, geo.ow);
                let c = geo.c;
                for b in 0..geo.batch {
                    for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                            let go = ((b * geo.oh + oy) * geo.ow + ox) * c;
                            let corners = [
                                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                                (y0, x1, (1.0 - wy) * wx),
                                (y1, x0, wy * (1.0 - wx)),
                                (y1, x1, wy * wx),
                            ];
                            for (yy, xx, wgt) in corners {
                                let gi = ((b * geo.h + yy) * geo.w + xx) * c;
                                for ch in 0..c {
                                    dx[gi + ch] += wgt * g[go + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax } => {
                if self.needs_grad(*x) {
                    let n = self.nodes[x.0].value.len();
                    let dx = gb.slot(*x, n);
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = g.len() / (outer * inner);
                let mut offset = 0;
                for p in parts {
                    let pn = self.nodes[p.0].value.len() / (outer * inner);
                    if self.needs_grad(*p) {
                        let dp = gb.slot(*p, pn * outer * inner);
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + pn) * inner];
                            let dst = &mut dp[o * pn * inner..(o + 1) * pn * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += pn;
                }
            }
            Op::Slice {
                x,
                outer,
                n_in,
                start,
                len,
                inner,
            } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let dx = gb.slot(*x, outer * n_in * inner);
                for o in 0..*outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut dx[(o * n_in + start) * inner..(o * n_in + start + len) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::Expand { x, outer, n, inner } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let dx = gb.slot(*x, outer * inner);
                for o in 0..*outer {
                    for j in 0..*n {
                        let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let dst = &mut dx[o * inner..(o + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Gather { table, ids, d } => {
                if !self.needs_grad(*table) {
                    return;
                }
                let n = self.nodes[table.0].value.len();
                let dt = gb.slot(*table, n);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::SplitHeads { x, b, n, h, d } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let dx = gb.slot(*x, g.len());
                for bi in 0..*b {
                    for hi in 0..*h {
                        for t in 0..*n {
                            let src = ((bi * h + hi) * n + t) * d;
                            let dst = (bi * n + t) * h * d + hi * d;
                            for j in 0..*d {
                                dx[dst + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, b, n, h, d } => {
                if !self.needs_grad(*x) {
                    return;
                }
                let dx = gb.slot(*x, g.len());
                for bi in 0..*b {
                    for hi in 0..*h {
                        for t in 0..*n {
                            let dst = ((bi * h + hi) * n + t) * d;
                            let src = (bi * n + t) * h * d + hi * d;
                            for j in 0..*d {
                                dx[dst + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.needs_grad(*x) {
                    let n = self.nodes[x.0].value.len();
                    let dx = gb.slot(*x, n);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanAll(x) => {
                if self.needs_grad(*x) {
                    let n = self.nodes[x.0].value.len();
                    let s = g[0] / n as f64;
                    let dx = gb.slot(*x, n);
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::BceLogitsMean { z, labels } => {
                if self.needs_grad(*z) {
                    let zv = &self.nodes[z.0].value;
                    let n = zv.len() as f64;
                    let dz = gb.slot(*z, zv.len());
                    for j in 0..zv.len() {
                        dz[j] += g[0] * (sigmoid(zv[j]) - labels[j]) / n;
                    }
                }
            }
        }
    }
}

/// Gradients produced by one backward sweep, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    pub fn wrt_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.wrt(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(v).len()],
        }
    }
}

struct GradBuf {
    bufs: Vec<Option<Vec<f64>>>,
}

impl GradBuf {
    fn slot(&mut self, v: Var, len: usize) -> &mut [f64] {
        self.bufs[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[m,n] += a[r,m]^T * b[r,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], r: usize, m: usize, n: usize) {
    for q in 0..r {
        let brow = &b[q * n..(q + 1) * n];
        for i in 0..m {
            let av = a[q * m + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], out: &mut [f64], geo: &ConvGeom) {
    let cin_g = geo.cin / geo.groups;
    let cout_g = geo.cout / geo.groups;
    for b in 0..geo.batch {
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let obase = ((b * geo.oh + oy) * geo.ow + ox) * geo.cout;
                for ky in 0..geo.k {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    for kx in 0..geo.k {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix < 0 || ix >= geo.w as isize {
                            continue;
                        }
                        let ibase = ((b * geo.h + iy as usize) * geo.w + ix as usize) * geo.cin;
                        let wbase = (ky * geo.k + kx) * cin_g * geo.cout;
                        for gi in 0..geo.groups {
                            for ci in 0..cin_g {
                                let xv = x[ibase + gi * cin_g + ci];
                                let wrow = &w[wbase + ci * geo.cout + gi * cout_g..][..cout_g];
                                let orow = &mut out[obase + gi * cout_g..][..cout_g];
                                for (o, wv) in orow.iter_mut().zip(wrow) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_input(g: &[f64], w: &[f64], dx: &mut [f64], geo: &ConvGeom) {
    let cin_g = geo.cin / geo.groups;
    let cout_g = geo.cout / geo.groups;
    for b in 0..geo.batch {
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let obase = ((b * geo.oh + oy) * geo.ow + ox) * geo.cout;
                for ky in 0..geo.k {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    for kx in 0..geo.k {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix < 0 || ix >= geo.w as isize {
                            continue;
                        }
                        let ibase = ((b * geo.h + iy as usize) * geo.w + ix as usize) * geo.cin;
                        let wbase = (ky * geo.k + kx) * cin_g * geo.cout;
                        for gi in 0..geo.groups {
                            let grow = &g[obase + gi * cout_g..][..cout_g];
                            for ci in 0..cin_g {
                                let wrow = &w[wbase + ci * geo.cout + gi * cout_g..][..cout_g];
                                let s: f64 = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                                dx[ibase + gi * cin_g + ci] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_weight(g: &[f64], x: &[f64], dw: &mut [f64], geo: &ConvGeom) {
    let cin_g = geo.cin / geo.groups;
    let cout_g = geo.cout / geo.groups;
    for b in 0..geo.batch {
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let obase = ((b * geo.oh + oy) * geo.ow + ox) * geo.cout;
                for ky in 0..geo.k {
                    let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    for kx in 0..geo.k {
                        let ix = (ox * geo.stride + kx) as isize - geo.pad as isize;
                        if ix < 0 || ix >= geo.w as isize {
                            continue;
                        }
                        let ibase = ((b * geo.h + iy as usize) * geo.w + ix as usize) * geo.cin;
                        let wbase = (ky * geo.k + kx) * cin_g * geo.cout;
                        for gi in 0..geo.groups {
                            let grow = &g[obase + gi * cout_g..][..cout_g];
                            for ci in 0..cin_g {
                                let xv = x[ibase + gi * cin_g + ci];
                                let dwrow = &mut dw[wbase + ci * geo.cout + gi * cout_g..][..cout_g];
                                for (d, gv) in dwrow.iter_mut().zip(grow) {
                                    *d += xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Half-pixel-center sampling taps for one axis: (lo, hi, weight of hi).
pub(crate) fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}
