//! Forward constructors for every differentiable op on the tape.

use super::tape::{
    bilinear_taps, conv2d_forward, gelu, gemm_nn, gemm_nt, sigmoid, Binary, ConvGeom, MatGeom, Op,
    ResizeGeom, Tape, Unary, Var,
};
use super::{numel, split_axis};
use crate::error::{Error, Result};

impl Tape {
    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let xv = self.value(x);
        let value: Vec<f64> = match kind {
            Unary::Relu => xv.iter().map(|&v| v.max(0.0)).collect(),
            Unary::Gelu => xv.iter().map(|&v| gelu(v)).collect(),
            Unary::Sigmoid => xv.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Tanh => xv.iter().map(|&v| v.tanh()).collect(),
            Unary::Exp => xv.iter().map(|&v| v.exp()).collect(),
            Unary::Ln => xv.iter().map(|&v| v.ln()).collect(),
            Unary::Abs => xv.iter().map(|&v| v.abs()).collect(),
            Unary::Neg => xv.iter().map(|&v| -v).collect(),
        };
        let shape = self.shape(x).to_vec();
        let ng = self.needs_grad(x);
        self.push(shape, value, Op::Unary(x, kind), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    /// tanh approximation of GELU
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let value: Vec<f64> = av
            .iter()
            .zip(bv)
            .map(|(&x, &y)| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Min => x.min(y),
                Binary::Max => x.max(y),
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, value, Op::Binary(a, b, kind), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min, "minimum")
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Max, "maximum")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs_grad(x);
        self.push(shape, value, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs_grad(x);
        self.push(shape, value, Op::AddScalar(x), ng)
    }

    /// `x[..., C] + b[C]`, broadcasting `b` over all leading axes.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.value(b).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("bias of {} values for last axis {c}", self.value(b).len()),
            ));
        }
        let bv = self.value(b);
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(c) {
            row.iter_mut().zip(bv).for_each(|(a, b)| *a += b);
        }
        let shape = self.shape(x).to_vec();
        let ng = self.needs_grad(x) || self.needs_grad(b);
        Ok(self.push(shape, value, Op::AddRow(x, b), ng))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let b_shared = sb.len() == 2;
        let mut batch: usize = sa[..sa.len() - 2].iter().product();
        if !b_shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("batch dims {sa:?} vs {sb:?}")));
        }
        if b_shared {
            // fold every leading axis of `a` into its row count
            batch = 1;
        }
        let m = if b_shared { numel(&sa) / k } else { m };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {k} vs {kb} ({sa:?} x {sb:?}, trans_b={trans_b})"),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let as_ = &av[bi * m * k..(bi + 1) * m * k];
            let boff = if b_shared { 0 } else { bi * k * n };
            let bs = &bv[boff..boff + k * n];
            let os = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(as_, bs, os, m, k, n);
            } else {
                gemm_nn(as_, bs, os, m, k, n);
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let geo = MatGeom {
            batch,
            m,
            k,
            n,
            trans_b,
            b_shared,
        };
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(shape, out, Op::MatMul(a, b, geo), ng))
    }

    /// `a[..., M, K] @ b[..., K, N]`; a rank-2 `b` is shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., M, K] @ b[..., N, K]^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for q in 0..inner {
                let base = o * n * inner + q;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(xv[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..n {
                    let e = (xv[base + j * inner] - mx).exp();
                    y[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    y[base + j * inner] /= s;
                }
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(shape, y, Op::Softmax { x, outer, n, inner }, ng))
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Masked entries come out as exactly zero; a fully masked row is all zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} for {} values", mask.len(), xv.len()),
            ));
        }
        let n = *shape.last().unwrap();
        let mut y = vec![0.0; xv.len()];
        for ((xr, mr), yr) in xv.chunks(n).zip(mask.chunks(n)).zip(y.chunks_mut(n)) {
            let mx = xr
                .iter()
                .zip(mr)
                .filter(|(_, m)| **m)
                .fold(f64::NEG_INFINITY, |a, (&v, _)| a.max(v));
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut s = 0.0;
            for j in 0..n {
                if mr[j] {
                    yr[j] = (xr[j] - mx).exp();
                    s += yr[j];
                }
            }
            yr.iter_mut().for_each(|v| *v /= s);
        }
        let ng = self.needs_grad(x);
        Ok(self.push(shape, y, Op::MaskedSoftmax { x, n }, ng))
    }

    /// Per-row normalization over the last axis followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", format!("affine params for {c} channels")));
        }
        let xv = self.value(x);
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * rs;
            }
        }
        let y = affine(&xhat, self.value(gamma), self.value(beta));
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        Ok(self.push(
            shape,
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Batch normalization with statistics over every leading axis (all rows)
    /// per channel. Returns the output plus the batch mean and unbiased
    /// variance used for running-statistics updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("batch_norm", format!("affine params for {c} channels")));
        }
        let xv = self.value(x);
        let rows = xv.len() / c;
        let mut mean = vec![0.0; c];
        for row in xv.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; c];
        for row in xv.chunks(c) {
            for j in 0..c {
                var[j] += (row[j] - mean[j]) * (row[j] - mean[j]);
            }
        }
        let unbiased: Vec<f64> = var
            .iter()
            .map(|v| if rows > 1 { v / (rows - 1) as f64 } else { 0.0 })
            .collect();
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        for (r, row) in xv.chunks(c).enumerate() {
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean[j]) * rstd[j];
            }
        }
        let y = affine(&xhat, self.value(gamma), self.value(beta));
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let v = self.push(
            shape,
            y,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        );
        Ok((v, mean, unbiased))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.value(gamma).len() != c
            || self.value(beta).len() != c
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(Error::shape("batch_norm", format!("statistics for {c} channels")));
        }
        let rstd: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let mut xhat = vec![0.0; xv.len()];
        for (r, row) in xv.chunks(c).enumerate() {
            for j in 0..c {
                xhat[r * c + j] = (row[j] - running_mean[j]) * rstd[j];
            }
        }
        let y = affine(&xhat, self.value(gamma), self.value(beta));
        let ng = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        Ok(self.push(
            shape,
            y,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("l2_normalize", format!("axis {axis} for {shape:?}")));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("l2_normalize eps must be > 0, got {eps}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut y = vec![0.0; xv.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for q in 0..inner {
                let base = o * n * inner + q;
                let mut s = 0.0;
                for j in 0..n {
                    s += xv[base + j * inner] * xv[base + j * inner];
                }
                let norm = s.sqrt();
                norms[o * inner + q] = norm;
                let d = norm.max(eps);
                for j in 0..n {
                    y[base + j * inner] = xv[base + j * inner] / d;
                }
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(
            shape,
            y,
            Op::L2Normalize {
                x,
                outer,
                n,
                inner,
                norms,
                eps,
            },
            ng,
        ))
    }

    /// 2-D convolution over a channels-last `[B, H, W, Cin]` input with a
    /// `[k, k, Cin / groups, Cout]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?} and kernel {sw:?} must both be rank 4"),
            ));
        }
        let (batch, h, wd, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, k2, cin_g, cout) = (sw[0], sw[1], sw[2], sw[3]);
        if stride == 0 || groups == 0 {
            return Err(Error::Config("conv2d stride and groups must be positive".into()));
        }
        if k != k2 {
            return Err(Error::shape("conv2d", format!("non-square kernel {sw:?}")));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels in={cin} out={cout} not divisible by groups={groups}"),
            ));
        }
        if cin / groups != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {cin_g} input channels per group, input has {cin} / {groups}"),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} larger than padded input {h}x{wd} (pad {pad})"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeom {
            batch,
            h,
            w: wd,
            cin,
            oh,
            ow,
            cout,
            k,
            stride,
            pad,
            groups,
        };
        let mut out = vec![0.0; batch * oh * ow * cout];
        conv2d_forward(self.value(x), self.value(w), &mut out, &geo);
        let ng = self.needs_grad(x) || self.needs_grad(w);
        Ok(self.push(vec![batch, oh, ow, cout], out, Op::Conv2d(x, w, geo), ng))
    }

    /// Bilinear resize of `[B, H, W, C]` with half-pixel centers and edge clamping.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("bilinear_resize", format!("input {sx:?} must be rank 4")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("bilinear_resize output size must be >= 1".into()));
        }
        let geo = ResizeGeom {
            batch: sx[0],
            h: sx[1],
            w: sx[2],
            c: sx[3],
            oh: out_h,
            ow: out_w,
        };
        let taps_y = bilinear_taps(geo.h, out_h);
        let taps_x = bilinear_taps(geo.w, out_w);
        let xv = self.value(x);
        let c = geo.c;
        let mut out = vec![0.0; geo.batch * out_h * out_w * c];
        for b in 0..geo.batch {
            for (oy, &(y0, y1, wy)) in taps_y.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in taps_x.iter().enumerate() {
                    let o = ((b * out_h + oy) * out_w + ox) * c;
                    let p = |yy: usize, xx: usize| ((b * geo.h + yy) * geo.w + xx) * c;
                    let (p00, p01, p10, p11) = (p(y0, x0), p(y0, x1), p(y1, x0), p(y1, x1));
                    for ch in 0..c {
                        out[o + ch] = (1.0 - wy) * ((1.0 - wx) * xv[p00 + ch] + wx * xv[p01 + ch])
                            + wy * ((1.0 - wx) * xv[p10 + ch] + wx * xv[p11 + ch]);
                    }
                }
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(vec![geo.batch, out_h, out_w, c], out, Op::Bilinear(x, geo), ng))
    }

    /// Max over `axis`, keeping it as an extent-1 axis. Ties resolve to the
    /// first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("max_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for q in 0..inner {
                let base = o * n * inner + q;
                let mut best = base;
                for j in 1..n {
                    if xv[base + j * inner] > xv[best] {
                        best = base + j * inner;
                    }
                }
                out[o * inner + q] = xv[best];
                argmax[o * inner + q] = best;
            }
        }
        shape[axis] = 1;
        let ng = self.needs_grad(x);
        Ok(self.push(shape, out, Op::MaxAxis { x, argmax }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p)[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n_in, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * n_in + start) * inner..(o * n_in + start + len) * inner]);
        }
        shape[axis] = len;
        let ng = self.needs_grad(x);
        Ok(self.push(
            shape,
            out,
            Op::Slice {
                x,
                outer,
                n_in,
                start,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Repeats an extent-1 `axis` `n` times.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] != 1 || n == 0 {
            return Err(Error::shape("expand", format!("axis {axis} of {shape:?} to {n}")));
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        shape[axis] = n;
        let ng = self.needs_grad(x);
        Ok(self.push(shape, out, Op::Expand { x, outer, n, inner }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let ng = self.needs_grad(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), ng))
    }

    /// Row lookup `table[ids]` -> `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape("gather_rows", format!("table {st:?} must be rank 2")));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("id {bad} >= {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.needs_grad(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                d,
            },
            ng,
        ))
    }

    /// `[B, N, H*d]` -> `[B, H, N, d]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape("split_heads", format!("{s:?} into {heads} heads")));
        }
        let (b, n, d) = (s[0], s[1], s[2] / heads);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for hi in 0..heads {
                for t in 0..n {
                    let dst = ((bi * heads + hi) * n + t) * d;
                    let src = (bi * n + t) * heads * d + hi * d;
                    out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(
            vec![b, heads, n, d],
            out,
            Op::SplitHeads { x, b, n, h: heads, d },
            ng,
        ))
    }

    /// `[B, H, N, d]` -> `[B, N, H*d]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("merge_heads", format!("{s:?} must be rank 4")));
        }
        let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for hi in 0..h {
                for t in 0..n {
                    let src = ((bi * h + hi) * n + t) * d;
                    let dst = (bi * n + t) * h * d + hi * d;
                    out[dst..dst + d].copy_from_slice(&xv[src..src + d]);
                }
            }
        }
        let ng = self.needs_grad(x);
        Ok(self.push(vec![b, n, h * d], out, Op::MergeHeads { x, b, n, h, d }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.needs_grad(x);
        self.push(vec![1], vec![s], Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs_grad(x);
        self.push(vec![1], vec![s], Op::MeanAll(x), ng)
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against `labels`, computed in
    /// the overflow-free logits form.
    pub fn bce_with_logits_mean(&mut self, z: Var, labels: &[f64]) -> Result<Var> {
        let zv = self.value(z);
        if labels.len() != zv.len() {
            return Err(Error::shape(
                "bce_with_logits_mean",
                format!("{} labels for {} logits", labels.len(), zv.len()),
            ));
        }
        let total: f64 = zv
            .iter()
            .zip(labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = total / zv.len() as f64;
        let ng = self.needs_grad(z);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceLogitsMean {
                z,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }
}

fn affine(xhat: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let c = gamma.len();
    let mut y = vec![0.0; xhat.len()];
    for (r, row) in xhat.chunks(c).enumerate() {
        for j in 0..c {
            y[r * c + j] = row[j] * gamma[j] + beta[j];
        }
    }
    y
}
