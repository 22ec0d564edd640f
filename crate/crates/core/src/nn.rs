//! Layers built on the tape: each layer owns `ParamId`s and binds them
//! through a forward [`Ctx`].

use std::sync::Once;

use crate::error::{Error, Result};
use crate::tensor::{Init, ParamGroup, ParamId, ParamStore, Tape, Var};

/// Forward-pass context: the tape, read-only parameters, the train flag and
/// any batch-norm running-statistic updates produced along the way.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a ParamStore,
    pub train: bool,
    bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamStore, train: bool) -> Self {
        Self {
            tape,
            params,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.params.bind(self.tape, id)
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Applies `r = (1 - m) r + m s` to each running statistic, in order.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (id, stat) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
            let t = store.get_mut(id);
            for (r, s) in t.data_mut().iter_mut().zip(stat) {
                *r = (1.0 - u.momentum) * *r + u.momentum * s;
            }
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a mut ParamStore, prefix: &str, group: ParamGroup) -> Self {
        Self {
            store,
            prefix: prefix.to_string(),
            group,
        }
    }

    pub fn sub(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: self.path(name),
            store: self.store,
            group: self.group,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add(&path, shape, init, self.group)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add_buffer(&path, shape, init, self.group)
    }
}

/// `y = x W + b` with `W: [d_in, d_out]`, applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(s: &mut Scope, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut s = s.sub(name);
        let w = s.param("w", &[d_in, d_out], Init::FanIn { fan_in: d_in, gain: 1.0 })?;
        let b = if bias { Some(s.param("b", &[d_out], Init::Zeros)?) } else { None };
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Convolution over channels-last maps; weight `[k, k, c_in / groups, c_out]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride,
            pad,
            groups: 1,
            bias: true,
        }
    }

    pub fn depthwise(c: usize, kernel: usize, stride: usize) -> Self {
        Self {
            groups: c,
            ..Self::new(c, c, kernel, stride, kernel / 2)
        }
    }
}

impl Conv2d {
    pub fn new(s: &mut Scope, name: &str, spec: ConvSpec) -> Result<Self> {
        if spec.groups == 0 || spec.c_in % spec.groups != 0 || spec.c_out % spec.groups != 0 {
            return Err(Error::Config(format!(
                "conv `{name}`: {} -> {} channels not divisible into {} groups",
                spec.c_in, spec.c_out, spec.groups
            )));
        }
        if spec.stride == 0 || spec.kernel == 0 {
            return Err(Error::Config(format!("conv `{name}`: kernel and stride must be positive")));
        }
        let cin_g = spec.c_in / spec.groups;
        let mut s = s.sub(name);
        let fan_in = spec.kernel * spec.kernel * cin_g;
        let w = s.param(
            "w",
            &[spec.kernel, spec.kernel, cin_g, spec.c_out],
            Init::FanIn { fan_in, gain: 1.0 },
        )?;
        let b = if spec.bias { Some(s.param("b", &[spec.c_out], Init::Zeros)?) } else { None };
        Ok(Self {
            w,
            b,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.pad,
            groups: spec.groups,
            c_in: spec.c_in,
            c_out: spec.c_out,
        })
    }

    /// `x: [B, H, W, C_in]`
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.w);
        let y = ctx.tape.conv2d(x, w, self.stride, self.pad, self.groups)?;
        match self.b {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn out_size(&self, n: usize) -> Option<usize> {
        (n + 2 * self.pad).checked_sub(self.kernel).map(|v| v / self.stride + 1)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(s: &mut Scope, name: &str, dim: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            gamma: s.param("gamma", &[dim], Init::Ones)?,
            beta: s.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.tape.layer_norm(x, g, b, self.eps)
    }
}

static SINGLE_INSTANCE_BN: Once = Once::new();

/// Batch normalization over every leading axis of a channels-last tensor.
///
/// In training mode the batch statistics are used and a running-statistics
/// update is queued on the context. A batch of one falls back to the
/// statistics of that single instance (over its spatial positions).
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(s: &mut Scope, name: &str, channels: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            gamma: s.param("gamma", &[channels], Init::Ones)?,
            beta: s.param("beta", &[channels], Init::Zeros)?,
            running_mean: s.buffer("running_mean", &[channels], Init::Zeros)?,
            running_var: s.buffer("running_var", &[channels], Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        if ctx.train {
            if ctx.tape.shape(x)[0] == 1 {
                SINGLE_INSTANCE_BN.call_once(|| {
                    log::warn!("batch norm trained with batch size 1; using per-instance statistics")
                });
            }
            let (y, mean, var) = ctx.tape.batch_norm_train(x, g, b, self.eps)?;
            ctx.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                momentum: self.momentum,
                mean,
                var,
            });
            Ok(y)
        } else {
            let rm = ctx.params.get(self.running_mean).data().to_vec();
            let rv = ctx.params.get(self.running_var).data().to_vec();
            ctx.tape.batch_norm_eval(x, g, b, &rm, &rv, self.eps)
        }
    }
}

/// Two-layer GELU perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(s: &mut Scope, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(Self {
            fc1: Linear::new(&mut s, "fc1", dim, dim * ratio, true)?,
            fc2: Linear::new(&mut s, "fc2", dim * ratio, dim, true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.gelu(h);
        self.fc2.forward(ctx, h)
    }
}

/// Scaled dot-product attention with `heads` heads.
///
/// `q: [B, Nq, C]`, `k, v: [B, Nk, C]`. `key_mask` (length `B * Nk`, true =
/// attend) zeroes the weight of masked keys exactly. Returns the merged
/// output `[B, Nq, C]` and the weights `[B, heads, Nq, Nk]`.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (b, nq, c) = dims3(tape, q, "attention")?;
    let nk = tape.shape(k)[1];
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let scores = tape.matmul_t(qh, kh)?;
    let scores = tape.scale(scores, 1.0 / ((c / heads) as f64).sqrt());
    let weights = match key_mask {
        None => tape.softmax(scores, 3)?,
        Some(m) => {
            if m.len() != b * nk {
                return Err(Error::shape("attention", format!("mask of {} for {b}x{nk} keys", m.len())));
            }
            let mut full = Vec::with_capacity(b * heads * nq * nk);
            for bi in 0..b {
                let row = &m[bi * nk..(bi + 1) * nk];
                for _ in 0..heads * nq {
                    full.extend_from_slice(row);
                }
            }
            tape.masked_softmax(scores, &full)?
        }
    };
    let out = tape.matmul(weights, vh)?;
    let out = tape.merge_heads(out)?;
    Ok((out, weights))
}

pub(crate) fn dims3(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::shape(op, format!("expected rank 3, got {s:?}"))),
    }
}

pub(crate) fn dims4(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(x) {
        [a, b, c, d] => Ok((a, b, c, d)),
        ref s => Err(Error::shape(op, format!("expected rank 4, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn attention_two_token_closed_form() {
        let mut tape = Tape::new();
        let q = tape.leaf(&Tensor::new(&[1, 1, 1], vec![2.0]).unwrap());
        let k = tape.leaf(&Tensor::new(&[1, 2, 1], vec![0.5, -1.0]).unwrap());
        let v = tape.leaf(&Tensor::new(&[1, 2, 1], vec![3.0, 7.0]).unwrap());
        let (out, w) = attention(&mut tape, q, k, v, 1, None).unwrap();
        let (a, b) = (1.0f64.exp(), (-2.0f64).exp());
        let want = [a / (a + b), b / (a + b)];
        assert!((tape.value(w)[0] - want[0]).abs() < 1e-15);
        assert!((tape.value(w)[1] - want[1]).abs() < 1e-15);
        assert!((tape.item(out) - (3.0 * want[0] + 7.0 * want[1])).abs() < 1e-14);
    }

    #[test]
    fn bn_updates_follow_momentum() {
        let mut store = ParamStore::new(0);
        let bn = BatchNorm::new(&mut Scope::root(&mut store, "", ParamGroup::Head), "bn", 1).unwrap();
        let mut tape = Tape::new();
        let updates = {
            let mut ctx = Ctx::new(&mut tape, &store, true);
            let x = ctx.tape.leaf(&Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
            bn.forward(&mut ctx, x).unwrap();
            ctx.take_bn_updates()
        };
        apply_bn_updates(&mut store, &updates);
        assert!((store.get(bn.running_mean).item() - 0.2).abs() < 1e-15);
        assert!((store.get(bn.running_var).item() - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }
}
