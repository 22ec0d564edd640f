//! Three-stage synchronous vision-language backbone.
//!
//! Each stage embeds the template and search maps with a shared strided
//! convolution (CTE), refines them with target-enhance attention blocks (TEM),
//! advances the text encoder by one stage and fuses text into the search
//! branch with a semantic-aware module (SAM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attention, dims4, BatchNorm, ConvSpec, Conv2d, Ctx, LayerNorm, Linear, Mlp, Scope};
use crate::tensor::{ParamGroup, ParamStore, Var};
use crate::text::{batch_mask, TextEncoder, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Template attends to itself; search attends to template and search.
    Asymmetric,
    /// Both branches attend to template and search.
    Symmetric,
    /// Each branch attends to itself only.
    SelfOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    Synchronous,
    /// All text stages run first; every SAM sees the adapted final text.
    Asynchronous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub cte_kernel: usize,
    pub cte_stride: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    pub kv_stride: usize,
    pub text_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    pub template_size: usize,
    pub search_size: usize,
    pub max_text_len: usize,
    pub attention: AttentionMode,
    pub sam_enabled: bool,
    pub sam_start_stage: usize,
    pub text_mode: TextMode,
    pub text_update_enabled: bool,
    #[serde(default)]
    pub cvt_prenorm: bool,
}

/// Spatial and channel layout of one stage's outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub search: usize,
    pub template: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub text_layers: usize,
}

impl BackboneConfig {
    /// Desk-scale default: search 64, template 32, dims 8/16/32.
    pub fn desk() -> Self {
        let stage = |k, s, dim, heads, text_layers| StageConfig {
            cte_kernel: k,
            cte_stride: s,
            dim,
            heads,
            mlp_ratio: 4,
            depth: 1,
            kv_stride: 2,
            text_layers,
        };
        Self {
            stages: vec![stage(7, 4, 8, 1, 1), stage(3, 2, 16, 2, 1), stage(3, 2, 32, 4, 2)],
            template_size: 32,
            search_size: 64,
            max_text_len: 12,
            attention: AttentionMode::Asymmetric,
            sam_enabled: true,
            sam_start_stage: 1,
            text_mode: TextMode::Synchronous,
            text_update_enabled: true,
            cvt_prenorm: false,
        }
    }

    /// Full-scale schedule: search 320, template 128, dims 64/192/384.
    pub fn full() -> Self {
        let stage = |k, s, dim, heads, depth, text_layers| StageConfig {
            cte_kernel: k,
            cte_stride: s,
            dim,
            heads,
            mlp_ratio: 4,
            depth,
            kv_stride: 2,
            text_layers,
        };
        Self {
            stages: vec![
                stage(7, 4, 64, 1, 1, 1),
                stage(3, 2, 192, 3, 4, 4),
                stage(3, 2, 384, 6, 16, 7),
            ],
            template_size: 128,
            search_size: 320,
            max_text_len: 30,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 3 {
            return Err(Error::Config(format!("expected 3 stages, got {}", self.stages.len())));
        }
        for (i, s) in self.stages.iter().enumerate() {
            let n = i + 1;
            if s.heads == 0 || s.dim % s.heads != 0 {
                return Err(Error::Config(format!("stage {n}: dim {} not divisible by {} heads", s.dim, s.heads)));
            }
            if s.cte_stride == 0 || s.kv_stride == 0 || s.cte_kernel == 0 || s.mlp_ratio == 0 {
                return Err(Error::Config(format!("stage {n}: kernel, strides and mlp ratio must be positive")));
            }
        }
        let total: usize = self.stages.iter().map(|s| s.cte_stride).product();
        for (name, size) in [("search", self.search_size), ("template", self.template_size)] {
            if size == 0 || size % total != 0 {
                return Err(Error::Config(format!(
                    "{name} size {size} not divisible by cumulative stride {total}"
                )));
            }
        }
        if !(1..=3).contains(&self.sam_start_stage) {
            return Err(Error::Config(format!("sam_start_stage {} outside 1..=3", self.sam_start_stage)));
        }
        if self.max_text_len < 3 {
            return Err(Error::Config(format!("max_text_len {} < 3", self.max_text_len)));
        }
        Ok(())
    }

    /// Output sizes per stage derived from the convolution arithmetic.
    pub fn plan(&self) -> Result<Vec<StagePlan>> {
        self.validate()?;
        let mut search = self.search_size;
        let mut template = self.template_size;
        let mut out = Vec::new();
        for s in &self.stages {
            let pad = s.cte_kernel / 2;
            let step = |n: usize| (n + 2 * pad - s.cte_kernel) / s.cte_stride + 1;
            search = step(search);
            template = step(template);
            out.push(StagePlan {
                search,
                template,
                dim: s.dim,
                heads: s.heads,
                depth: s.depth,
                text_layers: s.text_layers,
            });
        }
        Ok(out)
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.stages[0].dim, self.stages[1].dim, self.stages[2].dim]
    }

    pub fn sam_at(&self, stage: usize) -> bool {
        self.sam_enabled && stage >= self.sam_start_stage
    }
}

/// Target enhance module: convolutional Q/K/V projections and attention
/// routed by [`AttentionMode`], followed by the residual MLP.
#[derive(Clone, Debug)]
struct Tem {
    q_dw: Conv2d,
    k_dw: Conv2d,
    v_dw: Conv2d,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    pre_norm: Option<LayerNorm>,
    norm: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

struct Qkv {
    q: Var,
    k: Var,
    v: Var,
}

impl Tem {
    fn new(s: &mut Scope, name: &str, st: &StageConfig, prenorm: bool) -> Result<Self> {
        let mut s = s.sub(name);
        let c = st.dim;
        Ok(Self {
            q_dw: Conv2d::new(&mut s, "q_dw", ConvSpec::depthwise(c, 3, 1))?,
            k_dw: Conv2d::new(&mut s, "k_dw", ConvSpec::depthwise(c, 3, st.kv_stride))?,
            v_dw: Conv2d::new(&mut s, "v_dw", ConvSpec::depthwise(c, 3, st.kv_stride))?,
            q: Linear::new(&mut s, "q", c, c, true)?,
            k: Linear::new(&mut s, "k", c, c, true)?,
            v: Linear::new(&mut s, "v", c, c, true)?,
            proj: Linear::new(&mut s, "proj", c, c, true)?,
            pre_norm: if prenorm { Some(LayerNorm::new(&mut s, "pre_norm", c)?) } else { None },
            norm: LayerNorm::new(&mut s, "norm", c)?,
            mlp: Mlp::new(&mut s, "mlp", c, st.mlp_ratio)?,
            heads: st.heads,
        })
    }

    fn project(ctx: &mut Ctx, dw: &Conv2d, lin: &Linear, x: Var) -> Result<Var> {
        let m = dw.forward(ctx, x)?;
        let (b, h, w, c) = dims4(ctx.tape, m, "tem")?;
        let t = ctx.tape.reshape(m, &[b, h * w, c])?;
        lin.forward(ctx, t)
    }

    fn qkv(&self, ctx: &mut Ctx, x: Var) -> Result<Qkv> {
        let x = match &self.pre_norm {
            Some(ln) => ln.forward(ctx, x)?,
            None => x,
        };
        Ok(Qkv {
            q: Self::project(ctx, &self.q_dw, &self.q, x)?,
            k: Self::project(ctx, &self.k_dw, &self.k, x)?,
            v: Self::project(ctx, &self.v_dw, &self.v, x)?,
        })
    }

    fn finish(&self, ctx: &mut Ctx, x: Var, attn: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let a = self.proj.forward(ctx, attn)?;
        let a = ctx.tape.reshape(a, &shape)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.norm.forward(ctx, x)?;
        let h = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }

    /// Returns updated (template, search) maps and the search-branch
    /// attention weights.
    fn forward(&self, ctx: &mut Ctx, xt: Var, xs: Var, mode: AttentionMode) -> Result<(Var, Var, Var)> {
        let t = self.qkv(ctx, xt)?;
        let s = self.qkv(ctx, xs)?;
        let h = self.heads;
        let joint = |ctx: &mut Ctx| -> Result<(Var, Var)> {
            let k = ctx.tape.concat(&[t.k, s.k], 1)?;
            let v = ctx.tape.concat(&[t.v, s.v], 1)?;
            Ok((k, v))
        };
        let (at, as_, ws) = match mode {
            AttentionMode::Asymmetric => {
                let (at, _) = attention(ctx.tape, t.q, t.k, t.v, h, None)?;
                let (kc, vc) = joint(ctx)?;
                let (as_, ws) = attention(ctx.tape, s.q, kc, vc, h, None)?;
                (at, as_, ws)
            }
            AttentionMode::Symmetric => {
                let (kc, vc) = joint(ctx)?;
                let (at, _) = attention(ctx.tape, t.q, kc, vc, h, None)?;
                let (as_, ws) = attention(ctx.tape, s.q, kc, vc, h, None)?;
                (at, as_, ws)
            }
            AttentionMode::SelfOnly => {
                let (at, _) = attention(ctx.tape, t.q, t.k, t.v, h, None)?;
                let (as_, ws) = attention(ctx.tape, s.q, s.k, s.v, h, None)?;
                (at, as_, ws)
            }
        };
        let xt = self.finish(ctx, xt, at)?;
        let xs = self.finish(ctx, xs, as_)?;
        Ok((xt, xs, ws))
    }
}

/// Semantic aware module.
///
/// Visual stream: the max-pooled projected template queries the projected
/// text; the sigmoid of the attended vector gates the search channels, which
/// then pass through batch norm and a 3x3 convolution into a residual add.
/// Textual stream: the pooled template is added to every real token between
/// two linear maps, with a residual update of the text.
#[derive(Clone, Debug)]
struct Sam {
    vis_proj: Conv2d,
    txt_proj: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    bn: BatchNorm,
    conv: Conv2d,
    text_a: Linear,
    text_b: Linear,
    heads: usize,
}

struct SamOut {
    search: Var,
    text: Var,
    gate: Var,
}

impl Sam {
    fn new(s: &mut Scope, st: &StageConfig) -> Result<Self> {
        let mut s = s.sub("sam");
        let c = st.dim;
        Ok(Self {
            vis_proj: Conv2d::new(&mut s, "vis_proj", ConvSpec::new(c, c, 1, 1, 0))?,
            txt_proj: Linear::new(&mut s, "txt_proj", c, c, true)?,
            wq: Linear::new(&mut s, "wq", c, c, true)?,
            wk: Linear::new(&mut s, "wk", c, c, true)?,
            wv: Linear::new(&mut s, "wv", c, c, true)?,
            bn: BatchNorm::new(&mut s, "bn", c)?,
            conv: Conv2d::new(&mut s, "conv", ConvSpec::new(c, c, 3, 1, 1))?,
            text_a: Linear::new(&mut s, "text_a", c, c, true)?,
            text_b: Linear::new(&mut s, "text_b", c, c, true)?,
            heads: st.heads,
        })
    }

    fn forward(&self, ctx: &mut Ctx, xt: Var, xs: Var, text: Var, mask: &[bool], update: bool) -> Result<SamOut> {
        let (b, ht, wt, c) = dims4(ctx.tape, xt, "sam")?;
        let (_, hs, ws, _) = dims4(ctx.tape, xs, "sam")?;
        let len = ctx.tape.shape(text)[1];

        let tp = self.vis_proj.forward(ctx, xt)?;
        let tp = ctx.tape.reshape(tp, &[b, ht * wt, c])?;
        let pooled = ctx.tape.max_axis(tp, 1)?;
        let q = self.wq.forward(ctx, pooled)?;
        let tt = self.txt_proj.forward(ctx, text)?;
        let k = self.wk.forward(ctx, tt)?;
        let v = self.wv.forward(ctx, tt)?;
        let (a, _) = attention(ctx.tape, q, k, v, self.heads, Some(mask))?;
        let gate = ctx.tape.sigmoid(a);

        let g = ctx.tape.expand(gate, 1, hs * ws)?;
        let g = ctx.tape.reshape(g, &[b, hs, ws, c])?;
        let gated = ctx.tape.mul(xs, g)?;
        let y = self.bn.forward(ctx, gated)?;
        let y = self.conv.forward(ctx, y)?;
        let search = ctx.tape.add(xs, y)?;

        let text = if update {
            let ta = self.text_a.forward(ctx, text)?;
            let pe = ctx.tape.expand(pooled, 1, len)?;
            let m: Vec<f64> = mask
                .iter()
                .flat_map(|&r| std::iter::repeat_n(if r { 1.0 } else { 0.0 }, c))
                .collect();
            let m = ctx.tape.constant(&[b, len, c], m)?;
            let pe = ctx.tape.mul(pe, m)?;
            let fused = ctx.tape.add(ta, pe)?;
            let tb = self.text_b.forward(ctx, fused)?;
            ctx.tape.add(text, tb)?
        } else {
            text
        };
        Ok(SamOut { search, text, gate })
    }
}

#[derive(Clone, Debug)]
struct Stage {
    cte: Conv2d,
    cte_norm: LayerNorm,
    tems: Vec<Tem>,
    sam: Option<Sam>,
    async_adapter: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stages: Vec<Stage>,
    pub text: TextEncoder,
}

/// Forward outputs; every handle lives on the forward tape.
#[derive(Clone, Debug)]
pub struct BackboneOut {
    /// Final search map `[B, Hs, Ws, C3]`.
    pub search: Var,
    /// Final template map `[B, Ht, Wt, C3]`.
    pub template: Var,
    /// Final text features `[B, L, C3]`.
    pub text: Var,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    /// `(stage, layer, weights [B, heads, Ns, Nk])` for the search branch.
    pub search_attention: Vec<(usize, usize, Var)>,
    /// `(stage, gate [B, 1, C])` for each SAM.
    pub gates: Vec<(usize, Var)>,
    /// `(stage, template map, search map)` after each stage.
    pub stage_outputs: Vec<(usize, Var, Var)>,
}

pub const IN_CHANNELS: usize = 3;

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let mut root = Scope::root(store, "backbone", ParamGroup::Backbone);
        let dims = cfg.dims();
        let mut stages = Vec::with_capacity(3);
        let mut c_in = IN_CHANNELS;
        for (i, st) in cfg.stages.iter().enumerate() {
            let n = i + 1;
            let mut s = root.sub(&format!("stage{n}"));
            let cte = Conv2d::new(
                &mut s,
                "cte",
                ConvSpec::new(c_in, st.dim, st.cte_kernel, st.cte_stride, st.cte_kernel / 2),
            )?;
            let cte_norm = LayerNorm::new(&mut s, "cte_norm", st.dim)?;
            let tems = (0..st.depth)
                .map(|l| Tem::new(&mut s, &format!("tem{l}"), st, cfg.cvt_prenorm))
                .collect::<Result<Vec<_>>>()?;
            let sam = if cfg.sam_at(n) { Some(Sam::new(&mut s, st)?) } else { None };
            let async_adapter = if cfg.sam_at(n) && cfg.text_mode == TextMode::Asynchronous {
                Some(Linear::new(&mut s, "async_adapter", dims[2], st.dim, true)?)
            } else {
                None
            };
            stages.push(Stage {
                cte,
                cte_norm,
                tems,
                sam,
                async_adapter,
            });
            c_in = st.dim;
        }
        let heads = [cfg.stages[0].heads, cfg.stages[1].heads, cfg.stages[2].heads];
        let layers = [cfg.stages[0].text_layers, cfg.stages[1].text_layers, cfg.stages[2].text_layers];
        let text = TextEncoder::new(
            &mut root.sub("text"),
            vocab_size,
            cfg.max_text_len,
            layers,
            dims,
            heads,
            cfg.stages[0].mlp_ratio,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            stages,
            text,
        })
    }

    fn cte(&self, ctx: &mut Ctx, stage: &Stage, x: Var) -> Result<Var> {
        let y = stage.cte.forward(ctx, x)?;
        stage.cte_norm.forward(ctx, y)
    }

    /// `template: [B, T, T, 3]`, `search: [B, S, S, 3]`, one token sequence
    /// per batch element.
    pub fn forward(&self, ctx: &mut Ctx, template: Var, search: Var, text: &[TokenSequence]) -> Result<BackboneOut> {
        let (b, th, tw, tc) = dims4(ctx.tape, template, "backbone")?;
        let (bs, sh, sw, sc) = dims4(ctx.tape, search, "backbone")?;
        let cfg = &self.cfg;
        if b != bs || b != text.len() {
            return Err(Error::shape(
                "backbone",
                format!("batch sizes template {b}, search {bs}, text {}", text.len()),
            ));
        }
        if (th, tw, tc) != (cfg.template_size, cfg.template_size, IN_CHANNELS)
            || (sh, sw, sc) != (cfg.search_size, cfg.search_size, IN_CHANNELS)
        {
            return Err(Error::shape(
                "backbone",
                format!(
                    "inputs {th}x{tw}x{tc} / {sh}x{sw}x{sc}, config expects {t}x{t}x3 / {s}x{s}x3",
                    t = cfg.template_size,
                    s = cfg.search_size
                ),
            ));
        }
        let mask = batch_mask(text);
        let embedded = self.text.embed(ctx, text)?;
        let final_text = if cfg.text_mode == TextMode::Asynchronous {
            let mut t = embedded;
            for n in 1..=3 {
                t = self.text.stage_forward(ctx, t, &mask, n)?;
            }
            Some(t)
        } else {
            None
        };

        let mut diag = Diagnostics::default();
        let (mut xt, mut xs) = (template, search);
        let mut t = embedded;
        let mut last_text = final_text;
        for (i, stage) in self.stages.iter().enumerate() {
            let n = i + 1;
            xt = self.cte(ctx, stage, xt)?;
            xs = self.cte(ctx, stage, xs)?;
            for (l, tem) in stage.tems.iter().enumerate() {
                let (a, b_, w) = tem.forward(ctx, xt, xs, cfg.attention)?;
                xt = a;
                xs = b_;
                diag.search_attention.push((n, l, w));
            }
            if final_text.is_none() {
                t = self.text.stage_forward(ctx, t, &mask, n)?;
            }
            if let Some(sam) = &stage.sam {
                let input = match (&stage.async_adapter, final_text) {
                    (Some(ad), Some(ft)) => ad.forward(ctx, ft)?,
                    _ => t,
                };
                let out = sam.forward(ctx, xt, xs, input, &mask, cfg.text_update_enabled)?;
                xs = out.search;
                diag.gates.push((n, out.gate));
                if final_text.is_none() {
                    t = out.text;
                } else if n == 3 {
                    last_text = Some(out.text);
                }
            }
            diag.stage_outputs.push((n, xt, xs));
        }
        let text_out = last_text.unwrap_or(t);
        Ok(BackboneOut {
            search: xs,
            template: xt,
            text: text_out,
            diagnostics: diag,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plans_follow_stride_arithmetic() {
        let full = BackboneConfig::full().plan().unwrap();
        let s: Vec<usize> = full.iter().map(|p| p.search).collect();
        let t: Vec<usize> = full.iter().map(|p| p.template).collect();
        assert_eq!(s, [80, 40, 20]);
        assert_eq!(t, [32, 16, 8]);
        let desk = BackboneConfig::desk().plan().unwrap();
        assert_eq!(desk.iter().map(|p| p.search).collect::<Vec<_>>(), [16, 8, 4]);
        assert_eq!(desk.iter().map(|p| p.template).collect::<Vec<_>>(), [8, 4, 2]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = BackboneConfig::desk();
        c.search_size = 60;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = BackboneConfig::desk();
        c.stages[1].heads = 3;
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::desk();
        c.sam_start_stage = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let c = BackboneConfig::full();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"asymmetric\""));
        let back: BackboneConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
