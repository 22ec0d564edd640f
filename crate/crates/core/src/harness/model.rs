use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOut};
use crate::data::TrackSample;
use crate::error::{Error, Result};
use crate::head::{soft_argmax, BBox, CornerHead, CornerMaps};
use crate::losses::{dense_matching_loss, dense_matching_score, giou_loss, l1_box_loss, total_loss, LossWeights};
use crate::nn::Ctx;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::text::{batch_mask, TokenSequence, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head_layers: usize,
    pub seed: u64,
}

/// Backbone, corner head and their parameters.
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: CornerHead,
}

pub struct ForwardOut {
    /// `[B, 4]` normalized corners.
    pub boxes: Var,
    pub maps: CornerMaps,
    pub backbone: BackboneOut,
    pub mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossVars {
    pub giou: Var,
    pub l1: Var,
    pub dm: Option<Var>,
    pub total: Var,
}

/// Scalar loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub giou: f64,
    pub l1: f64,
    pub dm: f64,
    pub total: f64,
}

/// Network inputs stacked along the batch axis.
pub struct Batch {
    pub template: Tensor,
    pub search: Tensor,
    pub tokens: Vec<TokenSequence>,
    pub gt: Vec<BBox>,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[TrackSample], cfg: &BackboneConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let b = samples.len();
        let (t, s) = (cfg.template_size, cfg.search_size);
        let mut template = Vec::with_capacity(b * t * t * 3);
        let mut search = Vec::with_capacity(b * s * s * 3);
        for x in samples {
            template.extend_from_slice(&x.template);
            search.extend_from_slice(&x.search);
        }
        Ok(Self {
            template: Tensor::new(&[b, t, t, 3], template)?,
            search: Tensor::new(&[b, s, s, 3], search)?,
            tokens: samples.iter().map(|x| x.tokens.clone()).collect(),
            gt: samples.iter().map(|x| x.gt).collect(),
            ids: samples.iter().map(|x| x.id).collect(),
        })
    }
}

impl Model {
    pub fn new(cfg: &ModelConfig, vocab: Vocab) -> Result<Self> {
        let mut store = ParamStore::new(cfg.seed);
        let backbone = Backbone::new(&mut store, &cfg.backbone, vocab.len())?;
        let head = CornerHead::new(&mut store, cfg.backbone.stages[2].dim, cfg.head_layers)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            store,
            backbone,
            head,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, template: Var, search: Var, tokens: &[TokenSequence]) -> Result<ForwardOut> {
        let backbone = self.backbone.forward(ctx, template, search, tokens)?;
        let maps = self.head.forward(ctx, backbone.search)?;
        let boxes = soft_argmax(ctx.tape, &maps)?;
        Ok(ForwardOut {
            boxes,
            maps,
            backbone,
            mask: batch_mask(tokens),
        })
    }

    pub fn forward_batch(&self, ctx: &mut Ctx, batch: &Batch) -> Result<ForwardOut> {
        let t = ctx.tape.leaf(&batch.template);
        let s = ctx.tape.leaf(&batch.search);
        self.forward(ctx, t, s, &batch.tokens)
    }

    /// Predicted normalized boxes in inference mode.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<BBox>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.store, false);
        let out = self.forward_batch(&mut ctx, batch)?;
        Ok(tape.value(out.boxes).chunks(4).map(BBox::from_slice).collect())
    }
}

/// Weighted GIoU + L1 + dense-matching loss on a forward output; the dense term is only built
/// when its weight is nonzero.
pub fn compute_loss(tape: &mut Tape, out: &ForwardOut, gt: &[BBox], w: &LossWeights) -> Result<LossVars> {
    let giou = giou_loss(tape, out.boxes, gt)?;
    let l1 = l1_box_loss(tape, out.boxes, gt)?;
    let dm = if w.lambda_dm != 0.0 {
        let (_, up) = dense_matching_score(tape, out.backbone.search, out.backbone.text, &out.mask, w)?;
        Some(dense_matching_loss(tape, up, gt, w)?)
    } else {
        None
    };
    let total = total_loss(tape, giou, l1, dm, w)?;
    Ok(LossVars { giou, l1, dm, total })
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossParts {
        LossParts {
            giou: tape.item(self.giou),
            l1: tape.item(self.l1),
            dm: self.dm.map(|d| tape.item(d)).unwrap_or(0.0),
            total: tape.item(self.total),
        }
    }
}
