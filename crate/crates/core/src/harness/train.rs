use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{compute_loss, Batch, LossParts, Model, ModelConfig};
use super::optim::{AdamW, GroupLr};
use crate::backbone::BackboneConfig;
use crate::data::{make_sample, sample_pair, CropConfig, Sequence, TrackSample};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{apply_bn_updates, Ctx};
use crate::tensor::{derive_seed, read_tensors, write_tensors, Rng, Tape, Tensor};
use crate::text::{split_words, tokenize, TokenSequence, Vocab};

const CHECKPOINT_KIND: &str = "satrack-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rates drop tenfold from this epoch on.
    pub lr_decay_epoch: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    /// Training pairs drawn per epoch; 0 means one per training sequence.
    pub samples_per_epoch: usize,
    pub seed: u64,
    pub head_layers: usize,
    pub loss: LossWeights,
    pub crop: CropConfig,
    pub backbone: BackboneConfig,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            epochs: 200,
            lr_decay_epoch: 160,
            lr_backbone: 1e-5,
            lr_head: 1e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            grad_clip: 0.1,
            samples_per_epoch: 0,
            seed: 0,
            head_layers: 4,
            loss: LossWeights::full(),
            crop: CropConfig::default(),
            backbone: BackboneConfig::full(),
        }
    }

    /// Small model trained from scratch on one CPU core.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            lr_decay_epoch: 16,
            lr_backbone: 1e-3,
            lr_head: 1e-3,
            batch_size: 8,
            loss: LossWeights::desk(),
            backbone: BackboneConfig::desk(),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        self.crop.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.head_layers == 0 {
            return Err(Error::Config("head_layers must be positive".into()));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_head", self.lr_head),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            head_layers: self.head_layers,
            seed: self.seed,
        }
    }

    pub fn lr(&self, epoch: usize) -> GroupLr {
        let f = if epoch >= self.lr_decay_epoch { 0.1 } else { 1.0 };
        GroupLr {
            backbone: self.lr_backbone * f,
            head: self.lr_head * f,
        }
    }

    /// FNV-1a over the serialized config with the epoch count zeroed, so a
    /// run may be resumed with a longer schedule.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        let text = serde_json::to_string(&c).unwrap_or_default();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Builtin vocabulary extended with every word of the given descriptions.
pub fn build_vocab(seqs: &[Sequence]) -> Vocab {
    let mut v = Vocab::builtin();
    let words: Vec<String> = seqs.iter().flat_map(|s| split_words(&s.description)).collect();
    v.extend(words.iter().map(String::as_str));
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossParts,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamW,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<StepLog>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model_config(), vocab)?;
        let opt = AdamW::new(&model.store, cfg.weight_decay);
        Ok(Self {
            cfg,
            model,
            opt,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One optimization step. The loss is evaluated before the update.
    pub fn train_step(&mut self, batch: &Batch, lr: GroupLr) -> Result<LossParts> {
        let mut tape = Tape::new();
        let (loss, parts, updates) = {
            let mut ctx = Ctx::new(&mut tape, &self.model.store, true);
            let out = self.model.forward_batch(&mut ctx, batch)?;
            let updates = ctx.take_bn_updates();
            let loss = compute_loss(ctx.tape, &out, &batch.gt, &self.cfg.loss)?;
            (loss, loss.values(&tape), updates)
        };
        let finite = [parts.giou, parts.l1, parts.dm, parts.total].iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteLoss {
                ids: batch.ids.clone(),
                detail: format!("{parts:?}"),
            });
        }
        let grads = tape.backward(loss.total)?;
        let store = &mut self.model.store;
        store.zero_grads();
        store.accumulate_grads(&tape, &grads);
        let norm = AdamW::grad_norm(store);
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                ids: batch.ids.clone(),
                detail: format!("gradient norm {norm}"),
            });
        }
        let clip = (self.cfg.grad_clip > 0.0).then_some(self.cfg.grad_clip);
        self.opt.step(store, lr, clip);
        apply_bn_updates(store, &updates);
        Ok(parts)
    }

    /// Training pairs of one epoch; depends only on the seed and the epoch.
    pub fn epoch_samples(&self, data: &Prepared, epoch: usize) -> Result<Vec<TrackSample>> {
        let mut rng = Rng::new(derive_seed(self.cfg.seed, &format!("epoch/{epoch}")));
        let n = if self.cfg.samples_per_epoch == 0 {
            data.seqs.len()
        } else {
            self.cfg.samples_per_epoch
        };
        let mut order: Vec<usize> = (0..data.seqs.len()).collect();
        let sizes = (self.cfg.backbone.template_size, self.cfg.backbone.search_size);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            if i % order.len() == 0 {
                rng.shuffle(&mut order);
            }
            let k = order[i % order.len()];
            let seq = &data.seqs[k];
            let (t, s) = sample_pair(seq.len(), self.cfg.crop.max_gap, &mut rng);
            out.push(make_sample(seq, t, s, &self.cfg.crop, sizes, &data.tokens[k], true, &mut rng, i)?);
        }
        Ok(out)
    }

    /// Runs one epoch and returns its step losses. Trailing single-sample
    /// batches are dropped.
    pub fn run_epoch(&mut self, data: &Prepared) -> Result<Vec<LossParts>> {
        let epoch = self.epoch;
        let samples = self.epoch_samples(data, epoch)?;
        let lr = self.cfg.lr(epoch);
        let mut losses = Vec::new();
        for (step, chunk) in samples.chunks(self.cfg.batch_size).enumerate() {
            if chunk.len() == 1 && self.cfg.batch_size > 1 {
                break;
            }
            let batch = Batch::from_samples(chunk, &self.cfg.backbone)?;
            let loss = self.train_step(&batch, lr)?;
            self.history.push(StepLog { epoch, step, loss });
            losses.push(loss);
        }
        self.epoch += 1;
        Ok(losses)
    }

    /// Trains until `cfg.epochs`, checkpointing after every epoch when `out`
    /// is given. Loss rows are appended to `out/losses.csv`.
    pub fn fit(&mut self, seqs: &[Sequence], out: Option<&Path>) -> Result<()> {
        let data = Prepared::new(seqs, &self.model.vocab, &self.cfg)?;
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let csv = dir.join("losses.csv");
            if self.epoch == 0 || !csv.exists() {
                fs::write(&csv, "epoch,step,giou,l1,dm,total\n").map_err(|e| Error::io(&csv, e))?;
            }
        }
        while self.epoch < self.cfg.epochs {
            let epoch = self.epoch;
            let losses = match self.run_epoch(&data) {
                Err(Error::NonFiniteLoss { ids, detail }) => {
                    if let Some(dir) = out {
                        let dump = serde_json::json!({ "epoch": epoch, "sample_ids": ids, "detail": detail });
                        let p = dir.join("nonfinite_batch.json");
                        fs::write(&p, dump.to_string()).map_err(|e| Error::io(&p, e))?;
                    }
                    return Err(Error::NonFiniteLoss { ids, detail });
                }
                r => r?,
            };
            let mean = losses.iter().map(|l| l.total).sum::<f64>() / losses.len().max(1) as f64;
            log::info!("epoch {}/{}: mean loss {mean:.5}", epoch + 1, self.cfg.epochs);
            if let Some(dir) = out {
                append_losses(&dir.join("losses.csv"), epoch, &losses)?;
                self.save(&dir.join("checkpoint"))?;
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "epoch": self.epoch,
            "optimizer_step": self.opt.step,
            "config_hash": self.cfg.hash(),
            "config": self.cfg,
        });
        let store = &self.model.store;
        let params: Vec<(String, &Tensor)> = store.ids().map(|id| (store.name(id).to_string(), store.get(id))).collect();
        write_tensors(dir, "model", &params, meta)?;
        let state = self.opt.state_tensors(store)?;
        let refs: Vec<(String, &Tensor)> = state.iter().map(|(n, t)| (n.clone(), t)).collect();
        write_tensors(dir, "optim", &refs, serde_json::json!({ "kind": CHECKPOINT_KIND }))?;
        self.model.vocab.save(&dir.join("vocab.txt"))
    }

    /// Restores model and optimizer state. With `cfg`, its hash must match the
    /// stored one (the epoch count may differ).
    pub fn resume(dir: &Path, cfg: Option<TrainConfig>) -> Result<Self> {
        let ckpt = Checkpoint::read(dir)?;
        let cfg = match cfg {
            Some(c) => {
                if c.hash() != ckpt.cfg.hash() {
                    return Err(Error::Config(format!(
                        "config hash {} does not match checkpoint hash {}",
                        c.hash(),
                        ckpt.cfg.hash()
                    )));
                }
                c
            }
            None => ckpt.cfg.clone(),
        };
        let mut t = Trainer::new(cfg, ckpt.vocab)?;
        load_params(&mut t.model, &ckpt.params)?;
        let (_, state) = read_tensors(dir, "optim")?;
        t.opt.load_state(&t.model.store, &state, ckpt.optimizer_step)?;
        t.epoch = ckpt.epoch;
        Ok(t)
    }
}

fn append_losses(path: &Path, epoch: usize, losses: &[LossParts]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for (step, l) in losses.iter().enumerate() {
        text.push_str(&format!("{epoch},{step},{},{},{},{}\n", l.giou, l.l1, l.dm, l.total));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Sequences paired with their tokenized descriptions.
pub struct Prepared<'a> {
    pub seqs: &'a [Sequence],
    pub tokens: Vec<TokenSequence>,
}

impl<'a> Prepared<'a> {
    pub fn new(seqs: &'a [Sequence], vocab: &Vocab, cfg: &TrainConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Dataset("no training sequences".into()));
        }
        for s in seqs {
            if s.len() < 2 {
                return Err(Error::Dataset(format!("sequence `{}` has fewer than 2 frames", s.name)));
            }
        }
        let tokens = seqs
            .iter()
            .map(|s| tokenize(&s.description, vocab, cfg.backbone.max_text_len))
            .collect::<Result<_>>()?;
        Ok(Self { seqs, tokens })
    }
}

struct Checkpoint {
    cfg: TrainConfig,
    vocab: Vocab,
    params: Vec<(String, Tensor)>,
    epoch: usize,
    optimizer_step: u64,
}

impl Checkpoint {
    fn read(dir: &Path) -> Result<Self> {
        let (manifest, params) = read_tensors(dir, "model")?;
        let meta = &manifest.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint(format!("{} is not a tracker checkpoint", dir.display())));
        }
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        let field = |k: &str| {
            meta.get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint meta lacks `{k}`")))
        };
        Ok(Self {
            vocab: Vocab::load(&dir.join("vocab.txt"))?,
            epoch: field("epoch")? as usize,
            optimizer_step: field("optimizer_step")?,
            cfg,
            params,
        })
    }
}

fn load_params(model: &mut Model, params: &[(String, Tensor)]) -> Result<()> {
    let store = &mut model.store;
    if params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for (name, t) in params {
        let dst = store
            .by_name_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if dst.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Loads a trained model for inference, with its training config.
pub fn load_model(dir: &Path) -> Result<(Model, TrainConfig)> {
    let ckpt = Checkpoint::read(dir)?;
    let mut model = Model::new(&ckpt.cfg.model_config(), ckpt.vocab)?;
    load_params(&mut model, &ckpt.params)?;
    Ok((model, ckpt.cfg))
}
