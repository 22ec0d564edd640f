use super::model::{compute_loss, Batch, Model};
use super::train::{build_vocab, TrainConfig};
use crate::data::{generate_dataset, make_sample, GenSpec};
use crate::error::Result;
use crate::nn::Ctx;
use crate::tensor::{finite_diff_check, FdOptions, GradCheckReport, Rng, Tensor};
use crate::text::tokenize;

/// Finite-difference check of the training loss of a freshly initialized
/// model with respect to every trainable tensor, on `batch` synthetic pairs.
/// Batch norm runs in training mode.
pub fn model_gradcheck(cfg: &TrainConfig, batch: usize, opts: &FdOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let spec = GenSpec {
        frame_size: (cfg.backbone.search_size * 3 / 2).max(32),
        length: 4,
        ..GenSpec::default()
    };
    let seqs = generate_dataset(cfg.seed, 0, batch, &spec)?;
    let model = Model::new(&cfg.model_config(), build_vocab(&seqs))?;
    let b = &cfg.backbone;
    let mut rng = Rng::new(cfg.seed);
    let samples = seqs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let tokens = tokenize(&s.description, &model.vocab, b.max_text_len)?;
            make_sample(s, 0, 2, &cfg.crop, (b.template_size, b.search_size), &tokens, true, &mut rng, i)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = Batch::from_samples(&samples, b)?;

    let store = &model.store;
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let params: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    finite_diff_check(
        |tape, vars| {
            for (&id, &v) in ids.iter().zip(vars) {
                tape.alias_param(id, v);
            }
            let mut ctx = Ctx::new(tape, store, true);
            let out = model.forward_batch(&mut ctx, &batch)?;
            Ok(compute_loss(ctx.tape, &out, &batch.gt, &cfg.loss)?.total)
        },
        &params,
        opts,
    )
}
