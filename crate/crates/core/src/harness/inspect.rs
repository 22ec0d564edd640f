//! Dumps intermediate maps of one forward pass as PGM images plus CSV.

use std::fs;
use std::path::Path;

use super::model::{Batch, Model};
use crate::data::{make_sample, CropConfig, Sequence};
use crate::error::{Error, Result};
use crate::losses::{dense_matching_score, LossWeights};
use crate::nn::Ctx;
use crate::tensor::{Rng, Tape};
use crate::text::tokenize;

/// Binary 8-bit PGM, min-max scaled.
pub fn write_pgm(path: &Path, w: usize, h: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|v| (((v - lo) / span) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_grid_csv(path: &Path, w: usize, values: &[f64]) -> Result<()> {
    let text: String = values
        .chunks(w)
        .map(|row| row.iter().map(|v| format!("{v:.8}")).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dump(dir: &Path, name: &str, w: usize, h: usize, values: &[f64]) -> Result<()> {
    write_pgm(&dir.join(format!("{name}.pgm")), w, h, values)?;
    write_grid_csv(&dir.join(format!("{name}.csv")), w, values)
}

/// Runs the model on frame `frame` of `seq` (template from frame 0) and
/// writes head-averaged search attention, SAM gates, dense matching scores
/// and corner maps. Returns the written file stems.
pub fn inspect_sample(
    model: &Model,
    seq: &Sequence,
    frame: usize,
    crop: &CropConfig,
    weights: &LossWeights,
    dir: &Path,
) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bcfg = &model.cfg.backbone;
    let tokens = tokenize(&seq.description, &model.vocab, bcfg.max_text_len)?;
    let sample = make_sample(
        seq,
        0,
        frame,
        crop,
        (bcfg.template_size, bcfg.search_size),
        &tokens,
        false,
        &mut Rng::new(0),
        0,
    )?;
    let batch = Batch::from_samples(std::slice::from_ref(&sample), bcfg)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.store, false);
    let out = model.forward_batch(&mut ctx, &batch)?;
    let (raw, up) = dense_matching_score(&mut tape, out.backbone.search, out.backbone.text, &out.mask, weights)?;
    let mut written = Vec::new();

    for &(stage, layer, w) in &out.backbone.diagnostics.search_attention {
        let s = tape.shape(w).to_vec();
        let (heads, nq, nk) = (s[1], s[2], s[3]);
        let mut avg = vec![0.0; nq * nk];
        for hd in 0..heads {
            for (a, v) in avg.iter_mut().zip(&tape.value(w)[hd * nq * nk..(hd + 1) * nq * nk]) {
                *a += v / heads as f64;
            }
        }
        let name = format!("attn_stage{stage}_layer{layer}");
        dump(dir, &name, nk, nq, &avg)?;
        written.push(name);
    }
    for &(stage, g) in &out.backbone.diagnostics.gates {
        let name = format!("gate_stage{stage}");
        let v = tape.value(g);
        dump(dir, &name, v.len(), 1, v)?;
        written.push(name);
    }
    for (name, v) in [("dm_score", raw), ("dm_score_up", up)] {
        let s = tape.shape(v).to_vec();
        dump(dir, name, s[2], s[1], tape.value(v))?;
        written.push(name.to_string());
    }
    for (name, v) in [("corner_tl", out.maps.tl), ("corner_br", out.maps.br)] {
        dump(dir, name, out.maps.w, out.maps.h, tape.value(v))?;
        written.push(name.to_string());
    }
    Ok(written)
}
