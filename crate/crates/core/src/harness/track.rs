use std::fs;
use std::path::Path;

use super::model::{Batch, Model};
use crate::data::crop::{crop_region, template_crop};
use crate::data::{CropConfig, Sequence};
use crate::error::{Error, Result};
use crate::head::BBox;
use crate::tensor::Tensor;
use crate::text::tokenize;

/// Smallest box side kept as tracking state, in pixels.
const MIN_SIDE: f64 = 2.0;

/// Tracks the first-frame target through the sequence. Frame 0 is returned
/// as its ground truth.
pub fn track_sequence(model: &Model, seq: &Sequence, crop: &CropConfig) -> Result<Vec<BBox>> {
    let first = *seq
        .boxes
        .first()
        .ok_or_else(|| Error::Dataset(format!("sequence `{}` is empty", seq.name)))?;
    let bcfg = &model.cfg.backbone;
    let (ts, ss) = (bcfg.template_size, bcfg.search_size);
    let template = Tensor::new(&[1, ts, ts, 3], template_crop(&seq.frames[0], &first, crop, ts)?)?;
    let tokens = tokenize(&seq.description, &model.vocab, bcfg.max_text_len)?;
    let mut out = vec![first];
    let mut state = first;
    for frame in &seq.frames[1..] {
        let (cx, cy) = state.center();
        let side = (state.width() * state.height()).sqrt() * crop.search_factor;
        let (search, meta) = crop_region(frame, cx, cy, side, ss);
        let batch = Batch {
            template: template.clone(),
            search: Tensor::new(&[1, ss, ss, 3], search)?,
            tokens: vec![tokens.clone()],
            gt: Vec::new(),
            ids: vec![0],
        };
        let pred = meta.to_frame(&model.predict(&batch)?[0]);
        let pred = BBox::new(
            pred.x_tl.min(pred.x_br),
            pred.y_tl.min(pred.y_br),
            pred.x_tl.max(pred.x_br),
            pred.y_tl.max(pred.y_br),
        );
        out.push(pred);
        state = keep_valid(pred, frame.width as f64, frame.height as f64);
    }
    Ok(out)
}

/// Clamps the center into the frame and enforces a minimum size so the next
/// search crop stays well defined.
fn keep_valid(b: BBox, w: f64, h: f64) -> BBox {
    let (cx, cy) = b.center();
    let (cx, cy) = (cx.clamp(0.0, w), cy.clamp(0.0, h));
    let bw = b.width().max(MIN_SIDE);
    let bh = b.height().max(MIN_SIDE);
    BBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0)
}

/// `frame_index,x_tl,y_tl,x_br,y_br` per line.
pub fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::new();
    for (i, b) in boxes.iter().enumerate() {
        text.push_str(&format!("{i},{:.6},{:.6},{:.6},{:.6}\n", b.x_tl, b.y_tl, b.x_br, b.y_br));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
