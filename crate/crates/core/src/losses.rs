//! Box regression losses, the dense matching loss and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::BBox;
use crate::nn::{dims3, dims4};
use crate::tensor::{Tape, Var};

/// Guards GIoU denominators against empty unions and enclosing boxes.
pub const GIOU_EPS: f64 = 1e-12;
const L2_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextPooling {
    /// First token of the final text features.
    Cls,
    /// Mean over real tokens.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_giou: f64,
    pub lambda_l1: f64,
    pub lambda_dm: f64,
    pub tau: f64,
    pub up_h: usize,
    pub up_w: usize,
    pub text_pooling: TextPooling,
}

impl LossWeights {
    pub fn full() -> Self {
        Self {
            lambda_giou: 2.0,
            lambda_l1: 5.0,
            lambda_dm: 1.0,
            tau: 0.07,
            up_h: 40,
            up_w: 40,
            text_pooling: TextPooling::Cls,
        }
    }

    pub fn desk() -> Self {
        Self {
            up_h: 16,
            up_w: 16,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.lambda_giou, self.lambda_l1, self.lambda_dm].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(self.tau > 0.0) || self.up_h == 0 || self.up_w == 0 {
            return Err(Error::Config("tau must be positive and the upsample size nonzero".into()));
        }
        Ok(())
    }
}

fn gt_columns(tape: &mut Tape, gt: &[BBox]) -> Result<[Var; 4]> {
    let b = gt.len();
    let mut cols = Vec::with_capacity(4);
    for k in 0..4 {
        let v: Vec<f64> = gt.iter().map(|g| g.to_array()[k]).collect();
        cols.push(tape.constant(&[b, 1], v)?);
    }
    Ok([cols[0], cols[1], cols[2], cols[3]])
}

fn check_boxes(tape: &Tape, pred: Var, gt: &[BBox], op: &'static str) -> Result<()> {
    if tape.shape(pred) != [gt.len(), 4] {
        return Err(Error::shape(op, format!("pred {:?} for {} targets", tape.shape(pred), gt.len())));
    }
    Ok(())
}

/// Mean absolute difference over every coordinate of `pred: [B, 4]`.
pub fn l1_box_loss(tape: &mut Tape, pred: Var, gt: &[BBox]) -> Result<Var> {
    check_boxes(tape, pred, gt, "l1_box_loss")?;
    let g: Vec<f64> = gt.iter().flat_map(|g| g.to_array()).collect();
    let g = tape.constant(&[gt.len(), 4], g)?;
    let d = tape.sub(pred, g)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Batch mean of `1 - GIoU`. Inverted predicted extents count as zero area.
pub fn giou_loss(tape: &mut Tape, pred: Var, gt: &[BBox]) -> Result<Var> {
    check_boxes(tape, pred, gt, "giou_loss")?;
    let mut p = [pred; 4];
    for (k, c) in p.iter_mut().enumerate() {
        *c = tape.slice(pred, 1, k, 1)?;
    }
    let [px1, py1, px2, py2] = p;
    let [gx1, gy1, gx2, gy2] = gt_columns(tape, gt)?;

    let extent = |tape: &mut Tape, lo_a: Var, lo_b: Var, hi_a: Var, hi_b: Var| -> Result<Var> {
        let hi = tape.minimum(hi_a, hi_b)?;
        let lo = tape.maximum(lo_a, lo_b)?;
        let d = tape.sub(hi, lo)?;
        Ok(tape.relu(d))
    };
    let iw = extent(tape, px1, gx1, px2, gx2)?;
    let ih = extent(tape, py1, gy1, py2, gy2)?;
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(px2, px1)?;
    let pw = tape.relu(pw);
    let ph = tape.sub(py2, py1)?;
    let ph = tape.relu(ph);
    let pa = tape.mul(pw, ph)?;
    let ga: Vec<f64> = gt.iter().map(|g| g.area()).collect();
    let ga = tape.constant(&[gt.len(), 1], ga)?;
    let union = tape.add(pa, ga)?;
    let union = tape.sub(union, inter)?;
    let union_eps = tape.add_scalar(union, GIOU_EPS);
    let iou = tape.div(inter, union_eps)?;

    let span = |tape: &mut Tape, lo_a: Var, lo_b: Var, hi_a: Var, hi_b: Var| -> Result<Var> {
        let hi = tape.maximum(hi_a, hi_b)?;
        let lo = tape.minimum(lo_a, lo_b)?;
        tape.sub(hi, lo)
    };
    let cw = span(tape, px1, gx1, px2, gx2)?;
    let ch = span(tape, py1, gy1, py2, gy2)?;
    let carea = tape.mul(cw, ch)?;
    let slack = tape.sub(carea, union)?;
    let carea_eps = tape.add_scalar(carea, GIOU_EPS);
    let penalty = tape.div(slack, carea_eps)?;
    let giou = tape.sub(iou, penalty)?;
    let m = tape.mean(giou);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Collapses text features `[B, L, C]` to `[B, 1, C]`.
pub fn pool_text(tape: &mut Tape, text: Var, mask: &[bool], pooling: TextPooling) -> Result<Var> {
    let (b, l, _) = dims3(tape, text, "pool_text")?;
    match pooling {
        TextPooling::Cls => tape.slice(text, 1, 0, 1),
        TextPooling::Mean => {
            if mask.len() != b * l {
                return Err(Error::shape("pool_text", format!("mask of {} for {b}x{l}", mask.len())));
            }
            let mut w = Vec::with_capacity(b * l);
            for row in mask.chunks(l) {
                let n = row.iter().filter(|m| **m).count().max(1) as f64;
                w.extend(row.iter().map(|&m| if m { 1.0 / n } else { 0.0 }));
            }
            let w = tape.constant(&[b, 1, l], w)?;
            tape.matmul(w, text)
        }
    }
}

/// Cosine map between each search location and the pooled text vector.
///
/// Returns `(raw [B, Hs, Ws, 1], upsampled [B, up_h, up_w, 1])`.
pub fn dense_matching_score(
    tape: &mut Tape,
    search: Var,
    text: Var,
    mask: &[bool],
    w: &LossWeights,
) -> Result<(Var, Var)> {
    let (b, h, wd, c) = dims4(tape, search, "dense_matching_score")?;
    let tc = tape.shape(text).last().copied().unwrap_or(0);
    if tc != c {
        return Err(Error::shape(
            "dense_matching_score",
            format!("search has {c} channels, text has {tc}"),
        ));
    }
    let t = pool_text(tape, text, mask, w.text_pooling)?;
    let t = tape.l2_normalize(t, 2, L2_EPS)?;
    let s = tape.reshape(search, &[b, h * wd, c])?;
    let s = tape.l2_normalize(s, 2, L2_EPS)?;
    let score = tape.matmul_t(s, t)?;
    let raw = tape.reshape(score, &[b, h, wd, 1])?;
    let up = tape.bilinear_resize(raw, w.up_h, w.up_w)?;
    Ok((raw, up))
}

/// 1 for cells whose center lies in `[x_tl, x_br) x [y_tl, y_br)`, row-major.
pub fn dense_label(gt: &BBox, h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let cy = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let cx = (j as f64 + 0.5) / w as f64;
            let inside = cx >= gt.x_tl && cx < gt.x_br && cy >= gt.y_tl && cy < gt.y_br;
            out.push(if inside { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Mean BCE of `sigmoid(score / tau)` against the dense labels.
pub fn dense_matching_loss(tape: &mut Tape, score: Var, gt: &[BBox], w: &LossWeights) -> Result<Var> {
    let (b, h, wd, _) = dims4(tape, score, "dense_matching_loss")?;
    if b != gt.len() {
        return Err(Error::shape("dense_matching_loss", format!("{b} maps for {} boxes", gt.len())));
    }
    let labels: Vec<f64> = gt.iter().flat_map(|g| dense_label(g, h, wd)).collect();
    let z = tape.scale(score, 1.0 / w.tau);
    tape.bce_with_logits_mean(z, &labels)
}

/// `lambda_giou * giou + lambda_l1 * l1 (+ lambda_dm * dm)`; the dense term
/// is left out when `lambda_dm == 0` or it was not computed.
pub fn total_loss(tape: &mut Tape, giou: Var, l1: Var, dm: Option<Var>, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(giou, w.lambda_giou);
    let b = tape.scale(l1, w.lambda_l1);
    let mut t = tape.add(a, b)?;
    if let Some(dm) = dm.filter(|_| w.lambda_dm != 0.0) {
        let c = tape.scale(dm, w.lambda_dm);
        t = tape.add(t, c)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pred(tape: &mut Tape, b: &[f64]) -> Var {
        tape.leaf(&Tensor::new(&[b.len() / 4, 4], b.to_vec()).unwrap())
    }

    #[test]
    fn l1_examples() {
        let mut tape = Tape::new();
        let gt = [BBox::new(0.25, 0.25, 0.75, 0.75)];
        let p = pred(&mut tape, &[0.25, 0.25, 0.75, 0.75]);
        let l = l1_box_loss(&mut tape, p, &gt).unwrap();
        assert_eq!(tape.item(l), 0.0);
        let p = pred(&mut tape, &[0.35, 0.35, 0.85, 0.85]);
        let l = l1_box_loss(&mut tape, p, &gt).unwrap();
        assert!((tape.item(l) - 0.1).abs() < 1e-15);
        let p = pred(&mut tape, &[0.0, 0.0, 1.0, 1.0]);
        let l = l1_box_loss(&mut tape, p, &gt).unwrap();
        assert_eq!(tape.item(l), 0.25);
    }

    #[test]
    fn giou_examples() {
        let mut tape = Tape::new();
        let g = BBox::new(0.1, 0.2, 0.6, 0.9);
        let p = pred(&mut tape, &g.to_array());
        let l = giou_loss(&mut tape, p, &[g]).unwrap();
        assert!(tape.item(l).abs() < 1e-10);

        let p = pred(&mut tape, &[0.0, 0.0, 0.2, 0.2]);
        let l = giou_loss(&mut tape, p, &[BBox::new(0.8, 0.8, 1.0, 1.0)]).unwrap();
        assert!((tape.item(l) - 1.92).abs() < 1e-9);

        let p = pred(&mut tape, &[0.0, 0.0, 1.0, 1.0]);
        let l = giou_loss(&mut tape, p, &[BBox::new(0.0, 0.0, 0.5, 1.0)]).unwrap();
        assert!((tape.item(l) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn total_examples() {
        let mut tape = Tape::new();
        let g = tape.leaf(&Tensor::scalar(0.5));
        let l = tape.leaf(&Tensor::scalar(0.1));
        let d = tape.leaf(&Tensor::scalar(std::f64::consts::LN_2));
        let w = LossWeights::full();
        let t = total_loss(&mut tape, g, l, Some(d), &w).unwrap();
        assert!((tape.item(t) - (1.5 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((tape.item(t) - 2.1931).abs() < 1e-4);
        let w0 = LossWeights { lambda_dm: 0.0, ..w };
        let t = total_loss(&mut tape, g, l, Some(d), &w0).unwrap();
        assert!((tape.item(t) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn dense_label_half_open() {
        let l = dense_label(&BBox::new(0.0, 0.0, 0.5, 0.5), 4, 4);
        assert_eq!(l.iter().sum::<f64>(), 4.0);
        // boundary exactly at a cell center is excluded on the high side
        let l = dense_label(&BBox::new(0.125, 0.125, 0.375, 0.375), 4, 4);
        assert_eq!(l.iter().sum::<f64>(), 1.0);
        assert!(dense_label(&BBox::new(0.3, 0.3, 0.3, 0.3), 8, 8).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn score_of_aligned_and_orthogonal_text() {
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, 2.0, 0.0, 0.5, 0.0, 3.0, 0.0]).unwrap());
        let t = tape.leaf(&Tensor::new(&[1, 2, 2], vec![4.0, 0.0, 9.0, 9.0]).unwrap());
        let w = LossWeights { up_h: 4, up_w: 4, ..LossWeights::desk() };
        let mask = [true, true];
        let (raw, up) = dense_matching_score(&mut tape, s, t, &mask, &w).unwrap();
        assert!(tape.value(raw).iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert_eq!(tape.shape(up), &[1, 4, 4, 1]);
        let t = tape.leaf(&Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 9.0, 9.0]).unwrap());
        let (raw, _) = dense_matching_score(&mut tape, s, t, &mask, &w).unwrap();
        assert!(tape.value(raw).iter().all(|v| *v == 0.0));
    }
}
