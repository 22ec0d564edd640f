//! One-pass evaluation: success (IoU), precision (center error) and
//! normalized precision, all averaged per sequence then over sequences.
//! The initialization frame is excluded.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::track::track_sequence;
use crate::data::{CropConfig, Sequence};
use crate::error::{Error, Result};
use crate::head::BBox;

pub const PRECISION_PX: f64 = 20.0;
const SUCCESS_STEPS: usize = 20;
const NORM_STEPS: usize = 20;
const NORM_MAX: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub name: String,
    pub success: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub ious: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub sequences: Vec<SequenceScore>,
}

fn fraction(values: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|&&v| pass(v)).count() as f64 / values.len() as f64
}

/// Mean over `steps + 1` evenly spaced thresholds in `[0, max]`.
fn curve_area(values: &[f64], steps: usize, max: f64, pass: impl Fn(f64, f64) -> bool) -> f64 {
    (0..=steps)
        .map(|i| {
            let t = max * i as f64 / steps as f64;
            fraction(values, |v| pass(v, t))
        })
        .sum::<f64>()
        / (steps + 1) as f64
}

pub fn score_sequence(name: &str, pred: &[BBox], gt: &[BBox]) -> Result<SequenceScore> {
    if pred.len() != gt.len() {
        return Err(Error::Dataset(format!(
            "sequence `{name}`: {} predictions for {} frames",
            pred.len(),
            gt.len()
        )));
    }
    if gt.len() < 2 {
        return Err(Error::Dataset(format!("sequence `{name}` has no frames to score")));
    }
    let mut ious = Vec::new();
    let mut center = Vec::new();
    let mut norm = Vec::new();
    for (p, g) in pred.iter().zip(gt).skip(1) {
        ious.push(p.iou(g));
        let (pcx, pcy) = p.center();
        let (gcx, gcy) = g.center();
        center.push(((pcx - gcx).powi(2) + (pcy - gcy).powi(2)).sqrt());
        let (gw, gh) = (g.width().max(1e-12), g.height().max(1e-12));
        norm.push((((pcx - gcx) / gw).powi(2) + ((pcy - gcy) / gh).powi(2)).sqrt());
    }
    Ok(SequenceScore {
        name: name.to_string(),
        success: curve_area(&ious, SUCCESS_STEPS, 1.0, |v, t| v >= t),
        precision: fraction(&center, |v| v <= PRECISION_PX),
        norm_precision: curve_area(&norm, NORM_STEPS, NORM_MAX, |v, t| v <= t),
        ious,
    })
}

pub fn evaluate_predictions(seqs: &[Sequence], preds: &[Vec<BBox>]) -> Result<EvalReport> {
    if seqs.is_empty() || seqs.len() != preds.len() {
        return Err(Error::Dataset(format!(
            "{} sequences with {} prediction tracks",
            seqs.len(),
            preds.len()
        )));
    }
    let sequences = seqs
        .iter()
        .zip(preds)
        .map(|(s, p)| score_sequence(&s.name, p, &s.boxes))
        .collect::<Result<Vec<_>>>()?;
    let n = sequences.len() as f64;
    Ok(EvalReport {
        success: sequences.iter().map(|s| s.success).sum::<f64>() / n,
        precision: sequences.iter().map(|s| s.precision).sum::<f64>() / n,
        norm_precision: sequences.iter().map(|s| s.norm_precision).sum::<f64>() / n,
        sequences,
    })
}

/// Tracks every sequence (in parallel) and scores the result.
pub fn evaluate_ope(model: &Model, seqs: &[Sequence], crop: &CropConfig) -> Result<EvalReport> {
    let preds = seqs
        .par_iter()
        .map(|s| track_sequence(model, s, crop))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(seqs, &preds)
}

impl EvalReport {
    /// Per-sequence rows followed by an `ALL` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut text = String::from("sequence,success,precision,norm_precision\n");
        for s in &self.sequences {
            text.push_str(&format!("{},{:.6},{:.6},{:.6}\n", s.name, s.success, s.precision, s.norm_precision));
        }
        text.push_str(&format!(
            "ALL,{:.6},{:.6},{:.6}\n",
            self.success, self.precision, self.norm_precision
        ));
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(n: usize, b: BBox) -> Vec<BBox> {
        vec![b; n]
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let g = track(5, BBox::new(10.0, 10.0, 30.0, 40.0));
        let s = score_sequence("a", &g, &g).unwrap();
        assert_eq!((s.success, s.precision, s.norm_precision), (1.0, 1.0, 1.0));
        assert_eq!(s.ious.len(), 4);
    }

    #[test]
    fn disjoint_prediction_counts_only_zero_threshold() {
        let g = track(4, BBox::new(0.0, 0.0, 10.0, 10.0));
        let p = track(4, BBox::new(100.0, 100.0, 110.0, 110.0));
        let s = score_sequence("a", &p, &g).unwrap();
        assert!((s.success - 1.0 / 21.0).abs() < 1e-12);
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.norm_precision, 0.0);
    }

    #[test]
    fn first_frame_is_excluded() {
        let g = track(3, BBox::new(0.0, 0.0, 10.0, 10.0));
        let mut p = g.clone();
        p[0] = BBox::new(50.0, 50.0, 60.0, 60.0);
        assert_eq!(score_sequence("a", &p, &g).unwrap().success, 1.0);
    }
}
