//! Square context crops around a box, resized to the network input size.

use serde::{Deserialize, Serialize};

use super::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::head::BBox;
use crate::tensor::Rng;
use crate::text::TokenSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Crop side is `factor * sqrt(w * h)` of the reference box.
    pub template_factor: f64,
    pub search_factor: f64,
    /// Max center shift of the search crop, in units of `sqrt(w * h)`.
    pub center_jitter: f64,
    /// Max log-scale change of the search crop side.
    pub scale_jitter: f64,
    /// Max frame distance between template and search frames in training.
    pub max_gap: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            template_factor: 2.0,
            search_factor: 5.0,
            center_jitter: 1.0,
            scale_jitter: 0.15,
            max_gap: 30,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.template_factor >= 1.0 && self.search_factor >= 1.0) {
            return Err(Error::Config("context factors must be >= 1".into()));
        }
        if !(self.center_jitter >= 0.0 && self.scale_jitter >= 0.0) {
            return Err(Error::Config("jitter amounts must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Maps normalized crop coordinates `u` to frame pixels `x0 + u * side`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropMeta {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropMeta {
    pub fn to_frame(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0 + b.x_tl * self.side,
            self.y0 + b.y_tl * self.side,
            self.x0 + b.x_br * self.side,
            self.y0 + b.y_br * self.side,
        )
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x_tl - self.x0) / self.side,
            (b.y_tl - self.y0) / self.side,
            (b.x_br - self.x0) / self.side,
            (b.y_br - self.y0) / self.side,
        )
    }
}

/// Network input normalization of a `[0, 1]` channel value.
pub fn normalize_pixel(v: f64) -> f64 {
    (v - 0.5) / 0.25
}

/// Bilinearly resamples the square `side x side` region centered at
/// `(cx, cy)` to `out x out`; pixels outside the frame take the per-channel
/// frame mean. Returns normalized `[out, out, 3]` values.
pub fn crop_region(frame: &Frame, cx: f64, cy: f64, side: f64, out: usize) -> (Vec<f64>, CropMeta) {
    let meta = CropMeta {
        x0: cx - side / 2.0,
        y0: cy - side / 2.0,
        side,
        out_size: out,
    };
    let mean = frame.channel_means();
    let step = side / out as f64;
    let (w, h) = (frame.width as i64, frame.height as i64);
    let px = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            mean[c]
        } else {
            frame.get(x as usize, y as usize, c)
        }
    };
    let mut data = Vec::with_capacity(out * out * 3);
    for v in 0..out {
        let fy = meta.y0 + (v as f64 + 0.5) * step - 0.5;
        let y0 = fy.floor();
        let ty = fy - y0;
        for u in 0..out {
            let fx = meta.x0 + (u as f64 + 0.5) * step - 0.5;
            let x0 = fx.floor();
            let tx = fx - x0;
            let (xi, yi) = (x0 as i64, y0 as i64);
            for c in 0..3 {
                let top = px(xi, yi, c) * (1.0 - tx) + px(xi + 1, yi, c) * tx;
                let bot = px(xi, yi + 1, c) * (1.0 - tx) + px(xi + 1, yi + 1, c) * tx;
                data.push(normalize_pixel(top * (1.0 - ty) + bot * ty));
            }
        }
    }
    (data, meta)
}

/// One network input: crops, tokens and the search-normalized target box.
#[derive(Clone, Debug)]
pub struct TrackSample {
    pub id: usize,
    pub template: Vec<f64>,
    pub search: Vec<f64>,
    pub tokens: TokenSequence,
    pub gt: BBox,
    pub meta: CropMeta,
}

fn box_side(b: &BBox, factor: f64) -> Result<f64> {
    let area = b.width() * b.height();
    if !(area > 0.0) {
        return Err(Error::Dataset(format!("zero-area box {b:?}")));
    }
    Ok(area.sqrt() * factor)
}

/// Template crop of `box` in `frame`.
pub fn template_crop(frame: &Frame, b: &BBox, crop: &CropConfig, out: usize) -> Result<Vec<f64>> {
    let side = box_side(b, crop.template_factor)?;
    let (cx, cy) = b.center();
    Ok(crop_region(frame, cx, cy, side, out).0)
}

#[allow(clippy::too_many_arguments)]
pub fn make_sample(
    seq: &Sequence,
    template_frame: usize,
    search_frame: usize,
    crop: &CropConfig,
    sizes: (usize, usize),
    tokens: &TokenSequence,
    train: bool,
    rng: &mut Rng,
    id: usize,
) -> Result<TrackSample> {
    let n = seq.len();
    if template_frame >= n || search_frame >= n {
        return Err(Error::Dataset(format!(
            "sequence `{}`: frame {template_frame}/{search_frame} out of {n}",
            seq.name
        )));
    }
    let template = template_crop(&seq.frames[template_frame], &seq.boxes[template_frame], crop, sizes.0)?;
    let b = seq.boxes[search_frame];
    let base = box_side(&b, 1.0)?;
    let (mut cx, mut cy) = b.center();
    let mut side = base * crop.search_factor;
    if train {
        side *= rng.uniform_range(-crop.scale_jitter, crop.scale_jitter).exp();
        let dx = rng.uniform_range(-1.0, 1.0) * crop.center_jitter * base;
        let dy = rng.uniform_range(-1.0, 1.0) * crop.center_jitter * base;
        let lim_x = ((side - b.width()) / 2.0).max(0.0);
        let lim_y = ((side - b.height()) / 2.0).max(0.0);
        cx += dx.clamp(-lim_x, lim_x);
        cy += dy.clamp(-lim_y, lim_y);
    }
    let (search, meta) = crop_region(&seq.frames[search_frame], cx, cy, side, sizes.1);
    let g = meta.to_crop(&b);
    let gt = BBox::new(
        g.x_tl.clamp(0.0, 1.0),
        g.y_tl.clamp(0.0, 1.0),
        g.x_br.clamp(0.0, 1.0),
        g.y_br.clamp(0.0, 1.0),
    );
    Ok(TrackSample {
        id,
        template,
        search,
        tokens: tokens.clone(),
        gt,
        meta,
    })
}

/// Template and search frame indices at most `max_gap` apart.
pub fn sample_pair(len: usize, max_gap: usize, rng: &mut Rng) -> (usize, usize) {
    let t = rng.below(len);
    let lo = t.saturating_sub(max_gap);
    let hi = (t + max_gap).min(len - 1);
    (t, lo + rng.below(hi - lo + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_of_frame_uses_channel_mean() {
        let mut f = Frame::new(4, 4);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = if i % 3 == 0 { 255 } else { 0 };
        }
        let (d, _) = crop_region(&f, -100.0, -100.0, 8.0, 4);
        let m = f.channel_means();
        assert!((d[0] - normalize_pixel(m[0])).abs() < 1e-12);
        assert!((d[1] - normalize_pixel(m[1])).abs() < 1e-12);
    }

    #[test]
    fn identity_crop_reproduces_frame() {
        let mut f = Frame::new(8, 8);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = (i * 7 % 256) as u8;
        }
        let (d, meta) = crop_region(&f, 4.0, 4.0, 8.0, 8);
        assert_eq!((meta.x0, meta.y0), (0.0, 0.0));
        for (a, b) in d.iter().zip(&f.data) {
            assert!((a - normalize_pixel(*b as f64 / 255.0)).abs() < 1e-12);
        }
    }
}
