//! Corner head: two Conv-BN-ReLU stacks produce top-left and bottom-right
//! probability maps whose expectations give the box corners.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{dims4, BatchNorm, ConvSpec, Conv2d, Ctx, Scope};
use crate::tensor::{ParamGroup, ParamStore, Tape, Var};

/// Axis-aligned box as corners. Normalized boxes live in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct BBox {
    pub x_tl: f64,
    pub y_tl: f64,
    pub x_br: f64,
    pub y_br: f64,
}

impl BBox {
    pub fn new(x_tl: f64, y_tl: f64, x_br: f64, y_br: f64) -> Self {
        Self { x_tl, y_tl, x_br, y_br }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x_br - self.x_tl
    }

    pub fn height(&self) -> f64 {
        self.y_br - self.y_tl
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_tl + self.x_br) / 2.0, (self.y_tl + self.y_br) / 2.0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_tl, self.y_tl, self.x_br, self.y_br]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x_br.min(other.x_br) - self.x_tl.max(other.x_tl)).max(0.0);
        let ih = (self.y_br.min(other.y_br) - self.y_tl.max(other.y_tl)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Logits-softmaxed maps `[B, H*W]` for each corner.
#[derive(Clone, Copy, Debug)]
pub struct CornerMaps {
    pub tl: Var,
    pub br: Var,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug)]
struct Tower {
    blocks: Vec<(Conv2d, BatchNorm)>,
    out: Conv2d,
}

impl Tower {
    fn new(s: &mut Scope, name: &str, c_in: usize, layers: usize) -> Result<Self> {
        let mut s = s.sub(name);
        let mut blocks = Vec::with_capacity(layers);
        let mut c = c_in;
        for l in 0..layers {
            let c_out = (c / 2).max(1);
            let conv = Conv2d::new(
                &mut s,
                &format!("conv{l}"),
                ConvSpec {
                    bias: false,
                    ..ConvSpec::new(c, c_out, 3, 1, 1)
                },
            )?;
            let bn = BatchNorm::new(&mut s, &format!("bn{l}"), c_out)?;
            blocks.push((conv, bn));
            c = c_out;
        }
        let out = Conv2d::new(&mut s, "out", ConvSpec::new(c, 1, 3, 1, 1))?;
        Ok(Self { blocks, out })
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for (conv, bn) in &self.blocks {
            h = conv.forward(ctx, h)?;
            h = bn.forward(ctx, h)?;
            h = ctx.tape.relu(h);
        }
        self.out.forward(ctx, h)
    }
}

#[derive(Clone, Debug)]
pub struct CornerHead {
    tl: Tower,
    br: Tower,
}

impl CornerHead {
    /// `layers` Conv-BN-ReLU blocks halving the channels, then a conv to one
    /// logit per cell.
    pub fn new(store: &mut ParamStore, c_in: usize, layers: usize) -> Result<Self> {
        let mut s = Scope::root(store, "head", ParamGroup::Head);
        Ok(Self {
            tl: Tower::new(&mut s, "tl", c_in, layers)?,
            br: Tower::new(&mut s, "br", c_in, layers)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<CornerMaps> {
        let (b, h, w, _) = dims4(ctx.tape, x, "corner_head")?;
        let mut maps = [x; 2];
        for (m, tower) in maps.iter_mut().zip([&self.tl, &self.br]) {
            let logits = tower.forward(ctx, x)?;
            let logits = ctx.tape.reshape(logits, &[b, h * w])?;
            *m = ctx.tape.softmax(logits, 1)?;
        }
        Ok(CornerMaps {
            tl: maps[0],
            br: maps[1],
            h,
            w,
        })
    }
}

/// Cell-center coordinates `[(j + 0.5) / W, (i + 0.5) / H]` in row-major order.
pub fn cell_centers(h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            out.push((j as f64 + 0.5) / w as f64);
            out.push((i as f64 + 0.5) / h as f64);
        }
    }
    out
}

/// Expected corners under the maps; returns boxes `[B, 4]` as
/// `(x_tl, y_tl, x_br, y_br)`.
pub fn soft_argmax(tape: &mut Tape, maps: &CornerMaps) -> Result<Var> {
    let coords = tape.constant(&[maps.h * maps.w, 2], cell_centers(maps.h, maps.w))?;
    let tl = tape.matmul(maps.tl, coords)?;
    let br = tape.matmul(maps.br, coords)?;
    tape.concat(&[tl, br], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn maps(tape: &mut Tape, tl: Vec<f64>, br: Vec<f64>, h: usize, w: usize) -> CornerMaps {
        CornerMaps {
            tl: tape.leaf(&Tensor::new(&[1, h * w], tl).unwrap()),
            br: tape.leaf(&Tensor::new(&[1, h * w], br).unwrap()),
            h,
            w,
        }
    }

    #[test]
    fn expectation_examples() {
        let mut tape = Tape::new();
        let m = maps(&mut tape, vec![0.5, 0.5, 0.0, 0.0], vec![0.25; 4], 2, 2);
        let b = soft_argmax(&mut tape, &m).unwrap();
        assert_eq!(tape.value(b), &[0.5, 0.25, 0.5, 0.5]);

        let mut tl = vec![0.0; 16];
        tl[0] = 1.0;
        let mut br = vec![0.0; 16];
        br[15] = 1.0;
        let m = maps(&mut tape, tl, br, 4, 4);
        let b = soft_argmax(&mut tape, &m).unwrap();
        assert_eq!(tape.value(b), &[0.125, 0.125, 0.875, 0.875]);
    }

    #[test]
    fn iou_basics() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(1.0, 0.0, 3.0, 2.0)), 1.0 / 3.0);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(BBox::from_xywh(10.0, 20.0, 30.0, 40.0), BBox::new(10.0, 20.0, 40.0, 60.0));
    }
}
