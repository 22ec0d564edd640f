//! Synthetic moving-shape sequences with same-shape distractors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Frame, Sequence};
use crate::error::{Error, Result};
use crate::head::BBox;
use crate::tensor::{derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    Orange,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::Orange,
        Color::White,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::Orange => "orange",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [225.0, 35.0, 35.0],
            Color::Green => [35.0, 200.0, 60.0],
            Color::Blue => [45.0, 80.0, 235.0],
            Color::Yellow => [235.0, 225.0, 45.0],
            Color::Cyan => [40.0, 215.0, 225.0],
            Color::Magenta => [215.0, 45.0, 205.0],
            Color::Orange => [245.0, 140.0, 25.0],
            Color::White => [245.0, 245.0, 245.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Signed distance (pixels, positive outside) from `(px, py)` to the shape
    /// of half-extent `r` centered at `(cx, cy)`. Every shape exactly fills the
    /// box `[cx - r, cx + r] x [cy - r, cy + r]`.
    pub fn sdf(self, px: f64, py: f64, cx: f64, cy: f64, r: f64) -> f64 {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            Shape::Circle => (dx * dx + dy * dy).sqrt() - r,
            Shape::Square => dx.abs().max(dy.abs()) - r,
            Shape::Triangle => {
                // apex (0, -r), base corners (+-r, r); edges as half-planes
                let s = 5f64.sqrt();
                let right = (2.0 * dx - dy - r) / s;
                let left = (-2.0 * dx - dy - r) / s;
                let bottom = dy - r;
                right.max(left).max(bottom)
            }
        }
    }
}

const DIRECTIONS: [&str; 4] = ["left", "right", "up", "down"];

/// Words the generator can emit in descriptions.
pub fn lexicon() -> Vec<&'static str> {
    let mut v = vec!["the", "moving"];
    v.extend(Color::ALL.iter().map(|c| c.name()));
    v.extend(Shape::ALL.iter().map(|s| s.name()));
    v.extend(DIRECTIONS);
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub frame_size: usize,
    pub length: usize,
    pub distractors: usize,
    pub occluders: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub max_speed: f64,
    /// Fixed target attributes; random when absent.
    #[serde(default)]
    pub target: Option<(Color, Shape)>,
    /// Fixed distractor colors (cycled); random non-target colors when absent.
    #[serde(default)]
    pub distractor_colors: Option<Vec<Color>>,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            frame_size: 64,
            length: 32,
            distractors: 2,
            occluders: 0,
            min_radius: 5.0,
            max_radius: 8.0,
            max_speed: 1.5,
            target: None,
            distractor_colors: None,
        }
    }
}

struct Mover {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    r: f64,
}

impl Mover {
    fn spawn(rng: &mut Rng, size: f64, r: f64, max_speed: f64) -> Self {
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        let speed = rng.uniform_range(0.3, 1.0) * max_speed;
        Self {
            x: rng.uniform_range(r, size - r),
            y: rng.uniform_range(r, size - r),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            r,
        }
    }

    /// Smooth random walk with reflection at the borders.
    fn step(&mut self, rng: &mut Rng, size: f64, max_speed: f64) {
        self.vx += 0.25 * rng.normal();
        self.vy += 0.25 * rng.normal();
        let speed = (self.vx * self.vx + self.vy * self.vy).sqrt();
        if speed > max_speed {
            self.vx *= max_speed / speed;
            self.vy *= max_speed / speed;
        }
        self.x += self.vx;
        self.y += self.vy;
        let (lo, hi) = (self.r, size - self.r);
        if self.x < lo {
            self.x = 2.0 * lo - self.x;
            self.vx = self.vx.abs();
        }
        if self.x > hi {
            self.x = 2.0 * hi - self.x;
            self.vx = -self.vx.abs();
        }
        if self.y < lo {
            self.y = 2.0 * lo - self.y;
            self.vy = self.vy.abs();
        }
        if self.y > hi {
            self.y = 2.0 * hi - self.y;
            self.vy = -self.vy.abs();
        }
        self.x = self.x.clamp(lo, hi);
        self.y = self.y.clamp(lo, hi);
    }

    fn bbox(&self) -> BBox {
        BBox::new(self.x - self.r, self.y - self.r, self.x + self.r, self.y + self.r)
    }
}

fn background(rng: &mut Rng, size: usize) -> Vec<f64> {
    const CELLS: usize = 8;
    let lattice: Vec<[f64; 3]> = (0..(CELLS + 1) * (CELLS + 1))
        .map(|_| {
            let base = rng.uniform_range(30.0, 120.0);
            [0, 1, 2].map(|_| base + rng.uniform_range(-15.0, 15.0))
        })
        .collect();
    let mut out = vec![0.0; size * size * 3];
    let cell = size as f64 / CELLS as f64;
    for y in 0..size {
        for x in 0..size {
            let fx = (x as f64 + 0.5) / cell;
            let fy = (y as f64 + 0.5) / cell;
            let (ix, iy) = ((fx as usize).min(CELLS - 1), (fy as usize).min(CELLS - 1));
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let at = |i: usize, j: usize| lattice[j * (CELLS + 1) + i];
            for c in 0..3 {
                let top = at(ix, iy)[c] * (1.0 - tx) + at(ix + 1, iy)[c] * tx;
                let bot = at(ix, iy + 1)[c] * (1.0 - tx) + at(ix + 1, iy + 1)[c] * tx;
                out[(y * size + x) * 3 + c] = top * (1.0 - ty) + bot * ty + rng.uniform_range(-10.0, 10.0);
            }
        }
    }
    out
}

fn draw(canvas: &mut [f64], size: usize, shape: Shape, m: &Mover, rgb: [f64; 3]) {
    let x0 = (m.x - m.r - 2.0).floor().max(0.0) as usize;
    let y0 = (m.y - m.r - 2.0).floor().max(0.0) as usize;
    let x1 = ((m.x + m.r + 2.0).ceil() as usize).min(size);
    let y1 = ((m.y + m.r + 2.0).ceil() as usize).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = shape.sdf(x as f64 + 0.5, y as f64 + 0.5, m.x, m.y, m.r);
            let a = (0.5 - d).clamp(0.0, 1.0);
            if a > 0.0 {
                let p = &mut canvas[(y * size + x) * 3..(y * size + x) * 3 + 3];
                for c in 0..3 {
                    p[c] = (1.0 - a) * p[c] + a * rgb[c];
                }
            }
        }
    }
}

fn direction_word(dx: f64, dy: f64) -> &'static str {
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            "left"
        } else {
            "right"
        }
    } else if dy < 0.0 {
        "up"
    } else {
        "down"
    }
}

fn validate(spec: &GenSpec) -> Result<()> {
    if spec.length == 0 || spec.frame_size < 16 {
        return Err(Error::Config("sequences need at least one frame of size >= 16".into()));
    }
    if !(spec.min_radius >= 1.0 && spec.max_radius >= spec.min_radius) || 2.0 * spec.max_radius >= spec.frame_size as f64
    {
        return Err(Error::Config(format!(
            "radius range [{}, {}] invalid for frame size {}",
            spec.min_radius, spec.max_radius, spec.frame_size
        )));
    }
    if let (Some((tc, _)), Some(dc)) = (spec.target, &spec.distractor_colors) {
        if dc.contains(&tc) {
            return Err(Error::Config(format!(
                "distractor identical to the target ({} {}) cannot be told apart by language",
                tc.name(),
                spec.target.unwrap().1.name()
            )));
        }
        if dc.is_empty() && spec.distractors > 0 {
            return Err(Error::Config("empty distractor color list".into()));
        }
    }
    Ok(())
}

/// Renders sequence `id` for `seed`; output depends only on `(seed, id, spec)`.
pub fn generate_sequence(seed: u64, id: usize, spec: &GenSpec) -> Result<Sequence> {
    validate(spec)?;
    let mut rng = Rng::new(derive_seed(seed, &format!("sequence/{id}")));
    let size = spec.frame_size as f64;
    let (color, shape) = match spec.target {
        Some(t) => t,
        None => (Color::ALL[rng.below(8)], Shape::ALL[rng.below(3)]),
    };
    let others: Vec<Color> = Color::ALL.iter().copied().filter(|&c| c != color).collect();
    let distractor_colors: Vec<Color> = (0..spec.distractors)
        .map(|i| match &spec.distractor_colors {
            Some(dc) => dc[i % dc.len()],
            None => others[rng.below(others.len())],
        })
        .collect();

    let r = rng.uniform_range(spec.min_radius, spec.max_radius);
    let mut target = Mover::spawn(&mut rng, size, r, spec.max_speed);
    let mut distractors: Vec<Mover> = distractor_colors
        .iter()
        .map(|_| {
            let rd = (r * rng.uniform_range(0.85, 1.15)).clamp(spec.min_radius, spec.max_radius);
            Mover::spawn(&mut rng, size, rd, spec.max_speed)
        })
        .collect();
    let mut occluders: Vec<(f64, f64, f64, f64)> = (0..spec.occluders)
        .map(|_| {
            let w = rng.uniform_range(3.0, 6.0);
            let x = rng.uniform_range(-w, size);
            let v = rng.uniform_range(-1.5, 1.5);
            let shade = rng.uniform_range(90.0, 160.0);
            (x, w, v, shade)
        })
        .collect();

    let bg = background(&mut rng, spec.frame_size);
    let mut frames = Vec::with_capacity(spec.length);
    let mut boxes = Vec::with_capacity(spec.length);
    let start = (target.x, target.y);
    for t in 0..spec.length {
        if t > 0 {
            target.step(&mut rng, size, spec.max_speed);
            for d in &mut distractors {
                d.step(&mut rng, size, spec.max_speed);
            }
            for o in &mut occluders {
                o.0 += o.2;
            }
        }
        let mut canvas: Vec<f64> = bg.iter().map(|v| v + rng.uniform_range(-4.0, 4.0)).collect();
        for (d, c) in distractors.iter().zip(&distractor_colors) {
            draw(&mut canvas, spec.frame_size, shape, d, c.rgb());
        }
        draw(&mut canvas, spec.frame_size, shape, &target, color.rgb());
        for &(x, w, _, shade) in &occluders {
            let lo = x.max(0.0).round() as usize;
            let hi = (x + w).min(size).round().max(0.0) as usize;
            for y in 0..spec.frame_size {
                for xx in lo..hi.min(spec.frame_size) {
                    canvas[(y * spec.frame_size + xx) * 3..][..3].fill(shade);
                }
            }
        }
        let mut f = Frame::new(spec.frame_size, spec.frame_size);
        for (dst, v) in f.data.iter_mut().zip(&canvas) {
            *dst = v.round().clamp(0.0, 255.0) as u8;
        }
        frames.push(f);
        boxes.push(target.bbox());
    }
    let dir = direction_word(target.x - start.0, target.y - start.1);
    let description = format!("the {} {} moving {dir}", color.name(), shape.name());
    let mut attributes = BTreeMap::new();
    attributes.insert("color".into(), color.name().into());
    attributes.insert("shape".into(), shape.name().into());
    attributes.insert("motion".into(), dir.into());
    attributes.insert("distractors".into(), spec.distractors.to_string());
    Ok(Sequence {
        name: format!("seq{id:04}"),
        frames,
        boxes,
        description,
        attributes,
    })
}

/// Sequences `first..first + count`, generated in parallel.
pub fn generate_dataset(seed: u64, first: usize, count: usize, spec: &GenSpec) -> Result<Vec<Sequence>> {
    (first..first + count)
        .into_par_iter()
        .map(|id| generate_sequence(seed, id, spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_fills_its_box() {
        let s = Shape::Triangle;
        assert!(s.sdf(10.0, 5.0, 10.0, 10.0, 5.0).abs() < 1e-12);
        assert!(s.sdf(5.0, 15.0, 10.0, 10.0, 5.0).abs() < 1e-12);
        assert!(s.sdf(15.0, 15.0, 10.0, 10.0, 5.0).abs() < 1e-12);
        assert!(s.sdf(10.0, 10.0, 10.0, 10.0, 5.0) < 0.0);
    }

    #[test]
    fn descriptions_name_target_attributes() {
        let spec = GenSpec {
            target: Some((Color::Red, Shape::Square)),
            distractor_colors: Some(vec![Color::Blue]),
            distractors: 1,
            ..GenSpec::default()
        };
        let s = generate_sequence(3, 0, &spec).unwrap();
        assert!(s.description.starts_with("the red square moving "));
        assert_eq!(s.attributes["distractors"], "1");
    }

    #[test]
    fn identical_distractor_rejected() {
        let spec = GenSpec {
            target: Some((Color::Red, Shape::Square)),
            distractor_colors: Some(vec![Color::Red]),
            ..GenSpec::default()
        };
        assert!(matches!(generate_sequence(0, 0, &spec), Err(Error::Config(_))));
    }
}
