//! Sequences, synthetic generation, dataset I/O and region cropping.

pub mod crop;
pub mod loader;
pub mod synth;

use std::collections::BTreeMap;

use crate::head::BBox;

pub use crop::{make_sample, sample_pair, CropConfig, CropMeta, TrackSample};
pub use loader::{load_dataset, load_sequence, write_dataset, write_sequence};
pub use synth::{generate_dataset, generate_sequence, Color, GenSpec, Shape};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    /// Channel value in `[0, 1]`.
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
    }

    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64 * 255.0;
        m.map(|v| v / n)
    }

    /// Scales the image by an integer factor with nearest-neighbour sampling.
    pub fn upscale(&self, k: usize) -> Frame {
        let mut out = Frame::new(self.width * k, self.height * k);
        for y in 0..out.height {
            for x in 0..out.width {
                let src = ((y / k) * self.width + x / k) * 3;
                let dst = (y * out.width + x) * 3;
                out.data[dst..dst + 3].copy_from_slice(&self.data[src..src + 3]);
            }
        }
        out
    }
}

/// One video with per-frame boxes in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub boxes: Vec<BBox>,
    pub description: String,
    pub attributes: BTreeMap<String, String>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
