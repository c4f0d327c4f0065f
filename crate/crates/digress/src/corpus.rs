//! Procedural toy corpus: anti-aliased shapes on gradient backgrounds with
//! token captions and object-preserving masks.
//!
//! Each sample keeps a rectangle around the object as context and marks the
//! rest of the frame for inpainting. Caption ids come from disjoint token
//! ranges per attribute, padded to a fixed length.

use std::path::Path;

use digress_core::backend::train::TrainingSample;
use digress_core::masking::InpaintMask;
use digress_core::rng;
use digress_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::io;

pub const CAPTION_LEN: usize = 8;
pub const PAD_TOKEN: usize = 1;
const SHAPE_BASE: usize = 100;
const COLOR_BASE: usize = 200;
const SIZE_BASE: usize = 300;
const BACKGROUND_BASE: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
}

const SHAPES: [Shape; 6] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Ring,
    Shape::Cross,
];

const COLORS: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.12],
    [0.12, 0.62, 0.2],
    [0.15, 0.3, 0.85],
    [0.95, 0.8, 0.1],
    [0.6, 0.2, 0.7],
    [0.1, 0.75, 0.8],
    [0.95, 0.5, 0.1],
    [0.92, 0.92, 0.92],
];

const BACKGROUNDS: [([f64; 3], [f64; 3]); 6] = [
    ([0.55, 0.7, 0.9], [0.85, 0.9, 0.95]),
    ([0.3, 0.5, 0.25], [0.55, 0.7, 0.4]),
    ([0.85, 0.75, 0.55], [0.7, 0.55, 0.35]),
    ([0.2, 0.2, 0.25], [0.4, 0.4, 0.45]),
    ([0.9, 0.85, 0.8], [0.75, 0.7, 0.68]),
    ([0.35, 0.2, 0.3], [0.6, 0.4, 0.45]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub shape: Shape,
    pub color: usize,
    pub background: usize,
    pub large: bool,
    pub center: (f64, f64),
    pub radius: f64,
}

impl SampleSpec {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Self {
        let s = size as f64;
        let large = rng.random::<bool>();
        let radius = s * if large { rng.random_range(0.28..0.36) } else { rng.random_range(0.17..0.24) };
        let jitter = s * 0.1;
        let center = (
            s / 2.0 + rng.random_range(-jitter..jitter),
            s / 2.0 + rng.random_range(-jitter..jitter),
        );
        Self {
            shape: SHAPES[rng.random_range(0..SHAPES.len())],
            color: rng.random_range(0..COLORS.len()),
            background: rng.random_range(0..BACKGROUNDS.len()),
            large,
            center,
            radius,
        }
    }

    pub fn caption(&self) -> Vec<usize> {
        let shape = SHAPES.iter().position(|s| *s == self.shape).expect("known shape");
        let mut c = vec![
            SHAPE_BASE + shape,
            COLOR_BASE + self.color,
            SIZE_BASE + self.large as usize,
            BACKGROUND_BASE + self.background,
        ];
        c.resize(CAPTION_LEN, PAD_TOKEN);
        c
    }

    fn inside(&self, y: f64, x: f64) -> bool {
        let (cy, cx) = self.center;
        let (dy, dx) = (y - cy, x - cx);
        let r = self.radius;
        match self.shape {
            Shape::Circle => dy * dy + dx * dx <= r * r,
            Shape::Square => dy.abs() <= r * 0.85 && dx.abs() <= r * 0.85,
            Shape::Diamond => dy.abs() + dx.abs() <= r,
            Shape::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            Shape::Cross => (dy.abs() <= r * 0.3 && dx.abs() <= r) || (dx.abs() <= r * 0.3 && dy.abs() <= r),
            Shape::Triangle => {
                let top = cy - r;
                let bottom = cy + 0.8 * r;
                if y < top || y > bottom {
                    return false;
                }
                let half = r * (y - top) / (bottom - top);
                dx.abs() <= half
            }
        }
    }

    /// Pixels `[3, size, size]`, supersampled 4x4 per pixel.
    pub fn render(&self, size: usize) -> Tensor {
        let (top, bottom) = BACKGROUNDS[self.background];
        let fg = COLORS[self.color];
        let mut out = Tensor::zeros(&[3, size, size]);
        let d = out.data_mut();
        const SS: usize = 4;
        for y in 0..size {
            let v = y as f64 / (size - 1).max(1) as f64;
            for x in 0..size {
                let mut cover = 0.0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        if self.inside(py, px) {
                            cover += 1.0;
                        }
                    }
                }
                cover /= (SS * SS) as f64;
                for c in 0..3 {
                    let bg = top[c] * (1.0 - v) + bottom[c] * v;
                    d[c * size * size + y * size + x] = bg * (1.0 - cover) + fg[c] * cover;
                }
            }
        }
        out
    }

    /// Context rectangle: the object's bounding box plus a margin, snapped
    /// outward to the latent grid.
    pub fn mask(&self, size: usize, factor: usize) -> digress_core::Result<InpaintMask> {
        let (cy, cx) = self.center;
        let r = self.radius + 1.5;
        let snap_lo = |v: f64| ((v.floor().max(0.0) as usize) / factor) * factor;
        let snap_hi = |v: f64| (v.ceil() as usize).div_ceil(factor).saturating_mul(factor).min(size);
        let rect = [snap_lo(cy - r), snap_hi(cy + r), snap_lo(cx - r), snap_hi(cx + r)];
        InpaintMask::rectangle(size, size, factor, rect, true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub caption: Vec<usize>,
    pub spec: SampleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub size: usize,
    pub factor: usize,
    pub seed: u64,
    pub entries: Vec<CorpusEntry>,
}

pub const INDEX_FILE: &str = "corpus.json";

/// Sample specs for a corpus of `count` images.
pub fn generate_specs(count: usize, size: usize, seed: u64) -> Vec<SampleSpec> {
    (0..count)
        .map(|i| SampleSpec::random(&mut rng::seeded(rng::derive(seed, 0xC0, i as u64)), size))
        .collect()
}

/// Writes images, masks and the index under `dir`.
pub fn write_corpus(dir: &Path, count: usize, size: usize, factor: usize, seed: u64) -> Result<CorpusIndex> {
    let mut entries = Vec::with_capacity(count);
    for (i, spec) in generate_specs(count, size, seed).into_iter().enumerate() {
        let id = format!("{i:04}");
        let image = format!("images/{id}.png");
        let mask = format!("masks/{id}.png");
        io::write_png(&dir.join(&image), &spec.render(size))?;
        let m = spec.mask(size, factor).map_err(|e| AppError::Usage(e.to_string()))?;
        io::write_mask(&dir.join(&mask), &m)?;
        entries.push(CorpusEntry {
            id,
            image,
            mask,
            caption: spec.caption(),
            spec,
        });
    }
    let index = CorpusIndex {
        size,
        factor,
        seed,
        entries,
    };
    io::write_json(&dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<CorpusIndex> {
    io::read_json(&dir.join(INDEX_FILE))
}

/// Loads every entry as a training sample, through the PNG files.
pub fn load_samples(dir: &Path) -> Result<Vec<TrainingSample>> {
    let index = read_index(dir)?;
    index
        .entries
        .iter()
        .map(|e| {
            Ok(TrainingSample {
                pixels: io::read_image(&dir.join(&e.image))?,
                mask: io::read_mask(&dir.join(&e.mask), index.factor)?,
                caption: e.caption.clone(),
            })
        })
        .collect()
}
