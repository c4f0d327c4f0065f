//! Context construction, mask algebra and perturbation bookkeeping.
//!
//! Masks use context semantics throughout: `1` marks pixels the editor keeps,
//! `0` marks the region to inpaint. A latent cell is context iff at least half
//! of its pixel footprint is context.

use alloc::string::String;

use crate::attack::AttackBudget;
use crate::autodiff::{Graph, Var};
use crate::backend::InpaintDenoiser;
use crate::error::{Error, Result};
use crate::layout;
use crate::tensor::Tensor;

/// Slack allowed on the budget check for floating-point rounding of `x + delta - x`.
pub const BUDGET_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintMask {
    /// `[1, h, w]` at latent resolution.
    grid: Tensor,
    /// `[1, H, W]` at pixel resolution.
    pixel_grid: Tensor,
}

impl InpaintMask {
    /// Builds a mask from a binary pixel map (`[H, W]` or `[1, H, W]`),
    /// downsampling by `factor` with the at-least-half-context rule.
    pub fn from_pixels(pixels: &Tensor, factor: usize) -> Result<Self> {
        let (h, w) = match *pixels.shape() {
            [h, w] | [1, h, w] => (h, w),
            ref s => return Err(Error::validation(alloc::format!("mask must be [H, W], got {:?}", s))),
        };
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::validation(alloc::format!(
                "mask {h}x{w} not divisible by downsampling factor {factor}"
            )));
        }
        if let Some(v) = pixels.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::validation(alloc::format!("mask value {v} is not binary")));
        }
        let (lh, lw) = (h / factor, w / factor);
        let area = (factor * factor) as f64;
        let grid = Tensor::from_fn(&[1, lh, lw], |i| {
            let (y, x) = (i / lw, i % lw);
            let mut ctx = 0.0;
            for py in 0..factor {
                for px in 0..factor {
                    ctx += pixels.data()[(y * factor + py) * w + x * factor + px];
                }
            }
            if 2.0 * ctx >= area {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            grid,
            pixel_grid: pixels.clone().reshape(&[1, h, w])?,
        })
    }

    pub fn full(height: usize, width: usize, factor: usize, value: f64) -> Result<Self> {
        Self::from_pixels(&Tensor::full(&[height, width], value), factor)
    }

    /// Context rectangle `[y0, y1) x [x0, x1)` on an otherwise-inpainted canvas
    /// when `keep_inside`, or the complement.
    pub fn rectangle(height: usize, width: usize, factor: usize, rect: [usize; 4], keep_inside: bool) -> Result<Self> {
        let [y0, y1, x0, x1] = rect;
        let px = Tensor::from_fn(&[height, width], |i| {
            let (y, x) = (i / width, i % width);
            let inside = y >= y0 && y < y1 && x >= x0 && x < x1;
            if inside == keep_inside {
                1.0
            } else {
                0.0
            }
        });
        Self::from_pixels(&px, factor)
    }

    /// Latent-resolution grid, `[1, h, w]`.
    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    /// Pixel-resolution grid, `[1, H, W]`.
    pub fn pixel_grid(&self) -> &Tensor {
        &self.pixel_grid
    }

    /// Flips context and inpaint regions at both resolutions. The latent grid
    /// is complemented directly rather than re-derived, so the map is an
    /// involution even on cells split exactly in half.
    pub fn invert(&self) -> Self {
        Self {
            grid: self.grid.map(|v| 1.0 - v),
            pixel_grid: self.pixel_grid.map(|v| 1.0 - v),
        }
    }

    /// Latent mask broadcast across `channels`, `[channels, h, w]`.
    pub fn latent_broadcast(&self, channels: usize) -> Tensor {
        let hw = self.grid.len();
        let (h, w) = (self.grid.shape()[1], self.grid.shape()[2]);
        Tensor::from_fn(&[channels, h, w], |i| self.grid.data()[i % hw])
    }

    /// Pixel mask broadcast across `channels`, `[channels, H, W]`.
    pub fn pixel_broadcast(&self, channels: usize) -> Tensor {
        let hw = self.pixel_grid.len();
        let (h, w) = (self.pixel_grid.shape()[1], self.pixel_grid.shape()[2]);
        Tensor::from_fn(&[channels, h, w], |i| self.pixel_grid.data()[i % hw])
    }

    pub fn context_fraction(&self) -> f64 {
        self.grid.mean()
    }
}

/// Same as [`invert_mask`] as a free function.
pub fn invert_mask(m: &InpaintMask) -> InpaintMask {
    m.invert()
}

/// Pixels in `[0, 1]` plus their cached latent encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextImage {
    pixels: Tensor,
    latent: Tensor,
    source_path: String,
}

impl ContextImage {
    pub fn new<B: InpaintDenoiser + ?Sized>(backend: &B, pixels: Tensor, source_path: impl Into<String>) -> Result<Self> {
        let latent = backend.encode_image(&pixels)?;
        Ok(Self {
            pixels,
            latent,
            source_path: source_path.into(),
        })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn latent(&self) -> &Tensor {
        &self.latent
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }

    /// Re-encodes new pixels, keeping the source label.
    pub fn with_pixels<B: InpaintDenoiser + ?Sized>(&self, backend: &B, pixels: Tensor) -> Result<Self> {
        Self::new(backend, pixels, self.source_path.clone())
    }
}

/// `C = M * X` in latent space, with the mask broadcast across channels.
pub fn make_context(x: &ContextImage, m: &InpaintMask) -> Result<Tensor> {
    let latent = x.latent();
    let (c, h, w) = dims3(latent)?;
    if m.grid().shape() != [1, h, w] {
        return Err(Error::validation(alloc::format!(
            "mask grid {:?} does not match latent {:?}",
            m.grid().shape(),
            latent.shape()
        )));
    }
    latent.mul(&m.latent_broadcast(c))
}

/// Graph version of [`make_context`]; gradients flow into `latent`.
pub fn trace_context(g: &mut Graph, latent: Var, m: &InpaintMask) -> Result<Var> {
    let (c, h, w) = dims3(g.value(latent))?;
    if m.grid().shape() != [1, h, w] {
        return Err(Error::validation("mask grid does not match latent"));
    }
    let grid = g.constant(m.grid().clone());
    let mask = g.gather(grid, layout::broadcast_channels(c, h * w), &[c, h, w])?;
    g.mul(latent, mask)
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::contract(alloc::format!("expected [c, h, w], got {:?}", s))),
    }
}

/// Pixel-space perturbation under a budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor,
    pub budget: AttackBudget,
}

impl Perturbation {
    pub fn zeros(shape: &[usize], budget: AttackBudget) -> Self {
        Self {
            delta: Tensor::zeros(shape),
            budget,
        }
    }

    /// Checks the norm bound of `delta`.
    pub fn check_budget(&self) -> Result<()> {
        let n = self.budget.norm.measure(&self.delta);
        if n > self.budget.epsilon + BUDGET_SLACK {
            return Err(Error::Budget(alloc::format!(
                "{} norm {} exceeds epsilon {}",
                self.budget.norm.name(),
                n,
                self.budget.epsilon
            )));
        }
        Ok(())
    }
}

/// Returns the clamped `x + delta` re-encoded; `x` is untouched.
pub fn apply_perturbation<B: InpaintDenoiser + ?Sized>(backend: &B, x: &ContextImage, p: &Perturbation) -> Result<ContextImage> {
    x.pixels().expect_shape(p.delta.shape(), "perturbation")?;
    p.check_budget()?;
    let pixels = x.pixels().zip_map(&p.delta, |a, d| (a + d).clamp(0.0, 1.0))?;
    x.with_pixels(backend, pixels)
}
