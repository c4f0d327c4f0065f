//! The inpainting-denoiser contract consumed by every downstream stage.
//!
//! A backend exposes graph-level ("traced") versions of its three networks so
//! that losses built on top of it can be differentiated with respect to
//! context pixels and token embeddings. Plain-tensor conveniences are provided
//! on top of the traced versions.
//!
//! Conditioning follows the usual latent inpainter layout: the denoiser sees
//! the noisy latent, the masked context latent `C = M * X` and a repaint
//! channel equal to the inverted mask (`1` where content is generated).

pub mod params;
pub mod toy;
pub mod train;

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::masking::{ContextImage, InpaintMask};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Fnv, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BackendSpec {
    /// `(channels, height, width)` of the diffusion latent.
    pub latent_shape: [usize; 3],
    /// `(3, height, width)` of the pixel image.
    pub pixel_shape: [usize; 3],
    pub max_timestep: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Longest token prompt the text encoder accepts.
    pub max_tokens: usize,
    pub attention_layer_ids: Vec<String>,
}

impl BackendSpec {
    pub fn validate(&self) -> Result<()> {
        let [_, lh, lw] = self.latent_shape;
        let [pc, ph, pw] = self.pixel_shape;
        if pc != 3 {
            return Err(Error::contract("pixel images must have 3 channels"));
        }
        if lh == 0 || lw == 0 || ph % lh != 0 || pw % lw != 0 || ph / lh != pw / lw {
            return Err(Error::contract(alloc::format!(
                "latent {:?} does not evenly downsample pixels {:?}",
                self.latent_shape,
                self.pixel_shape
            )));
        }
        if self.attention_layer_ids.is_empty() {
            return Err(Error::contract("backend exposes no attention layers"));
        }
        Ok(())
    }

    pub fn downsample_factor(&self) -> usize {
        self.pixel_shape[1] / self.latent_shape[1]
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.attention_layer_ids.iter().position(|l| l == id)
    }
}

/// Where a bundle came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Provenance {
    pub noise_seed: u64,
    pub conditioning_hash: u64,
}

/// Flattened self-attention block outputs from one denoiser pass, in
/// `attention_layer_ids` order.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateBundle {
    pub entries: Vec<(String, Tensor)>,
    pub timestep: usize,
    pub provenance: Provenance,
}

impl HiddenStateBundle {
    pub fn total_dim(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    pub fn layer(&self, id: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(l, _)| l == id).map(|(_, t)| t)
    }

    /// Layer ids and lengths agree.
    pub fn same_layout(&self, other: &HiddenStateBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ta), (b, tb))| a == b && ta.len() == tb.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub eps_pred: Tensor,
    pub hidden: HiddenStateBundle,
}

/// Graph inputs to one denoiser evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TraceInputs<'m> {
    /// Noisy latent, `latent_shape`.
    pub z_t: Var,
    pub t: usize,
    /// Unmasked latent of the context image, `latent_shape`. The backend
    /// applies the mask itself.
    pub context_latent: Var,
    pub mask: &'m InpaintMask,
    /// Text embedding, `[tokens, embed_dim]`.
    pub tau: Var,
}

/// Graph handles for the outputs of one denoiser evaluation.
#[derive(Debug, Clone)]
pub struct TracedOutput {
    pub eps_pred: Var,
    /// Flattened attention outputs, in `attention_layer_ids` order.
    pub hidden: Vec<Var>,
}

pub trait InpaintDenoiser {
    fn spec(&self) -> &BackendSpec;

    fn schedule(&self) -> &NoiseSchedule;

    /// Token embedding table, `[vocab_size, embed_dim]`.
    fn vocabulary(&self) -> &Tensor;

    /// Pixels `[3, H, W]` in `[0, 1]` to latent. No range validation here.
    fn trace_encode_image(&self, g: &mut Graph, pixels: Var) -> Result<Var>;

    /// Token embeddings `[tokens, embed_dim]` to text embedding.
    fn trace_encode_text(&self, g: &mut Graph, tokens: Var) -> Result<Var>;

    fn trace_forward(&self, g: &mut Graph, inputs: TraceInputs<'_>) -> Result<TracedOutput>;

    /// Latent to pixels in `[0, 1]`. Not differentiable.
    fn decode_image(&self, latent: &Tensor) -> Result<Tensor>;

    fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_shape(&self.spec().pixel_shape, "encode_image")
            .map_err(|e| Error::Validation(alloc::format!("{e}")))?;
        if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(alloc::format!("pixel value {v} outside [0, 1]")));
        }
        let mut g = Graph::new();
        let px = g.constant(x.clone());
        let z = self.trace_encode_image(&mut g, px)?;
        Ok(g.value(z).clone())
    }

    fn encode_text(&self, pi: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = g.constant(pi.clone());
        let tau = self.trace_encode_text(&mut g, p)?;
        Ok(g.value(tau).clone())
    }

    /// Text embedding of the all-zero prompt of `tokens` rows.
    fn null_text_embedding(&self, tokens: usize) -> Result<Tensor> {
        self.encode_text(&Tensor::zeros(&[tokens, self.spec().embed_dim]))
    }

    fn forward(
        &self,
        z_t: &Tensor,
        t: usize,
        context: &ContextImage,
        mask: &InpaintMask,
        tau: &Tensor,
    ) -> Result<DenoiserOutput> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let c = g.constant(context.latent().clone());
        let tau_v = g.constant(tau.clone());
        let out = self.trace_forward(
            &mut g,
            TraceInputs {
                z_t: z,
                t,
                context_latent: c,
                mask,
                tau: tau_v,
            },
        )?;
        let hidden = collect_bundle(self.spec(), &g, &out, t, conditioning_hash(t, context.latent(), mask, tau));
        Ok(DenoiserOutput {
            eps_pred: g.value(out.eps_pred).clone(),
            hidden,
        })
    }
}

/// Materializes traced hidden states into a bundle.
pub fn collect_bundle(spec: &BackendSpec, g: &Graph, out: &TracedOutput, t: usize, conditioning_hash: u64) -> HiddenStateBundle {
    HiddenStateBundle {
        entries: spec
            .attention_layer_ids
            .iter()
            .cloned()
            .zip(out.hidden.iter().map(|&v| g.value(v).clone()))
            .collect(),
        timestep: t,
        provenance: Provenance {
            noise_seed: 0,
            conditioning_hash,
        },
    }
}

pub fn conditioning_hash(t: usize, context_latent: &Tensor, mask: &InpaintMask, tau: &Tensor) -> u64 {
    let mut h = Fnv::new();
    h.write_u64(t as u64);
    h.write_u64(crate::tensor::fingerprint([context_latent, mask.grid(), tau]));
    h.finish()
}

/// Validates the common forward preconditions.
pub(crate) fn check_forward_inputs(spec: &BackendSpec, g: &Graph, inputs: &TraceInputs<'_>, max_t: usize) -> Result<()> {
    let latent = spec.latent_shape;
    g.value(inputs.z_t).expect_shape(&latent, "z_t")?;
    g.value(inputs.context_latent).expect_shape(&latent, "context latent")?;
    inputs.mask.grid().expect_shape(&[1, latent[1], latent[2]], "mask grid")?;
    match *g.shape(inputs.tau) {
        [n, e] if e == spec.embed_dim && n >= 1 => {}
        ref s => {
            return Err(Error::contract(alloc::format!(
                "tau: expected [tokens, {}], got {:?}",
                spec.embed_dim,
                s
            )))
        }
    }
    if inputs.t > max_t {
        return Err(Error::OutOfRange {
            what: "timestep",
            value: inputs.t as i64,
            min: 0,
            max: max_t as i64,
        });
    }
    Ok(())
}
