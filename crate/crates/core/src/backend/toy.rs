//! Desk-scale inpainting backend.
//!
//! * Image codec: a fixed linear patch encoder. Latent channels 0..3 are the
//!   per-patch RGB means mapped to `[-1, 1]`; channel 3 is the checkerboard
//!   (Nyquist) component of luminance, amplified by `detail_gain`. The decoder
//!   is the matching pseudo-inverse. With `downsample = 1` the codec is exact.
//! * Text encoder: learned position table plus two residual blocks, each a
//!   bidirectional mean-pool token mixer followed by a channel MLP.
//! * Denoiser: a two-level UNet over token-major feature maps with one
//!   self-attention and one cross-attention block per resolution. The
//!   self-attention block outputs (after the output projection) are the
//!   captured hidden states.

use alloc::rc::Rc;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::params::{BoundParams, ParamId, ParamStore};
use super::{check_forward_inputs, BackendSpec, InpaintDenoiser, TraceInputs, TracedOutput};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layout;
use crate::masking::trace_context;
use crate::rng;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;

pub const LATENT_CHANNELS: usize = 4;
const TIME_FEATURES: usize = 64;
const TEXT_LAYERS: usize = 2;

/// Hidden-state layer ids, coarsest resolution last.
pub const LAYER_FINE: &str = "down.attn.fine";
pub const LAYER_COARSE: &str = "mid.attn.coarse";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    /// Square pixel side.
    pub pixel_size: usize,
    /// Pixel-to-latent downsampling factor.
    pub downsample: usize,
    /// Feature width at latent resolution.
    pub width: usize,
    /// Feature width at half latent resolution.
    pub mid_width: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub detail_gain: f64,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl Default for ToyConfig {
    /// 3x32x32 pixels, 4x16x16 latents, T = 1000.
    fn default() -> Self {
        Self {
            pixel_size: 32,
            downsample: 2,
            width: 32,
            mid_width: 64,
            embed_dim: 32,
            vocab_size: 1024,
            max_tokens: 16,
            detail_gain: 4.0,
            schedule: ScheduleConfig::default(),
            seed: 0,
        }
    }
}

impl ToyConfig {
    /// Very small network for unit tests: 3x8x8 pixels, 4x4x4 latents.
    pub fn tiny() -> Self {
        Self {
            pixel_size: 8,
            downsample: 2,
            width: 8,
            mid_width: 8,
            embed_dim: 8,
            vocab_size: 32,
            max_tokens: 8,
            ..Self::default()
        }
    }

    /// Same network with an exact (`downsample = 1`) image codec.
    pub fn identity_codec(self) -> Self {
        Self {
            downsample: 1,
            pixel_size: self.latent_size(),
            ..self
        }
    }

    pub fn latent_size(&self) -> usize {
        self.pixel_size / self.downsample
    }

    fn validate(&self) -> Result<()> {
        if self.downsample == 0 || self.pixel_size % self.downsample != 0 {
            return Err(Error::validation("pixel size must be a multiple of the downsampling factor"));
        }
        if self.latent_size() < 2 || self.latent_size() % 2 != 0 {
            return Err(Error::validation("latent side must be even"));
        }
        if self.width == 0 || self.mid_width == 0 || self.embed_dim == 0 || self.vocab_size == 0 || self.max_tokens == 0 {
            return Err(Error::validation("network dimensions must be positive"));
        }
        if self.detail_gain <= 0.0 {
            return Err(Error::validation("detail gain must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Attn {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
    o_bias: ParamId,
}

#[derive(Debug, Clone)]
struct TextLayer {
    mix: ParamId,
    up: ParamId,
    up_bias: ParamId,
    down: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    time1: ParamId,
    time1_bias: ParamId,
    time_fine: ParamId,
    time_coarse: ParamId,
    in_z: ParamId,
    in_ctx: ParamId,
    in_mask: ParamId,
    in_bias: ParamId,
    res_down: ParamId,
    res_down_bias: ParamId,
    attn_fine: Attn,
    cross_fine: Attn,
    down: ParamId,
    down_bias: ParamId,
    res_mid: ParamId,
    res_mid_bias: ParamId,
    attn_coarse: Attn,
    cross_coarse: Attn,
    up: ParamId,
    up_bias: ParamId,
    res_up: ParamId,
    res_up_bias: ParamId,
    out: ParamId,
    out_bias: ParamId,
    pos: ParamId,
    text: Vec<TextLayer>,
}

#[derive(Debug, Clone)]
struct Maps {
    z_to_tokens: Rc<[u32]>,
    mask_to_tokens: Rc<[u32]>,
    tokens_to_z: Rc<[u32]>,
    im2col_latent: Rc<[u32]>,
    im2col_mask: Rc<[u32]>,
    im2col_fine: Rc<[u32]>,
    im2col_coarse: Rc<[u32]>,
    down: Rc<[u32]>,
    up: Rc<[u32]>,
    pixel_patches: Rc<[u32]>,
}

#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: ToyConfig,
    spec: BackendSpec,
    schedule: NoiseSchedule,
    params: ParamStore,
    vocab: Tensor,
    ids: Ids,
    maps: Maps,
    encoder: Tensor,
    encoder_bias: Tensor,
}

fn dense(store: &mut ParamStore, rng: &mut rng::DetRng, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> ParamId {
    store.normal(name, &[fan_in, fan_out], gain / libm::sqrt(fan_in as f64), rng)
}

fn attn(store: &mut ParamStore, rng: &mut rng::DetRng, name: &str, width: usize, kv_in: usize) -> Attn {
    Attn {
        q: dense(store, rng, &alloc::format!("{name}.q"), width, width, 1.0),
        k: dense(store, rng, &alloc::format!("{name}.k"), kv_in, width, 1.0),
        v: dense(store, rng, &alloc::format!("{name}.v"), kv_in, width, 1.0),
        o: dense(store, rng, &alloc::format!("{name}.o"), width, width, 1.0),
        o_bias: store.zeros(&alloc::format!("{name}.o.bias"), &[width]),
    }
}

impl ToyBackend {
    /// Freshly initialized weights, seeded by `config.seed`.
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::linear(config.schedule)?;
        let mut rng = rng::seeded(rng::derive(config.seed, rng::streams::INIT, 0));
        let ls = config.latent_size();
        let (c1, c2, e) = (config.width, config.mid_width, config.embed_dim);
        let mut s = ParamStore::new();
        let r = &mut rng;
        let ids = Ids {
            time1: dense(&mut s, r, "time.1", TIME_FEATURES, TIME_FEATURES, 1.0),
            time1_bias: s.zeros("time.1.bias", &[TIME_FEATURES]),
            time_fine: dense(&mut s, r, "time.fine", TIME_FEATURES, c1, 1.0),
            time_coarse: dense(&mut s, r, "time.coarse", TIME_FEATURES, c2, 1.0),
            in_z: dense(&mut s, r, "in.z", 9 * LATENT_CHANNELS, c1, 1.0),
            in_ctx: dense(&mut s, r, "in.ctx", 9 * LATENT_CHANNELS, c1, 1.0),
            in_mask: dense(&mut s, r, "in.mask", 9, c1, 1.0),
            in_bias: s.zeros("in.bias", &[c1]),
            res_down: dense(&mut s, r, "down.res", 9 * c1, c1, 0.5),
            res_down_bias: s.zeros("down.res.bias", &[c1]),
            attn_fine: attn(&mut s, r, "down.attn", c1, c1),
            cross_fine: attn(&mut s, r, "down.cross", c1, e),
            down: dense(&mut s, r, "down.pool", 4 * c1, c2, 1.0),
            down_bias: s.zeros("down.pool.bias", &[c2]),
            res_mid: dense(&mut s, r, "mid.res", 9 * c2, c2, 0.5),
            res_mid_bias: s.zeros("mid.res.bias", &[c2]),
            attn_coarse: attn(&mut s, r, "mid.attn", c2, c2),
            cross_coarse: attn(&mut s, r, "mid.cross", c2, e),
            up: dense(&mut s, r, "up.proj", c2, c1, 1.0),
            up_bias: s.zeros("up.proj.bias", &[c1]),
            res_up: dense(&mut s, r, "up.res", 9 * c1, c1, 0.5),
            res_up_bias: s.zeros("up.res.bias", &[c1]),
            out: dense(&mut s, r, "out", 9 * c1, LATENT_CHANNELS, 0.3),
            out_bias: s.zeros("out.bias", &[LATENT_CHANNELS]),
            pos: s.normal("text.pos", &[config.max_tokens, e], 0.1, r),
            text: (0..TEXT_LAYERS)
                .map(|l| TextLayer {
                    mix: dense(&mut s, r, &alloc::format!("text.{l}.mix"), e, e, 0.5),
                    up: dense(&mut s, r, &alloc::format!("text.{l}.up"), e, 2 * e, 1.0),
                    up_bias: s.zeros(&alloc::format!("text.{l}.up.bias"), &[2 * e]),
                    down: dense(&mut s, r, &alloc::format!("text.{l}.down"), 2 * e, e, 0.5),
                })
                .collect(),
        };
        let vocab = rng::normal_tensor(
            &mut rng::seeded(rng::derive(config.seed, rng::streams::INIT, 1)),
            &[config.vocab_size, e],
        )
        .scale(1.0 / libm::sqrt(e as f64));
        let half = ls / 2;
        let f = config.downsample;
        let maps = Maps {
            z_to_tokens: layout::chw_to_tokens(LATENT_CHANNELS, ls, ls),
            mask_to_tokens: layout::chw_to_tokens(1, ls, ls),
            tokens_to_z: layout::tokens_to_chw(LATENT_CHANNELS, ls, ls),
            im2col_latent: layout::im2col3x3(ls, ls, LATENT_CHANNELS),
            im2col_mask: layout::im2col3x3(ls, ls, 1),
            im2col_fine: layout::im2col3x3(ls, ls, c1),
            im2col_coarse: layout::im2col3x3(half, half, c2),
            down: layout::space_to_depth(ls, ls, c1, 2),
            up: layout::upsample_nearest(half, half, c2, 2),
            pixel_patches: layout::chw_patches(3, config.pixel_size, config.pixel_size, f),
        };
        let (encoder, encoder_bias) = encoder_matrix(f, config.detail_gain);
        let spec = BackendSpec {
            latent_shape: [LATENT_CHANNELS, ls, ls],
            pixel_shape: [3, config.pixel_size, config.pixel_size],
            max_timestep: config.schedule.max_timestep,
            vocab_size: config.vocab_size,
            embed_dim: e,
            max_tokens: config.max_tokens,
            attention_layer_ids: vec![LAYER_FINE.to_string(), LAYER_COARSE.to_string()],
        };
        spec.validate()?;
        Ok(Self {
            config,
            spec,
            schedule,
            params: s,
            vocab,
            ids,
            maps,
            encoder,
            encoder_bias,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn spec_ref(&self) -> &BackendSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Every stored tensor in checkpoint order: the vocabulary, then parameters.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![(String::from("vocab"), self.vocab.clone())];
        out.extend(self.params.iter().map(|(n, t)| (String::from(n), t.clone())));
        out
    }

    /// Restores tensors written by [`checkpoint_tensors`](Self::checkpoint_tensors).
    pub fn load_checkpoint_tensors(&mut self, mut tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.is_empty() || tensors[0].0 != "vocab" {
            return Err(Error::contract("checkpoint must start with the vocabulary"));
        }
        let (_, vocab) = tensors.remove(0);
        vocab.expect_shape(self.vocab.shape(), "vocabulary")?;
        self.params.load(tensors)?;
        self.vocab = vocab;
        Ok(())
    }

    /// Fingerprint over configuration-independent weights (vocab + params).
    pub fn weights_fingerprint(&self) -> u64 {
        let mut h = crate::tensor::Fnv::new();
        h.write_u64(crate::tensor::fingerprint([&self.vocab]));
        h.write_u64(self.params.fingerprint());
        h.finish()
    }

    /// Text encoder with explicit parameter bindings.
    pub fn trace_encode_text_with(&self, g: &mut Graph, p: &BoundParams, tokens: Var) -> Result<Var> {
        let (n, e) = match *g.shape(tokens) {
            [n, e] => (n, e),
            ref s => return Err(Error::contract(alloc::format!("token prompt must be [tokens, dim], got {:?}", s))),
        };
        if e != self.config.embed_dim {
            return Err(Error::contract(alloc::format!(
                "token embedding dim {e}, backend expects {}",
                self.config.embed_dim
            )));
        }
        if n == 0 || n > self.config.max_tokens {
            return Err(Error::contract(alloc::format!(
                "prompt length {n} outside 1..={}",
                self.config.max_tokens
            )));
        }
        let pos_idx: Rc<[u32]> = (0..(n * e) as u32).collect();
        let pos = g.gather(p.var(self.ids.pos), pos_idx, &[n, e])?;
        let mut x = g.add(tokens, pos)?;
        let avg = g.constant(Tensor::full(&[n, n], 1.0 / n as f64));
        for layer in &self.ids.text {
            let s = g.silu(x);
            let pooled = g.matmul(avg, s)?;
            let mixed = g.matmul(pooled, p.var(layer.mix))?;
            x = g.add(x, mixed)?;
            let hdn = g.layer_norm_rows(x)?;
            let hdn = g.matmul(hdn, p.var(layer.up))?;
            let hdn = g.add_row(hdn, p.var(layer.up_bias))?;
            let hdn = g.silu(hdn);
            let hdn = g.matmul(hdn, p.var(layer.down))?;
            x = g.add(x, hdn)?;
        }
        Ok(x)
    }

    /// Denoiser with explicit parameter bindings.
    pub fn trace_forward_with(&self, g: &mut Graph, p: &BoundParams, inputs: TraceInputs<'_>) -> Result<TracedOutput> {
        check_forward_inputs(&self.spec, g, &inputs, self.schedule.max_timestep())?;
        let ls = self.config.latent_size();
        let hw = ls * ls;
        let half = ls / 2;
        let (c1, c2) = (self.config.width, self.config.mid_width);
        let m = &self.maps;
        let ids = &self.ids;

        let z = g.gather(inputs.z_t, m.z_to_tokens.clone(), &[hw, LATENT_CHANNELS])?;
        let ctx = trace_context(g, inputs.context_latent, inputs.mask)?;
        let ctx = g.gather(ctx, m.z_to_tokens.clone(), &[hw, LATENT_CHANNELS])?;
        let repaint = g.constant(inputs.mask.invert().grid().clone());
        let repaint = g.gather(repaint, m.mask_to_tokens.clone(), &[hw, 1])?;

        // timestep embedding
        let tfeat = g.constant(sinusoidal(inputs.t as f64, TIME_FEATURES));
        let temb = g.matmul(tfeat, p.var(ids.time1))?;
        let temb = g.add_row(temb, p.var(ids.time1_bias))?;
        let temb = g.silu(temb);
        let temb_fine = g.matmul(temb, p.var(ids.time_fine))?;
        let temb_coarse = g.matmul(temb, p.var(ids.time_coarse))?;

        // input convolution over [z_t, C, repaint]
        let a = conv(g, z, &m.im2col_latent, hw, 9 * LATENT_CHANNELS, p.var(ids.in_z))?;
        let b = conv(g, ctx, &m.im2col_latent, hw, 9 * LATENT_CHANNELS, p.var(ids.in_ctx))?;
        let c = conv(g, repaint, &m.im2col_mask, hw, 9, p.var(ids.in_mask))?;
        let mut h = g.add(a, b)?;
        h = g.add(h, c)?;
        h = g.add_row(h, p.var(ids.in_bias))?;
        h = g.add_row(h, temb_fine)?;

        // fine level
        h = res_block(g, h, &m.im2col_fine, hw, c1, p.var(ids.res_down), p.var(ids.res_down_bias))?;
        let normed = g.layer_norm_rows(h)?;
        let fine_hidden = attention(g, p, &ids.attn_fine, normed, normed, c1)?;
        h = g.add(h, fine_hidden)?;
        let normed = g.layer_norm_rows(h)?;
        let cross = attention(g, p, &ids.cross_fine, normed, inputs.tau, c1)?;
        h = g.add(h, cross)?;
        let skip = h;

        // coarse level
        let mut d = g.gather(h, m.down.clone(), &[half * half, 4 * c1])?;
        d = g.matmul(d, p.var(ids.down))?;
        d = g.add_row(d, p.var(ids.down_bias))?;
        d = g.add_row(d, temb_coarse)?;
        d = res_block(g, d, &m.im2col_coarse, half * half, c2, p.var(ids.res_mid), p.var(ids.res_mid_bias))?;
        let normed = g.layer_norm_rows(d)?;
        let coarse_hidden = attention(g, p, &ids.attn_coarse, normed, normed, c2)?;
        d = g.add(d, coarse_hidden)?;
        let normed = g.layer_norm_rows(d)?;
        let cross = attention(g, p, &ids.cross_coarse, normed, inputs.tau, c2)?;
        d = g.add(d, cross)?;

        // back up
        let mut u = g.gather(d, m.up.clone(), &[hw, c2])?;
        u = g.matmul(u, p.var(ids.up))?;
        u = g.add_row(u, p.var(ids.up_bias))?;
        u = g.add(u, skip)?;
        u = res_block(g, u, &m.im2col_fine, hw, c1, p.var(ids.res_up), p.var(ids.res_up_bias))?;
        let u = g.layer_norm_rows(u)?;
        let u = g.silu(u);
        let out = conv(g, u, &m.im2col_fine, hw, 9 * c1, p.var(ids.out))?;
        let out = g.add_row(out, p.var(ids.out_bias))?;
        let eps_pred = g.gather(out, m.tokens_to_z.clone(), &self.spec.latent_shape)?;

        let fine_flat = g.reshape(fine_hidden, &[hw * c1])?;
        let coarse_flat = g.reshape(coarse_hidden, &[half * half * c2])?;
        Ok(TracedOutput {
            eps_pred,
            hidden: vec![fine_flat, coarse_flat],
        })
    }
}

fn conv(g: &mut Graph, x: Var, im2col: &Rc<[u32]>, n: usize, cols: usize, w: Var) -> Result<Var> {
    let patches = g.gather(x, im2col.clone(), &[n, cols])?;
    g.matmul(patches, w)
}

fn res_block(g: &mut Graph, x: Var, im2col: &Rc<[u32]>, n: usize, c: usize, w: Var, b: Var) -> Result<Var> {
    let hdn = g.layer_norm_rows(x)?;
    let hdn = g.silu(hdn);
    let hdn = conv(g, hdn, im2col, n, 9 * c, w)?;
    let hdn = g.add_row(hdn, b)?;
    g.add(x, hdn)
}

/// Single-head scaled dot-product attention with output projection.
fn attention(g: &mut Graph, p: &BoundParams, a: &Attn, x: Var, kv: Var, width: usize) -> Result<Var> {
    let q = g.matmul(x, p.var(a.q))?;
    let k = g.matmul(kv, p.var(a.k))?;
    let v = g.matmul(kv, p.var(a.v))?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(width as f64));
    let weights = g.softmax_rows(scores)?;
    let o = g.matmul(weights, v)?;
    let o = g.matmul(o, p.var(a.o))?;
    g.add_row(o, p.var(a.o_bias))
}

/// `[1, dim]` sinusoidal embedding of a scalar timestep.
fn sinusoidal(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[1, dim], |i| {
        let k = i % half;
        let freq = libm::exp(-libm::log(10_000.0) * k as f64 / half as f64);
        if i < half {
            libm::sin(t * freq)
        } else {
            libm::cos(t * freq)
        }
    })
}

/// `[3 f^2, 4]` patch-encoder matrix and its bias row.
fn encoder_matrix(f: usize, gain: f64) -> (Tensor, Tensor) {
    let area = (f * f) as f64;
    let mut e = Tensor::zeros(&[3 * f * f, LATENT_CHANNELS]);
    for ch in 0..3 {
        for py in 0..f {
            for px in 0..f {
                let row = (ch * f + py) * f + px;
                e.data_mut()[row * LATENT_CHANNELS + ch] = 2.0 / area;
                e.data_mut()[row * LATENT_CHANNELS + 3] = gain * checker(py, px) / (3.0 * area);
            }
        }
    }
    (e, Tensor::new(&[LATENT_CHANNELS], vec![-1.0, -1.0, -1.0, 0.0]).expect("bias"))
}

fn checker(py: usize, px: usize) -> f64 {
    if (py + px) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

impl InpaintDenoiser for ToyBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn vocabulary(&self) -> &Tensor {
        &self.vocab
    }

    fn trace_encode_image(&self, g: &mut Graph, pixels: Var) -> Result<Var> {
        g.value(pixels).expect_shape(&self.spec.pixel_shape, "pixels")?;
        let f = self.config.downsample;
        let ls = self.config.latent_size();
        let patches = g.gather(pixels, self.maps.pixel_patches.clone(), &[ls * ls, 3 * f * f])?;
        let enc = g.constant(self.encoder.clone());
        let bias = g.constant(self.encoder_bias.clone());
        let z = g.matmul(patches, enc)?;
        let z = g.add_row(z, bias)?;
        g.gather(z, self.maps.tokens_to_z.clone(), &self.spec.latent_shape)
    }

    fn trace_encode_text(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let p = self.params.bind(g, false);
        self.trace_encode_text_with(g, &p, tokens)
    }

    fn trace_forward(&self, g: &mut Graph, inputs: TraceInputs<'_>) -> Result<TracedOutput> {
        let p = self.params.bind(g, false);
        self.trace_forward_with(g, &p, inputs)
    }

    fn decode_image(&self, latent: &Tensor) -> Result<Tensor> {
        latent.expect_shape(&self.spec.latent_shape, "latent")?;
        let f = self.config.downsample;
        let (ls, ps) = (self.config.latent_size(), self.config.pixel_size);
        let z = latent.data();
        let cell = |ch: usize, y: usize, x: usize| z[(ch * ls + y) * ls + x];
        Ok(Tensor::from_fn(&[3, ps, ps], |i| {
            let (ch, y, x) = (i / (ps * ps), (i / ps) % ps, i % ps);
            let (ly, lx) = (y / f, x / f);
            let mut v = (cell(ch, ly, lx) + 1.0) / 2.0;
            if f > 1 {
                v += checker(y % f, x % f) * cell(3, ly, lx) / self.config.detail_gain;
            }
            v.clamp(0.0, 1.0)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{ContextImage, InpaintMask};

    fn smooth_image(size: usize) -> Tensor {
        Tensor::from_fn(&[3, size, size], |i| {
            let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
            0.5 + 0.3 * libm::sin(0.15 * (x as f64) + 0.1 * c as f64) * libm::cos(0.12 * y as f64)
        })
    }

    #[test]
    fn encode_shape_and_identity_codec_roundtrip() {
        let b = ToyBackend::new(ToyConfig::default().identity_codec()).unwrap();
        let [_, p, _] = b.spec.pixel_shape;
        let x = smooth_image(p);
        let z = b.encode_image(&x).unwrap();
        assert_eq!(z.shape(), &b.spec.latent_shape);
        let back = b.decode_image(&z).unwrap();
        let mse = back.sub(&x).unwrap().sum_sq() / x.len() as f64;
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn default_codec_reconstructs_smooth_images() {
        let b = ToyBackend::new(ToyConfig::default()).unwrap();
        let x = smooth_image(32);
        let z = b.encode_image(&x).unwrap();
        assert_eq!(z.shape(), &[4, 16, 16]);
        let back = b.decode_image(&z).unwrap();
        let mse = back.sub(&x).unwrap().sum_sq() / x.len() as f64;
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn encode_rejects_out_of_range_pixels() {
        let b = ToyBackend::new(ToyConfig::tiny()).unwrap();
        let mut x = Tensor::full(&[3, 8, 8], 0.5);
        x.data_mut()[3] = 1.5;
        assert!(matches!(b.encode_image(&x), Err(Error::Validation(_))));
    }

    #[test]
    fn null_embedding_is_zero_prompt_encoding() {
        let b = ToyBackend::new(ToyConfig::tiny()).unwrap();
        let zeros = Tensor::zeros(&[4, 8]);
        assert_eq!(b.encode_text(&zeros).unwrap(), b.null_text_embedding(4).unwrap());
    }

    #[test]
    fn text_encoder_rejects_wrong_dim() {
        let b = ToyBackend::new(ToyConfig::tiny()).unwrap();
        assert!(matches!(b.encode_text(&Tensor::zeros(&[4, 5])), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_rejects_bad_timestep_and_shapes() {
        let b = ToyBackend::new(ToyConfig::tiny()).unwrap();
        let x = ContextImage::new(&b, Tensor::full(&[3, 8, 8], 0.5), "t").unwrap();
        let m = InpaintMask::full(8, 8, 2, 1.0).unwrap();
        let tau = b.null_text_embedding(4).unwrap();
        let z = Tensor::zeros(&[4, 4, 4]);
        assert!(matches!(b.forward(&z, 1001, &x, &m, &tau), Err(Error::OutOfRange { .. })));
        assert!(matches!(
            b.forward(&Tensor::zeros(&[4, 4, 3]), 10, &x, &m, &tau),
            Err(Error::Contract(_))
        ));
        let out = b.forward(&z, 10, &x, &m, &tau).unwrap();
        assert_eq!(out.eps_pred.shape(), &[4, 4, 4]);
        assert_eq!(out.hidden.entries.len(), b.spec.attention_layer_ids.len());
    }
}
