//! Toy multi-layer transparency decoder.
//!
//! `Linear_in → pre-norm transformer blocks (3D rotary attention + GELU MLP)
//! → LayerNorm → Linear_out`, where each output token is reshaped into a
//! `patch_px × patch_px × 4` RGBA patch and placed at its `(row, col)` id.
//! Gradients are computed by hand and checked against finite differences.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{mha_backward, mha_forward, HeadCache};
use crate::error::{Error, Result};
use crate::latent::{encode_multilayer, stream_boxes, LatentSequence, PipelineConfig, Stream};
use crate::layout::{ceiling_aligned_crop, AnonymousRegionLayout, PixelBox};
use crate::raster::Raster;
use crate::rope::{rope_3d, RopeFrequencies, RopeSpec};
use crate::transparency::MultiLayerImage;

const LN_EPS: f64 = 1e-6;

/// Which reconstruction streams besides the foregrounds are supervised.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Conditioning {
    pub merged: bool,
    pub background: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamWeights {
    pub foreground: f64,
    pub merged: f64,
    pub background: f64,
}

impl Default for StreamWeights {
    fn default() -> Self {
        Self {
            foreground: 1.0,
            merged: 1.0,
            background: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub depth: usize,
    pub hidden: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    /// Channels per input token.
    pub in_channels: usize,
    /// Pixel side of the patch decoded from one token.
    pub patch_px: usize,
    pub rope: RopeSpec,
    pub condition_on: Conditioning,
    pub weights: StreamWeights,
    /// Quadratic zone of the smoothed L1 used for training gradients.
    pub smooth_l1_delta: f64,
    pub init_std: f64,
}

impl DecoderConfig {
    /// Small default sized for CPU training on the given token pipeline.
    pub fn toy(pipe: &PipelineConfig) -> Self {
        Self {
            depth: 2,
            hidden: 64,
            mlp_dim: 128,
            heads: 4,
            in_channels: pipe.token_dim(),
            patch_px: pipe.alignment(),
            rope: RopeSpec::default(),
            condition_on: Conditioning::default(),
            weights: StreamWeights::default(),
            smooth_l1_delta: 1e-3,
            init_std: 0.02,
        }
    }

    /// ViT-Base sized decoder on unpatched 16-channel latents (8×8×4 = 256
    /// outputs per token).
    pub fn full_scale() -> Self {
        Self {
            depth: 12,
            hidden: 768,
            mlp_dim: 3072,
            heads: 12,
            in_channels: 16,
            patch_px: 8,
            rope: RopeSpec {
                axes_dim: [16, 24, 24],
                theta: crate::rope::DEFAULT_THETA,
            },
            condition_on: Conditioning::default(),
            weights: StreamWeights::default(),
            smooth_l1_delta: 1e-3,
            init_std: 0.02,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn out_dim(&self) -> usize {
        self.patch_px * self.patch_px * 4
    }

    pub fn validate(&self) -> Result<()> {
        self.rope.validate()?;
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.head_dim() != self.rope.head_dim() {
            return Err(Error::Config(format!(
                "head dim {} != rotary axes sum {}",
                self.head_dim(),
                self.rope.head_dim()
            )));
        }
        if self.in_channels == 0 || self.patch_px == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("zero-sized decoder dimension".into()));
        }
        Ok(())
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        let (h, m) = (self.hidden, self.mlp_dim);
        let block = 2 * 2 * h + 4 * (h * h + h) + (h * m + m) + (m * h + h);
        (self.in_channels * h + h) + self.depth * block + 2 * h + (h * self.out_dim() + self.out_dim())
    }

    fn supervised(&self, stream: Stream) -> Option<(f64, usize)> {
        match stream {
            Stream::Foreground(_) => Some((self.weights.foreground, 4)),
            Stream::Merged if self.condition_on.merged => Some((self.weights.merged, 3)),
            Stream::Background if self.condition_on.background => Some((self.weights.background, 3)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    w_in: usize,
    b_in: usize,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Weight,
    Zero,
    One,
}

fn build_index(cfg: &DecoderConfig) -> (Vec<ParamSlice>, Vec<Init>, Offsets) {
    let mut index = Vec::new();
    let mut inits = Vec::new();
    let mut offset = 0;
    let mut add = |name: String, shape: Vec<usize>, init: Init| -> usize {
        let at = offset;
        offset += shape.iter().product::<usize>();
        index.push(ParamSlice {
            name,
            offset: at,
            shape,
        });
        inits.push(init);
        at
    };
    let (h, m, o) = (cfg.hidden, cfg.mlp_dim, cfg.out_dim());
    let w_in = add("linear_in.weight".into(), vec![cfg.in_channels, h], Init::Weight);
    let b_in = add("linear_in.bias".into(), vec![h], Init::Zero);
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{i}.{s}");
        blocks.push(BlockOffsets {
            ln1_g: add(p("norm1.gamma"), vec![h], Init::One),
            ln1_b: add(p("norm1.beta"), vec![h], Init::Zero),
            wq: add(p("attn.q.weight"), vec![h, h], Init::Weight),
            bq: add(p("attn.q.bias"), vec![h], Init::Zero),
            wk: add(p("attn.k.weight"), vec![h, h], Init::Weight),
            bk: add(p("attn.k.bias"), vec![h], Init::Zero),
            wv: add(p("attn.v.weight"), vec![h, h], Init::Weight),
            bv: add(p("attn.v.bias"), vec![h], Init::Zero),
            wo: add(p("attn.out.weight"), vec![h, h], Init::Weight),
            bo: add(p("attn.out.bias"), vec![h], Init::Zero),
            ln2_g: add(p("norm2.gamma"), vec![h], Init::One),
            ln2_b: add(p("norm2.beta"), vec![h], Init::Zero),
            w1: add(p("mlp.fc1.weight"), vec![h, m], Init::Weight),
            b1: add(p("mlp.fc1.bias"), vec![m], Init::Zero),
            w2: add(p("mlp.fc2.weight"), vec![m, h], Init::Weight),
            b2: add(p("mlp.fc2.bias"), vec![h], Init::Zero),
        });
    }
    let lnf_g = add("norm_out.gamma".into(), vec![h], Init::One);
    let lnf_b = add("norm_out.beta".into(), vec![h], Init::Zero);
    let w_out = add("linear_out.weight".into(), vec![h, o], Init::Zero);
    let b_out = add("linear_out.bias".into(), vec![o], Init::Zero);
    (
        index,
        inits,
        Offsets {
            w_in,
            b_in,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
        },
    )
}

/// Flat parameter vector plus its named index.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub values: Vec<f64>,
    pub index: Vec<ParamSlice>,
}

impl Parameters {
    /// Truncated-normal weights (std `cfg.init_std`, cut at 2σ), zero biases,
    /// unit norm gains, zero output projection.
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (index, inits, _) = build_index(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut values = vec![0.0; cfg.param_count()];
        for (slice, init) in index.iter().zip(&inits) {
            for v in &mut values[slice.range()] {
                *v = match init {
                    Init::Zero => 0.0,
                    Init::One => 1.0,
                    Init::Weight => loop {
                        let z: f64 = normal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break z * cfg.init_std;
                        }
                    },
                };
            }
        }
        Ok(Self { values, index })
    }

    /// Every parameter drawn from `N(0, std²)`, gains around 1. Used to get
    /// non-degenerate gradients everywhere for checking.
    pub fn random(cfg: &DecoderConfig, seed: u64, std: f64) -> Result<Self> {
        let mut p = Self::init(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let (_, inits, _) = build_index(cfg);
        for (slice, init) in p.index.iter().zip(&inits) {
            let base = if matches!(init, Init::One) { 1.0 } else { 0.0 };
            for v in &mut p.values[slice.range()] {
                *v = base + normal.sample(&mut rng);
            }
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.index.iter().find(|s| s.name == name)?.range();
        Some(&mut self.values[range])
    }

    /// Name of the parameter tensor holding flat coordinate `i`.
    pub fn name_of(&self, i: usize) -> Option<&str> {
        self.index
            .iter()
            .find(|s| s.range().contains(&i))
            .map(|s| s.name.as_str())
    }
}

fn linear(x: &[f64], n: usize, din: usize, w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * dout);
    for i in 0..n {
        y.extend_from_slice(b);
        let row = &mut y[i * dout..(i + 1) * dout];
        for (k, &xv) in x[i * din..(i + 1) * din].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yv, wv) in row.iter_mut().zip(&w[k * dout..(k + 1) * dout]) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Accumulate `dW += xᵀ dy`, `db += Σ dy`; return `dx = dy Wᵀ` when asked.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &[f64],
    dy: &[f64],
    n: usize,
    din: usize,
    dout: usize,
    w: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Vec<f64> {
    let mut dx = if want_dx { vec![0.0; n * din] } else { Vec::new() };
    for i in 0..n {
        let g = &dy[i * dout..(i + 1) * dout];
        for (d, gv) in db.iter_mut().zip(g) {
            *d += gv;
        }
        for k in 0..din {
            let xv = x[i * din + k];
            let wrow = &w[k * dout..(k + 1) * dout];
            let dwrow = &mut dw[k * dout..(k + 1) * dout];
            let mut acc = 0.0;
            for j in 0..dout {
                dwrow[j] += xv * g[j];
                acc += g[j] * wrow[j];
            }
            if want_dx {
                dx[i * din + k] = acc;
            }
        }
    }
    dx
}

struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &[f64], n: usize, h: usize, g: &[f64], b: &[f64]) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; n * h];
    let mut xhat = vec![0.0; n * h];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * h..(i + 1) * h];
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..h {
            let xh = (row[j] - mean) * is;
            xhat[i * h + j] = xh;
            y[i * h + j] = g[j] * xh + b[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    n: usize,
    h: usize,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; n * h];
    let hf = h as f64;
    for i in 0..n {
        let xh = &cache.xhat[i * h..(i + 1) * h];
        let gy = &dy[i * h..(i + 1) * h];
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..h {
            dg[j] += gy[j] * xh[j];
            db[j] += gy[j];
            let d = gy[j] * g[j];
            sum_d += d;
            sum_dx += d * xh[j];
        }
        for j in 0..h {
            let d = gy[j] * g[j];
            dx[i * h + j] = cache.inv_std[i] / hf * (hf * d - sum_d - xh[j] * sum_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct BlockCache {
    x_in: Vec<f64>,
    n1: NormCache,
    ln1: Vec<f64>,
    v: Vec<f64>,
    heads: Vec<HeadCache>,
    attn: Vec<f64>,
    n2: NormCache,
    ln2: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
}

struct ForwardCache {
    n: usize,
    freqs: RopeFrequencies,
    z: Vec<f64>,
    blocks: Vec<BlockCache>,
    nf: NormCache,
    lnf: Vec<f64>,
}

/// Decoder bound to one configuration; parameters are passed in per call.
#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    offsets: Offsets,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (_, _, offsets) = build_index(&cfg);
        Ok(Self { cfg, offsets })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    fn check_params(&self, params: &Parameters) -> Result<()> {
        if params.len() != self.cfg.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters for a config needing {}",
                params.len(),
                self.cfg.param_count()
            )));
        }
        Ok(())
    }

    /// Raw per-token outputs (`n × out_dim`) plus the cache for backward.
    fn forward_tokens(
        &self,
        p: &[f64],
        tokens: &[f64],
        ids: &[[i64; 3]],
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let c = &self.cfg;
        let n = ids.len();
        if tokens.len() != n * c.in_channels {
            return Err(Error::Shape(format!(
                "{} token values for {n} ids of dim {}",
                tokens.len(),
                c.in_channels
            )));
        }
        let (h, m, o) = (c.hidden, c.mlp_dim, c.out_dim());
        let off = &self.offsets;
        let sl = |at: usize, len: usize| &p[at..at + len];
        let freqs = rope_3d(ids, &c.rope)?;

        let mut x = linear(tokens, n, c.in_channels, sl(off.w_in, c.in_channels * h), sl(off.b_in, h), h);
        let mut blocks = Vec::with_capacity(c.depth);
        for b in &off.blocks {
            let (ln1, n1) = layer_norm(&x, n, h, sl(b.ln1_g, h), sl(b.ln1_b, h));
            let q = linear(&ln1, n, h, sl(b.wq, h * h), sl(b.bq, h), h);
            let k = linear(&ln1, n, h, sl(b.wk, h * h), sl(b.bk, h), h);
            let v = linear(&ln1, n, h, sl(b.wv, h * h), sl(b.bv, h), h);
            let (attn, heads) = mha_forward(&q, &k, &v, n, c.heads, c.head_dim(), &freqs, None, None);
            let proj = linear(&attn, n, h, sl(b.wo, h * h), sl(b.bo, h), h);
            let x_in = x.clone();
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            let (ln2, n2) = layer_norm(&x, n, h, sl(b.ln2_g, h), sl(b.ln2_b, h));
            let pre_act = linear(&ln2, n, h, sl(b.w1, h * m), sl(b.b1, m), m);
            let act: Vec<f64> = pre_act.iter().map(|&v| gelu(v)).collect();
            let mlp = linear(&act, n, m, sl(b.w2, m * h), sl(b.b2, h), h);
            for (xv, mv) in x.iter_mut().zip(&mlp) {
                *xv += mv;
            }
            blocks.push(BlockCache {
                x_in,
                n1,
                ln1,
                v,
                heads,
                attn,
                n2,
                ln2,
                pre_act,
                act,
            });
        }
        let (lnf, nf) = layer_norm(&x, n, h, sl(off.lnf_g, h), sl(off.lnf_b, h));
        let out = linear(&lnf, n, h, sl(off.w_out, h * o), sl(off.b_out, o), o);
        if let Some(i) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("decoder output token {}", i / o),
            });
        }
        Ok((
            out,
            ForwardCache {
                n,
                freqs,
                z: tokens.to_vec(),
                blocks,
                nf,
                lnf,
            },
        ))
    }

    fn backward_tokens(&self, p: &[f64], cache: &ForwardCache, d_out: &[f64]) -> Vec<f64> {
        let c = &self.cfg;
        let (n, h, m, o) = (cache.n, c.hidden, c.mlp_dim, c.out_dim());
        let off = &self.offsets;
        let mut grad = vec![0.0; p.len()];
        let sl = |at: usize, len: usize| &p[at..at + len];

        let (gw, gb) = split_two(&mut grad, off.w_out, h * o, off.b_out, o);
        let dlnf = linear_backward(&cache.lnf, d_out, n, h, o, sl(off.w_out, h * o), gw, gb, true);
        let (gg, gbeta) = split_two(&mut grad, off.lnf_g, h, off.lnf_b, h);
        let mut dx = layer_norm_backward(&dlnf, &cache.nf, n, h, sl(off.lnf_g, h), gg, gbeta);

        for (b, bc) in off.blocks.iter().zip(&cache.blocks).rev() {
            // MLP branch.
            let (gw, gb) = split_two(&mut grad, b.w2, m * h, b.b2, h);
            let mut dact = linear_backward(&bc.act, &dx, n, m, h, sl(b.w2, m * h), gw, gb, true);
            for (d, &z) in dact.iter_mut().zip(&bc.pre_act) {
                *d *= gelu_grad(z);
            }
            let (gw, gb) = split_two(&mut grad, b.w1, h * m, b.b1, m);
            let dln2 = linear_backward(&bc.ln2, &dact, n, h, m, sl(b.w1, h * m), gw, gb, true);
            let (gg, gbeta) = split_two(&mut grad, b.ln2_g, h, b.ln2_b, h);
            let dmid = layer_norm_backward(&dln2, &bc.n2, n, h, sl(b.ln2_g, h), gg, gbeta);
            for (d, v) in dx.iter_mut().zip(&dmid) {
                *d += v;
            }
            // Attention branch.
            let (gw, gb) = split_two(&mut grad, b.wo, h * h, b.bo, h);
            let dattn = linear_backward(&bc.attn, &dx, n, h, h, sl(b.wo, h * h), gw, gb, true);
            let (dq, dk, dv) = mha_backward(&bc.v, &bc.heads, &dattn, n, c.head_dim(), &cache.freqs);
            let mut dln1 = vec![0.0; n * h];
            for (w, bias, d) in [(b.wq, b.bq, &dq), (b.wk, b.bk, &dk), (b.wv, b.bv, &dv)] {
                let (gw, gb) = split_two(&mut grad, w, h * h, bias, h);
                let part = linear_backward(&bc.ln1, d, n, h, h, sl(w, h * h), gw, gb, true);
                for (acc, v) in dln1.iter_mut().zip(&part) {
                    *acc += v;
                }
            }
            let (gg, gbeta) = split_two(&mut grad, b.ln1_g, h, b.ln1_b, h);
            let din = layer_norm_backward(&dln1, &bc.n1, n, h, sl(b.ln1_g, h), gg, gbeta);
            for (d, v) in dx.iter_mut().zip(&din) {
                *d += v;
            }
            let _ = &bc.x_in;
        }
        let (gw, gb) = split_two(&mut grad, off.w_in, c.in_channels * h, off.b_in, h);
        linear_backward(&cache.z, &dx, n, c.in_channels, h, sl(off.w_in, c.in_channels * h), gw, gb, false);
        grad
    }
}

/// Two disjoint mutable windows of one buffer; `a` must come before `b`.
fn split_two(buf: &mut [f64], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + alen <= b);
    let (left, right) = buf.split_at_mut(b);
    (&mut left[a..a + alen], &mut right[..blen])
}

/// One decoded stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedStream {
    pub stream: Stream,
    /// Pixel box on the canvas.
    pub region: PixelBox,
    /// RGBA raster of the region's size.
    pub raster: Raster,
}

fn expected_grids(
    seq: &LatentSequence,
    layout: &AnonymousRegionLayout,
    cfg: &DecoderConfig,
) -> Result<()> {
    let canvas = layout.canvas();
    let align = cfg.patch_px;
    let mut want = vec![canvas.full_box(), canvas.full_box()];
    for r in layout.foregrounds() {
        let b = r
            .pixel_box(canvas)
            .ok_or_else(|| Error::Layout(format!("layer {} outside canvas", r.layer_index)))?;
        want.push(ceiling_aligned_crop(b, canvas, align)?);
    }
    if want.len() != seq.segments.len() {
        return Err(Error::Layout(format!(
            "sequence has {} streams, layout implies {}",
            seq.segments.len(),
            want.len()
        )));
    }
    for (seg, b) in seq.segments.iter().zip(want) {
        if seg.grid != b.scaled_down(align) {
            return Err(Error::Layout(format!(
                "{:?} tokens cover {:?}, layout region is {:?}",
                seg.stream, seg.grid, b
            )));
        }
    }
    Ok(())
}

/// Place token patches into per-stream RGBA rasters.
fn assemble(
    out: &[f64],
    seq: &LatentSequence,
    cfg: &DecoderConfig,
) -> Result<Vec<DecodedStream>> {
    let p = cfg.patch_px;
    let o = cfg.out_dim();
    let mut streams = Vec::with_capacity(seq.segments.len());
    for seg in &seq.segments {
        let g = seg.grid;
        let mut raster = Raster::new(g.width() * p, g.height() * p, 4);
        for t in seg.range.clone() {
            let [_, row, col] = seq.ids[t];
            let inside = row >= g.y1 as i64 && row < g.y2 as i64 && col >= g.x1 as i64 && col < g.x2 as i64;
            if !inside {
                return Err(Error::Layout(format!(
                    "token id {:?} outside {:?} grid {g:?}",
                    seq.ids[t], seg.stream
                )));
            }
            let (r0, c0) = ((row as usize - g.y1) * p, (col as usize - g.x1) * p);
            let patch = &out[t * o..(t + 1) * o];
            for py in 0..p {
                for px in 0..p {
                    raster
                        .pixel_mut(r0 + py, c0 + px)
                        .copy_from_slice(&patch[(py * p + px) * 4..(py * p + px + 1) * 4]);
                }
            }
        }
        streams.push(DecodedStream {
            stream: seg.stream,
            region: PixelBox::new(g.x1 * p, g.y1 * p, g.x2 * p, g.y2 * p),
            raster,
        });
    }
    Ok(streams)
}

/// Decode a token sequence into one RGBA raster per stream, each the size of
/// that stream's ceiling-aligned region.
pub fn decoder_forward(
    params: &Parameters,
    seq: &LatentSequence,
    layout: &AnonymousRegionLayout,
    cfg: &DecoderConfig,
) -> Result<Vec<DecodedStream>> {
    let dec = Decoder::new(cfg.clone())?;
    dec.check_params(params)?;
    if seq.dim != cfg.in_channels {
        return Err(Error::Shape(format!(
            "token dim {} vs decoder input {}",
            seq.dim, cfg.in_channels
        )));
    }
    expected_grids(seq, layout, cfg)?;
    let (out, _) = dec.forward_tokens(&params.values, &seq.tokens, &seq.ids)?;
    assemble(&out, seq, cfg)
}

/// Ground truth for one stream, sized to its aligned region (RGB or RGBA).
#[derive(Debug, Clone, PartialEq)]
pub struct StreamTarget {
    pub stream: Stream,
    pub raster: Raster,
}

/// One training example: encoded sequence plus per-stream targets.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub seq: LatentSequence,
    pub layout: AnonymousRegionLayout,
    pub targets: Vec<StreamTarget>,
}

impl TrainItem {
    /// Encode a layered image and cut out its reconstruction targets:
    /// merged and background RGB over the canvas, each foreground RGBA over
    /// its aligned box (transparent outside the layer).
    pub fn from_image(image: &MultiLayerImage, pipe: &PipelineConfig) -> Result<Self> {
        let seq = encode_multilayer(image, pipe)?;
        let boxes = stream_boxes(image, pipe)?;
        let mut targets = vec![
            StreamTarget {
                stream: Stream::Merged,
                raster: image.merged_or_composite()?,
            },
            StreamTarget {
                stream: Stream::Background,
                raster: image.background.clone(),
            },
        ];
        for (i, (layer, region)) in image.foregrounds.iter().enumerate() {
            let b = boxes[i + 2];
            let rb = region.pixel_box(image.canvas).expect("checked by stream_boxes");
            let mut raster = Raster::new(b.width(), b.height(), 4);
            for px in raster.data.chunks_exact_mut(4) {
                px[3] = -1.0;
            }
            for row in 0..rb.height() {
                for col in 0..rb.width() {
                    raster
                        .pixel_mut(rb.y1 - b.y1 + row, rb.x1 - b.x1 + col)
                        .copy_from_slice(layer.pixels.pixel(row, col));
                }
            }
            targets.push(StreamTarget {
                stream: Stream::Foreground(i + 1),
                raster,
            });
        }
        Ok(Self {
            seq,
            layout: image.layout(),
            targets,
        })
    }
}

/// Weighted mean absolute error over supervised channels.
///
/// Foreground streams contribute all four channels; merged and background
/// contribute RGB only, and only when enabled in `cfg.condition_on`.
pub fn l1_loss(pred: &[DecodedStream], target: &[StreamTarget], cfg: &DecoderConfig) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predicted streams vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.stream != t.stream {
            return Err(Error::Shape(format!("stream {:?} vs {:?}", p.stream, t.stream)));
        }
        let Some((w, ch)) = cfg.supervised(p.stream) else {
            continue;
        };
        let (pr, tr) = (&p.raster, &t.raster);
        if pr.width != tr.width || pr.height != tr.height || tr.channels < ch {
            return Err(Error::Shape(format!(
                "{:?}: {}x{} prediction vs {}x{}x{} target",
                p.stream, pr.width, pr.height, tr.width, tr.height, tr.channels
            )));
        }
        let mut sum = 0.0;
        for (a, b) in pr.data.chunks_exact(pr.channels).zip(tr.data.chunks_exact(tr.channels)) {
            for c in 0..ch {
                sum += (a[c] - b[c]).abs();
            }
        }
        num += w * sum;
        den += w * (pr.width * pr.height * ch) as f64;
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// Loss used for gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// True L1 with subgradient 0 at 0.
    L1,
    /// Quadratic below `delta`, linear above (value `|r| − δ/2`).
    SmoothL1 { delta: f64 },
}

impl LossKind {
    fn value(&self, r: f64) -> f64 {
        match *self {
            LossKind::L1 => r.abs(),
            LossKind::SmoothL1 { delta } => {
                if r.abs() < delta {
                    r * r / (2.0 * delta)
                } else {
                    r.abs() - delta / 2.0
                }
            }
        }
    }

    fn slope(&self, r: f64) -> f64 {
        match *self {
            LossKind::L1 => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            LossKind::SmoothL1 { delta } => {
                if r.abs() < delta {
                    r / delta
                } else {
                    r.signum()
                }
            }
        }
    }
}

/// Per-token targets and weights aligned with the decoder's raw outputs.
struct TokenTargets {
    /// Per output entry: `(target value, weight)`; weight 0 for unsupervised.
    entries: Vec<(f64, f64)>,
    denom: f64,
}

fn token_targets(item: &TrainItem, cfg: &DecoderConfig) -> Result<TokenTargets> {
    let p = cfg.patch_px;
    let o = cfg.out_dim();
    let seq = &item.seq;
    if item.targets.len() != seq.segments.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} streams",
            item.targets.len(),
            seq.segments.len()
        )));
    }
    let mut entries = vec![(0.0, 0.0); seq.len() * o];
    let mut denom = 0.0;
    for (seg, t) in seq.segments.iter().zip(&item.targets) {
        let Some((w, ch)) = cfg.supervised(seg.stream) else {
            continue;
        };
        let g = seg.grid;
        if t.raster.width != g.width() * p || t.raster.height != g.height() * p {
            return Err(Error::Shape(format!(
                "{:?} target is {}x{}, stream covers {}x{}",
                seg.stream,
                t.raster.width,
                t.raster.height,
                g.width() * p,
                g.height() * p
            )));
        }
        for tok in seg.range.clone() {
            let [_, row, col] = seq.ids[tok];
            let (r0, c0) = ((row as usize - g.y1) * p, (col as usize - g.x1) * p);
            for py in 0..p {
                for px in 0..p {
                    let src = t.raster.pixel(r0 + py, c0 + px);
                    for c in 0..ch {
                        entries[tok * o + (py * p + px) * 4 + c] = (src[c], w);
                    }
                }
            }
        }
        denom += w * (seg.range.len() * p * p * ch) as f64;
    }
    Ok(TokenTargets { entries, denom })
}

/// A prepared training batch.
pub struct Batch {
    items: Vec<(TrainItem, TokenTargets)>,
    denom: f64,
}

impl Batch {
    pub fn new(items: Vec<TrainItem>, cfg: &DecoderConfig) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut prepared = Vec::with_capacity(items.len());
        let mut denom = 0.0;
        for item in items {
            if item.seq.dim != cfg.in_channels {
                return Err(Error::Shape(format!(
                    "token dim {} vs decoder input {}",
                    item.seq.dim, cfg.in_channels
                )));
            }
            expected_grids(&item.seq, &item.layout, cfg)?;
            let t = token_targets(&item, cfg)?;
            denom += t.denom;
            prepared.push((item, t));
        }
        Ok(Self {
            items: prepared,
            denom,
        })
    }

    pub fn from_images(images: &[MultiLayerImage], pipe: &PipelineConfig, cfg: &DecoderConfig) -> Result<Self> {
        let items = images
            .iter()
            .map(|im| TrainItem::from_image(im, pipe))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, cfg)
    }

    pub fn items(&self) -> impl Iterator<Item = &TrainItem> {
        self.items.iter().map(|(i, _)| i)
    }
}

/// Batch loss (`kind`), the true L1 on the same forward pass, and the gradient.
pub fn loss_and_grad(
    params: &Parameters,
    batch: &Batch,
    cfg: &DecoderConfig,
    kind: LossKind,
) -> Result<(f64, f64, Vec<f64>)> {
    let dec = Decoder::new(cfg.clone())?;
    dec.check_params(params)?;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let mut l1 = 0.0;
    if batch.denom == 0.0 {
        return Ok((0.0, 0.0, grad));
    }
    let scale = 1.0 / batch.denom;
    for (item, targets) in &batch.items {
        let (out, cache) = dec.forward_tokens(&params.values, &item.seq.tokens, &item.seq.ids)?;
        let mut d_out = vec![0.0; out.len()];
        for ((d, &y), &(t, w)) in d_out.iter_mut().zip(&out).zip(&targets.entries) {
            if w == 0.0 {
                continue;
            }
            let r = y - t;
            loss += w * kind.value(r);
            l1 += w * r.abs();
            *d = w * kind.slope(r) * scale;
        }
        let g = dec.backward_tokens(&params.values, &cache, &d_out);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    if let Some(i) = grad.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            location: format!(
                "gradient of {}",
                params.name_of(i).unwrap_or("<unknown parameter>")
            ),
        });
    }
    Ok((loss * scale, l1 * scale, grad))
}

/// Exact gradient of the batch L1 loss.
pub fn grad(params: &Parameters, batch: &Batch, cfg: &DecoderConfig) -> Result<Vec<f64>> {
    loss_and_grad(params, batch, cfg, LossKind::L1).map(|(_, _, g)| g)
}

/// Batch loss of `kind` without gradients.
pub fn batch_loss(params: &Parameters, batch: &Batch, cfg: &DecoderConfig, kind: LossKind) -> Result<f64> {
    let dec = Decoder::new(cfg.clone())?;
    dec.check_params(params)?;
    if batch.denom == 0.0 {
        return Ok(0.0);
    }
    let mut loss = 0.0;
    for (item, targets) in &batch.items {
        let (out, _) = dec.forward_tokens(&params.values, &item.seq.tokens, &item.seq.ids)?;
        for (&y, &(t, w)) in out.iter().zip(&targets.entries) {
            if w != 0.0 {
                loss += w * kind.value(y - t);
            }
        }
    }
    Ok(loss / batch.denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub l1_loss: f64,
    pub wall_ms: u64,
}

pub const TRACE_CSV_HEADER: &str = "step,l1,wall_ms";

pub fn trace_csv(trace: &[TrainRecord]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.step, r.l1_loss, r.wall_ms));
    }
    out
}

/// Full-batch gradient descent with a fixed step size on the smoothed L1.
/// Each record holds the true L1 before that step's update.
pub fn train_overfit(
    samples: &[MultiLayerImage],
    cfg: &DecoderConfig,
    pipe: &PipelineConfig,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(Parameters, Vec<TrainRecord>)> {
    if samples.is_empty() {
        return Err(Error::Config("need at least one sample".into()));
    }
    let batch = Batch::from_images(samples, pipe, cfg)?;
    let mut params = Parameters::init(cfg, seed)?;
    let kind = LossKind::SmoothL1 {
        delta: cfg.smooth_l1_delta,
    };
    let start = Instant::now();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let diverged = || Error::Diverged {
            step,
            last_good: step.checked_sub(1),
        };
        let (_, l1, g) = loss_and_grad(&params, &batch, cfg, kind).map_err(|e| {
            if e.is_numeric() {
                diverged()
            } else {
                e
            }
        })?;
        if !l1.is_finite() {
            return Err(diverged());
        }
        trace.push(TrainRecord {
            step,
            l1_loss: l1,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        for (p, d) in params.values.iter_mut().zip(&g) {
            *p -= lr * d;
        }
    }
    Ok((params, trace))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    config: DecoderConfig,
    payload: String,
    count: usize,
    params: Vec<ParamSlice>,
}

/// Write `<stem>.json` (config + named slices) and `<stem>.bin`
/// (little-endian f64 payload).
pub fn save_checkpoint(params: &Parameters, cfg: &DecoderConfig, json_path: &Path) -> Result<()> {
    let bin_path = json_path.with_extension("bin");
    let index = CheckpointIndex {
        config: cfg.clone(),
        payload: bin_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        count: params.len(),
        params: params.index.clone(),
    };
    std::fs::write(json_path, serde_json::to_string_pretty(&index)?)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(&bin_path)?);
    for v in &params.values {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(json_path: &Path) -> Result<(Parameters, DecoderConfig)> {
    let index: CheckpointIndex = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
    index.config.validate()?;
    if index.count != index.config.param_count() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} values, config needs {}",
            index.count,
            index.config.param_count()
        )));
    }
    let bin_path = json_path.with_file_name(&index.payload);
    let mut bytes = Vec::new();
    std::fs::File::open(bin_path)?.read_to_end(&mut bytes)?;
    if bytes.len() != index.count * 8 {
        return Err(Error::Shape(format!(
            "payload has {} bytes for {} values",
            bytes.len(),
            index.count
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((
        Parameters {
            values,
            index: index.params,
        },
        index.config,
    ))
}
