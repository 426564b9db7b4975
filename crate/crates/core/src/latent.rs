//! Latent token packing for multi-layer images.
//!
//! Every stream (merged reference, background, each foreground) is encoded
//! to a latent grid at `1/vae_downsample` resolution, cropped to its
//! grid-aligned region, packed into `patch_size²` tokens and concatenated.
//! Each token carries a `(layer, row, col)` id in canvas-absolute token units.

use std::io::{Read, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layout::{ceiling_aligned_crop, AnonymousRegionLayout, Canvas, PixelBox, Region};
use crate::raster::Raster;
use crate::transparency::{encode_transparency, MultiLayerImage};

/// A `(layer, row, col)` position id.
pub type TokenId = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub vae_downsample: usize,
    pub patch_size: usize,
    pub latent_channels: usize,
    /// Seed for the fixed random rows of the toy encoder projection.
    pub projection_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            vae_downsample: 8,
            patch_size: 2,
            latent_channels: 16,
            projection_seed: 0x5eed,
        }
    }
}

impl PipelineConfig {
    /// Pixel side of one token; regions must sit on this grid.
    pub fn alignment(&self) -> usize {
        self.vae_downsample * self.patch_size
    }

    /// Channels per packed token.
    pub fn token_dim(&self) -> usize {
        self.latent_channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.vae_downsample == 0 || self.patch_size == 0 {
            return Err(Error::Config("downsample and patch size must be positive".into()));
        }
        if self.latent_channels < 3 {
            return Err(Error::Config(format!(
                "toy encoder needs at least 3 latent channels, got {}",
                self.latent_channels
            )));
        }
        Ok(())
    }

    /// Token grid `(rows, cols)` covering a canvas.
    pub fn token_grid(&self, canvas: Canvas) -> (usize, usize) {
        (canvas.height / self.alignment(), canvas.width / self.alignment())
    }
}

/// Latent values at `1/vae_downsample` resolution, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
    /// Pixel box the grid was encoded from.
    pub origin: PixelBox,
}

impl LatentGrid {
    #[inline]
    fn at(&self, row: usize, col: usize, c: usize) -> f64 {
        self.values[(row * self.width + col) * self.channels + c]
    }
}

/// The fixed projection from an `d×d×3` pixel block to `C` latent channels.
/// Rows 0..3 are the per-channel block means; the rest are seeded Gaussian.
#[derive(Debug, Clone)]
pub struct ToyProjection {
    block: usize,
    rows: Vec<Vec<f64>>,
}

impl ToyProjection {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.vae_downsample;
        let n = d * d * 3;
        let mut rows = Vec::with_capacity(cfg.latent_channels);
        for c in 0..3 {
            let mut row = vec![0.0; n];
            for p in 0..d * d {
                row[p * 3 + c] = 1.0 / (d * d) as f64;
            }
            rows.push(row);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.projection_seed);
        let normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("positive std");
        for _ in 3..cfg.latent_channels {
            rows.push((0..n).map(|_| normal.sample(&mut rng)).collect());
        }
        Ok(Self { block: d, rows })
    }
}

/// Deterministic linear stand-in for a frozen VAE encoder.
pub fn toy_encode(image: &Raster, cfg: &PipelineConfig) -> Result<LatentGrid> {
    let origin = PixelBox::new(0, 0, image.width, image.height);
    toy_encode_at(image, origin, cfg)
}

/// As [`toy_encode`], recording that `image` covers `origin` on the canvas.
pub fn toy_encode_at(image: &Raster, origin: PixelBox, cfg: &PipelineConfig) -> Result<LatentGrid> {
    let proj = ToyProjection::new(cfg)?;
    let d = proj.block;
    if image.channels != 3 {
        return Err(Error::Shape(format!(
            "encoder takes 3 channels, got {}",
            image.channels
        )));
    }
    if image.width % d != 0 || image.height % d != 0 || image.width == 0 || image.height == 0 {
        return Err(Error::Shape(format!(
            "{}x{} not divisible by downsample {d}",
            image.width, image.height
        )));
    }
    if origin.width() != image.width || origin.height() != image.height {
        return Err(Error::Shape(format!("origin {origin:?} does not match image size")));
    }
    let (lw, lh, ch) = (image.width / d, image.height / d, cfg.latent_channels);
    let mut values = vec![0.0; lw * lh * ch];
    let mut block = vec![0.0; d * d * 3];
    for br in 0..lh {
        for bc in 0..lw {
            for r in 0..d {
                let src = image.index(br * d + r, bc * d, 0);
                block[r * d * 3..(r + 1) * d * 3].copy_from_slice(&image.data[src..src + d * 3]);
            }
            let out = &mut values[(br * lw + bc) * ch..(br * lw + bc + 1) * ch];
            for (o, row) in out.iter_mut().zip(&proj.rows) {
                *o = row.iter().zip(&block).map(|(w, x)| w * x).sum();
            }
        }
    }
    Ok(LatentGrid {
        width: lw,
        height: lh,
        channels: ch,
        values,
        origin,
    })
}

/// Pixel image whose blocks hold the block-mean channels of the latent.
pub fn toy_decode_pixels(latent: &LatentGrid, cfg: &PipelineConfig) -> Raster {
    let d = cfg.vae_downsample;
    let mut out = Raster::new(latent.width * d, latent.height * d, 3);
    for row in 0..out.height {
        for col in 0..out.width {
            for c in 0..3 {
                out.set(row, col, c, latent.at(row / d, col / d, c));
            }
        }
    }
    out
}

/// Tokens and ids for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    pub dim: usize,
    pub tokens: Vec<f64>,
    pub ids: Vec<TokenId>,
    /// Token-unit box on the canvas token grid.
    pub grid: PixelBox,
}

impl TokenBlock {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Crop a latent grid to `region_px` and pack it into row-major tokens.
pub fn crop_and_flatten(
    latent: &LatentGrid,
    region_px: PixelBox,
    layer_index: usize,
    cfg: &PipelineConfig,
) -> Result<TokenBlock> {
    let align = cfg.alignment();
    if region_px.is_empty() || !region_px.is_grid_aligned(align) {
        return Err(Error::Unaligned {
            alignment: align,
            detail: format!("{region_px:?}"),
        });
    }
    if !latent.origin.is_grid_aligned(align) {
        return Err(Error::Unaligned {
            alignment: align,
            detail: format!("latent origin {:?}", latent.origin),
        });
    }
    if !latent.origin.contains(&region_px) {
        return Err(Error::Shape(format!(
            "region {region_px:?} outside latent extent {:?}",
            latent.origin
        )));
    }
    let (d, p) = (cfg.vae_downsample, cfg.patch_size);
    let grid = region_px.scaled_down(align);
    let lr0 = (region_px.y1 - latent.origin.y1) / d;
    let lc0 = (region_px.x1 - latent.origin.x1) / d;
    let dim = latent.channels * p * p;

    let n = grid.area();
    let mut tokens = Vec::with_capacity(n * dim);
    let mut ids = Vec::with_capacity(n);
    for tr in 0..grid.height() {
        for tc in 0..grid.width() {
            for c in 0..latent.channels {
                for ph in 0..p {
                    for pw in 0..p {
                        tokens.push(latent.at(lr0 + tr * p + ph, lc0 + tc * p + pw, c));
                    }
                }
            }
            ids.push([
                layer_index as i64,
                (grid.y1 + tr) as i64,
                (grid.x1 + tc) as i64,
            ]);
        }
    }
    Ok(TokenBlock {
        dim,
        tokens,
        ids,
        grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Merged,
    Background,
    /// 1-based foreground position.
    Foreground(usize),
}

impl Stream {
    /// Merged 0, background 1, foreground `i` gets `i + 1`.
    pub fn layer_id(&self) -> i64 {
        match self {
            Stream::Merged => 0,
            Stream::Background => 1,
            Stream::Foreground(i) => *i as i64 + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub stream: Stream,
    pub range: Range<usize>,
    /// Token-unit box of this stream on the canvas token grid.
    pub grid: PixelBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub dim: usize,
    pub tokens: Vec<f64>,
    pub ids: Vec<TokenId>,
    pub segments: Vec<Segment>,
}

impl LatentSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.dim..(i + 1) * self.dim]
    }

    /// Per-stream blocks; inverse of [`concat_multilayer`].
    pub fn split(&self) -> Vec<TokenBlock> {
        self.segments
            .iter()
            .map(|s| TokenBlock {
                dim: self.dim,
                tokens: self.tokens[s.range.start * self.dim..s.range.end * self.dim].to_vec(),
                ids: self.ids[s.range.clone()].to_vec(),
                grid: s.grid,
            })
            .collect()
    }
}

/// Concatenate merged, background and foreground blocks (in that order),
/// assigning canonical layer ids to each stream.
pub fn concat_multilayer(
    z_mg: TokenBlock,
    z_bg: TokenBlock,
    z_fg: Vec<TokenBlock>,
) -> Result<LatentSequence> {
    let dim = z_mg.dim;
    let streams = [(Stream::Merged, z_mg), (Stream::Background, z_bg)]
        .into_iter()
        .chain(
            z_fg.into_iter()
                .enumerate()
                .map(|(i, b)| (Stream::Foreground(i + 1), b)),
        );
    let mut seq = LatentSequence {
        dim,
        tokens: Vec::new(),
        ids: Vec::new(),
        segments: Vec::new(),
    };
    for (stream, block) in streams {
        if block.dim != dim || block.tokens.len() != block.ids.len() * dim {
            return Err(Error::Shape(format!(
                "{stream:?} block has dim {} ({} values for {} ids), expected {dim}",
                block.dim,
                block.tokens.len(),
                block.ids.len()
            )));
        }
        let start = seq.ids.len();
        let layer = stream.layer_id();
        seq.ids
            .extend(block.ids.iter().map(|&[_, r, c]| [layer, r, c]));
        seq.tokens.extend_from_slice(&block.tokens);
        seq.segments.push(Segment {
            stream,
            range: start..seq.ids.len(),
            grid: block.grid,
        });
    }
    Ok(seq)
}

/// Position ids for a list of layer boxes, one layer id per region in list
/// order: build each layer's full id grid, slice its box, flatten row-major.
pub fn prepare_latent_image_ids(
    layout: &AnonymousRegionLayout,
    cfg: &PipelineConfig,
) -> Result<Vec<TokenId>> {
    let align = cfg.alignment();
    let canvas = layout.canvas();
    if canvas.width % align != 0 || canvas.height % align != 0 {
        return Err(Error::Unaligned {
            alignment: align,
            detail: format!("canvas {}x{}", canvas.width, canvas.height),
        });
    }
    let (rows, cols) = cfg.token_grid(canvas);
    let mut out = Vec::new();
    for (layer_idx, region) in layout.regions.iter().enumerate() {
        let b = region
            .pixel_box(canvas)
            .filter(|b| b.is_grid_aligned(align))
            .ok_or_else(|| Error::Unaligned {
                alignment: align,
                detail: format!("layer {} box {:?}", region.layer_index, region.corners()),
            })?;
        let full: Vec<Vec<TokenId>> = (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|c| [layer_idx as i64, r as i64, c as i64])
                    .collect()
            })
            .collect();
        let g = b.scaled_down(align);
        for row in &full[g.y1..g.y2] {
            out.extend_from_slice(&row[g.x1..g.x2]);
        }
    }
    Ok(out)
}

/// Prepend a full-canvas merged-reference entry and renumber, so that
/// region `i` of the result is stream layer id `i` as assigned by
/// [`concat_multilayer`].
pub fn with_reference_stream(layout: &AnonymousRegionLayout) -> AnonymousRegionLayout {
    let canvas = layout.canvas();
    let mut regions = vec![Region::full_canvas(0, canvas)];
    regions.extend(layout.regions.iter().enumerate().map(|(i, r)| Region {
        layer_index: i + 1,
        ..*r
    }));
    AnonymousRegionLayout::new(canvas, regions)
}

/// Grid-aligned pixel boxes of every stream, in sequence order.
pub fn stream_boxes(image: &MultiLayerImage, cfg: &PipelineConfig) -> Result<Vec<PixelBox>> {
    let canvas = image.canvas;
    let full = canvas.full_box();
    let mut boxes = vec![full, full];
    for (_, region) in &image.foregrounds {
        let b = region.pixel_box(canvas).ok_or_else(|| {
            Error::Layout(format!("layer {} outside canvas", region.layer_index))
        })?;
        boxes.push(ceiling_aligned_crop(b, canvas, cfg.alignment())?);
    }
    Ok(boxes)
}

/// Full encoder path: merged and background flattened whole, each foreground
/// transparency-encoded, padded to the canvas, encoded, cropped to its
/// ceiling-aligned box and flattened; then concatenated.
pub fn encode_multilayer(image: &MultiLayerImage, cfg: &PipelineConfig) -> Result<LatentSequence> {
    let canvas = image.canvas;
    let boxes = stream_boxes(image, cfg)?;
    let merged = image.merged_or_composite()?;
    let full = canvas.full_box();
    let z_mg = crop_and_flatten(&toy_encode(&merged, cfg)?, full, 0, cfg)?;
    let z_bg = crop_and_flatten(&toy_encode(&image.background, cfg)?, full, 1, cfg)?;
    let mut z_fg = Vec::with_capacity(image.foregrounds.len());
    for (i, (layer, region)) in image.foregrounds.iter().enumerate() {
        let gray = encode_transparency(layer)?;
        let rb = region.pixel_box(canvas).expect("checked by stream_boxes");
        let mut padded = Raster::new(canvas.width, canvas.height, 3);
        for row in 0..rb.height() {
            for col in 0..rb.width() {
                padded
                    .pixel_mut(rb.y1 + row, rb.x1 + col)
                    .copy_from_slice(gray.pixels.pixel(row, col));
            }
        }
        let latent = toy_encode(&padded, cfg)?;
        z_fg.push(crop_and_flatten(&latent, boxes[i + 2], i + 2, cfg)?);
    }
    concat_multilayer(z_mg, z_bg, z_fg)
}

/// Little-endian dump: `u64 N, u64 D, u64 3`, then `N·D` f64 tokens, then
/// `N·3` i64 ids.
pub fn write_sequence<W: Write>(seq: &LatentSequence, mut w: W) -> Result<()> {
    for v in [seq.len() as u64, seq.dim as u64, 3] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &seq.tokens {
        w.write_all(&v.to_le_bytes())?;
    }
    for id in &seq.ids {
        for v in id {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a dump written by [`write_sequence`]. Segment boundaries are not
/// stored; the result has one segment per contiguous run of equal layer ids.
pub fn read_sequence<R: Read>(mut r: R) -> Result<LatentSequence> {
    let mut word = [0u8; 8];
    let mut next = |r: &mut R| -> Result<[u8; 8]> {
        r.read_exact(&mut word)?;
        Ok(word)
    };
    let n = u64::from_le_bytes(next(&mut r)?) as usize;
    let dim = u64::from_le_bytes(next(&mut r)?) as usize;
    let three = u64::from_le_bytes(next(&mut r)?);
    if three != 3 {
        return Err(Error::Shape(format!("id width {three}, expected 3")));
    }
    let mut tokens = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        tokens.push(f64::from_le_bytes(next(&mut r)?));
    }
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let mut id = [0i64; 3];
        for v in &mut id {
            *v = i64::from_le_bytes(next(&mut r)?);
        }
        ids.push(id);
    }
    let mut segments: Vec<Segment> = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let point = PixelBox::new(id[2] as usize, id[1] as usize, id[2] as usize + 1, id[1] as usize + 1);
        match segments.last_mut() {
            Some(s) if ids[s.range.start][0] == id[0] => {
                s.range.end = i + 1;
                s.grid = PixelBox::new(
                    s.grid.x1.min(point.x1),
                    s.grid.y1.min(point.y1),
                    s.grid.x2.max(point.x2),
                    s.grid.y2.max(point.y2),
                );
            }
            _ => segments.push(Segment {
                stream: match id[0] {
                    0 => Stream::Merged,
                    1 => Stream::Background,
                    l => Stream::Foreground((l - 1).max(1) as usize),
                },
                range: i..i + 1,
                grid: point,
            }),
        }
    }
    Ok(LatentSequence {
        dim,
        tokens,
        ids,
        segments,
    })
}
