//! Transparency encoding, alpha compositing and the seeded synthetic
//! multi-layer generator.
//!
//! All rasters here live on the `[-1,1]` scale. Alpha `-1` is fully
//! transparent and `+1` fully opaque; the compositing weight is
//! `a = 0.5·alpha + 0.5`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::{AnonymousRegionLayout, Canvas, PixelBox, Region};
use crate::raster::Raster;

/// Default singularity cutoff for [`decode_transparency`], on the coefficient scale.
pub const DEFAULT_DECODE_EPS: f64 = 1e-3;

/// Minimum side of a generated foreground region.
pub const MIN_SYNTH_REGION: usize = 32;

/// Straight (non-premultiplied) RGBA layer, channels `R,G,B,A` in `[-1,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbaLayer {
    pub pixels: Raster,
}

impl RgbaLayer {
    pub fn new(pixels: Raster) -> Result<Self> {
        let layer = Self { pixels };
        layer.check()?;
        Ok(layer)
    }

    fn check(&self) -> Result<()> {
        if self.pixels.channels != 4 {
            return Err(Error::Shape(format!(
                "RGBA layer needs 4 channels, got {}",
                self.pixels.channels
            )));
        }
        if let Some(v) = self.pixels.data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("channel value {v} outside [-1,1]")));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.pixels.width
    }

    pub fn height(&self) -> usize {
        self.pixels.height
    }

    pub fn rgb(&self) -> Raster {
        self.pixels.select_channels(0..3)
    }

    /// Alpha channel on its stored `[-1,1]` scale.
    pub fn alpha(&self) -> Raster {
        self.pixels.select_channels(3..4)
    }

    /// Alpha mapped to the `[0,1]` compositing scale.
    pub fn alpha_unit(&self) -> Raster {
        let mut a = self.alpha();
        a.data.iter_mut().for_each(|v| *v = 0.5 * *v + 0.5);
        a
    }
}

/// Three-channel image where transparency has been folded into the colour
/// ("gray background": fully transparent pixels are exactly 0).
#[derive(Debug, Clone, PartialEq)]
pub struct GrayBackedLayer {
    pub pixels: Raster,
}

/// Background, positioned foreground layers and (optionally) their composite.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiLayerImage {
    pub canvas: Canvas,
    pub background: Raster,
    pub foregrounds: Vec<(RgbaLayer, Region)>,
    pub merged: Option<Raster>,
}

impl MultiLayerImage {
    /// Layout with the background as full-canvas layer 0 followed by the
    /// foreground regions.
    pub fn layout(&self) -> AnonymousRegionLayout {
        let mut regions = vec![Region::full_canvas(0, self.canvas)];
        regions.extend(self.foregrounds.iter().map(|(_, r)| *r));
        AnonymousRegionLayout::new(self.canvas, regions)
    }

    pub fn merged_or_composite(&self) -> Result<Raster> {
        match &self.merged {
            Some(m) => Ok(m.clone()),
            None => composite(&self.background, &self.foregrounds),
        }
    }
}

/// `(0.5·A + 0.5) × RGB`, per pixel.
pub fn encode_transparency(layer: &RgbaLayer) -> Result<GrayBackedLayer> {
    layer.check()?;
    let p = &layer.pixels;
    let mut out = Raster::new(p.width, p.height, 3);
    for (dst, src) in out.data.chunks_exact_mut(3).zip(p.data.chunks_exact(4)) {
        let coef = 0.5 * src[3] + 0.5;
        for c in 0..3 {
            dst[c] = coef * src[c];
        }
    }
    Ok(GrayBackedLayer { pixels: out })
}

/// Inverse of [`encode_transparency`] given the alpha it was built with.
///
/// Where the coefficient `0.5·alpha + 0.5` is at or below `eps` the colour is
/// unrecoverable and decodes to 0.
pub fn decode_transparency(gray: &GrayBackedLayer, alpha: &Raster, eps: f64) -> Result<Raster> {
    let g = &gray.pixels;
    if g.channels != 3 || alpha.channels != 1 || g.width != alpha.width || g.height != alpha.height
    {
        return Err(Error::Shape(format!(
            "gray {}x{}x{} vs alpha {}x{}x{}",
            g.width, g.height, g.channels, alpha.width, alpha.height, alpha.channels
        )));
    }
    let mut out = Raster::new(g.width, g.height, 3);
    for ((dst, src), &a) in out
        .data
        .chunks_exact_mut(3)
        .zip(g.data.chunks_exact(3))
        .zip(&alpha.data)
    {
        let coef = 0.5 * a + 0.5;
        if coef > eps {
            for c in 0..3 {
                dst[c] = src[c] / coef;
            }
        }
    }
    Ok(out)
}

/// Straight-alpha "over" of each foreground onto `base`, in ascending layer
/// order. Operates in the stored value space; the operator is affine so this
/// equals compositing on the `[0,1]` scale and mapping back.
pub fn composite(base: &Raster, foregrounds: &[(RgbaLayer, Region)]) -> Result<Raster> {
    if base.channels != 3 {
        return Err(Error::Shape(format!(
            "base needs 3 channels, got {}",
            base.channels
        )));
    }
    let canvas = Canvas::new(base.width, base.height);
    let mut order: Vec<usize> = (0..foregrounds.len()).collect();
    order.sort_by_key(|&i| foregrounds[i].1.layer_index);

    let mut out = base.clone();
    for i in order {
        let (layer, region) = &foregrounds[i];
        let b = region.pixel_box(canvas).ok_or_else(|| {
            Error::Shape(format!(
                "layer {} region outside {}x{} canvas",
                region.layer_index, canvas.width, canvas.height
            ))
        })?;
        if layer.pixels.channels != 4 || layer.width() != b.width() || layer.height() != b.height()
        {
            return Err(Error::Shape(format!(
                "layer {} is {}x{}x{}, region is {}x{}",
                region.layer_index,
                layer.width(),
                layer.height(),
                layer.pixels.channels,
                b.width(),
                b.height()
            )));
        }
        for row in 0..b.height() {
            for col in 0..b.width() {
                let fg = layer.pixels.pixel(row, col);
                let a = 0.5 * fg[3] + 0.5;
                let under = out.pixel_mut(b.y1 + row, b.x1 + col);
                for c in 0..3 {
                    under[c] = a * fg[c] + (1.0 - a) * under[c];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Blob,
}

/// Seeded stand-in for a layered design dataset.
///
/// The background is a vertical two-colour gradient. Each foreground is one
/// flat-coloured rectangle, ellipse or soft blob inside its own region; regions
/// sit on the 16 px grid with sides of at least [`MIN_SYNTH_REGION`]. Fully
/// transparent pixels carry RGB 0.
pub fn synth_multilayer(seed: u64, k: usize, canvas: Canvas) -> Result<MultiLayerImage> {
    if canvas.width == 0 || canvas.height == 0 {
        return Err(Error::CanvasTooSmall {
            width: canvas.width,
            height: canvas.height,
            detail: "empty canvas".into(),
        });
    }
    if k > 0 && (canvas.width < MIN_SYNTH_REGION || canvas.height < MIN_SYNTH_REGION) {
        return Err(Error::CanvasTooSmall {
            width: canvas.width,
            height: canvas.height,
            detail: format!("{k} layers need regions of at least {MIN_SYNTH_REGION}px"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.8..0.8));
    let mut background = Raster::new(canvas.width, canvas.height, 3);
    for row in 0..canvas.height {
        let t = if canvas.height > 1 {
            row as f64 / (canvas.height - 1) as f64
        } else {
            0.0
        };
        for col in 0..canvas.width {
            let px = background.pixel_mut(row, col);
            for c in 0..3 {
                px[c] = (1.0 - t) * top[c] + t * bottom[c];
            }
        }
    }

    let mut foregrounds = Vec::with_capacity(k);
    for layer_index in 1..=k {
        let b = random_region(&mut rng, canvas);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Rect,
            1 => Shape::Ellipse,
            _ => Shape::Blob,
        };
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.9..0.9));
        let opacity: f64 = rng.random_range(0.6..1.0);
        let layer = render_shape(&mut rng, shape, b.width(), b.height(), color, opacity);
        foregrounds.push((layer, Region::from_box(layer_index, b)));
    }
    let merged = composite(&background, &foregrounds)?;
    Ok(MultiLayerImage {
        canvas,
        background,
        foregrounds,
        merged: Some(merged),
    })
}

fn random_region(rng: &mut ChaCha8Rng, canvas: Canvas) -> PixelBox {
    const GRID: usize = 16;
    let side = |rng: &mut ChaCha8Rng, extent: usize| -> usize {
        let max = (extent / 2).max(MIN_SYNTH_REGION).min(extent);
        let steps = (max.saturating_sub(MIN_SYNTH_REGION)) / GRID;
        (MIN_SYNTH_REGION + GRID * rng.random_range(0..=steps)).min(extent)
    };
    let w = side(rng, canvas.width);
    let h = side(rng, canvas.height);
    let origin = |rng: &mut ChaCha8Rng, extent: usize, len: usize| -> usize {
        let slots = (extent - len) / GRID;
        GRID * rng.random_range(0..=slots)
    };
    let x1 = origin(rng, canvas.width, w);
    let y1 = origin(rng, canvas.height, h);
    PixelBox::new(x1, y1, x1 + w, y1 + h)
}

fn render_shape(
    rng: &mut ChaCha8Rng,
    shape: Shape,
    w: usize,
    h: usize,
    color: [f64; 3],
    opacity: f64,
) -> RgbaLayer {
    // Inset keeps shapes clear of the region edge but the center always covered.
    let inset_x = rng.random_range(0.0..0.2) * w as f64;
    let inset_y = rng.random_range(0.0..0.2) * h as f64;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let (rx, ry) = (cx - inset_x, cy - inset_y);

    let mut px = Raster::new(w, h, 4);
    for row in 0..h {
        for col in 0..w {
            let x = col as f64 + 0.5;
            let y = row as f64 + 0.5;
            let cover = match shape {
                Shape::Rect => {
                    if (x - cx).abs() <= rx && (y - cy).abs() <= ry {
                        1.0
                    } else {
                        0.0
                    }
                }
                Shape::Ellipse => {
                    let d = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
                    if d <= 1.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                Shape::Blob => {
                    let d = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
                    if d >= 1.0 {
                        0.0
                    } else {
                        (1.0 - d).powi(2)
                    }
                }
            };
            let a = cover * opacity;
            let p = px.pixel_mut(row, col);
            if a > 0.0 {
                p[..3].copy_from_slice(&color);
            }
            p[3] = 2.0 * a - 1.0;
        }
    }
    RgbaLayer { pixels: px }
}
