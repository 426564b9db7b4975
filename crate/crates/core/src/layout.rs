//! Anonymous region layouts: the wire format, validation and box geometry.
//!
//! On the wire a region is `{"layer", "x", "y", "width", "height"}` where
//! `x`/`y` are the region *center*. Internally regions are converted to
//! half-open corner boxes; for odd sizes the left/top corner rounds down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Canvas dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
}

impl Canvas {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn full_box(&self) -> PixelBox {
        PixelBox::new(0, 0, self.width, self.height)
    }
}

/// One anonymous region: a layer index plus center and size. No content label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Region {
    pub layer_index: usize,
    pub cx: i64,
    pub cy: i64,
    pub width: u32,
    pub height: u32,
}

impl Region {
    pub fn full_canvas(layer_index: usize, canvas: Canvas) -> Self {
        Self::from_box(layer_index, canvas.full_box())
    }

    /// Region whose corner box is exactly `b`.
    pub fn from_box(layer_index: usize, b: PixelBox) -> Self {
        let w = b.width() as i64;
        let h = b.height() as i64;
        Self {
            layer_index,
            cx: b.x1 as i64 + (w + 1) / 2,
            cy: b.y1 as i64 + (h + 1) / 2,
            width: w as u32,
            height: h as u32,
        }
    }

    /// Signed corner bounds `(x1, y1, x2, y2)`, possibly outside any canvas.
    pub fn corners(&self) -> (i64, i64, i64, i64) {
        let (w, h) = (self.width as i64, self.height as i64);
        let x1 = self.cx - (w + 1) / 2;
        let y1 = self.cy - (h + 1) / 2;
        (x1, y1, x1 + w, y1 + h)
    }

    /// Corner box if the region is non-empty and fully inside `canvas`.
    pub fn pixel_box(&self, canvas: Canvas) -> Option<PixelBox> {
        let (x1, y1, x2, y2) = self.corners();
        let inside = self.width > 0
            && self.height > 0
            && x1 >= 0
            && y1 >= 0
            && x2 <= canvas.width as i64
            && y2 <= canvas.height as i64;
        inside.then(|| PixelBox::new(x1 as usize, y1 as usize, x2 as usize, y2 as usize))
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

/// Half-open pixel rectangle `[x1,x2)×[y1,y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl PixelBox {
    pub const fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> usize {
        self.x2.saturating_sub(self.x1)
    }

    pub fn height(&self) -> usize {
        self.y2.saturating_sub(self.y1)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.x1 >= self.x2 || self.y1 >= self.y2
    }

    pub fn contains(&self, other: &PixelBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn within(&self, canvas: Canvas) -> bool {
        !self.is_empty() && self.x2 <= canvas.width && self.y2 <= canvas.height
    }

    /// True when all four edges sit on multiples of `alignment`.
    pub fn is_grid_aligned(&self, alignment: usize) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v % alignment == 0)
    }

    /// The same box expressed in units of `unit` pixels. Caller checks alignment.
    pub fn scaled_down(&self, unit: usize) -> PixelBox {
        PixelBox::new(self.x1 / unit, self.y1 / unit, self.x2 / unit, self.y2 / unit)
    }
}

/// Ordered anonymous regions on a canvas. Canvas size travels out-of-band
/// on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnonymousRegionLayout {
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub regions: Vec<Region>,
}

impl AnonymousRegionLayout {
    pub fn new(canvas: Canvas, regions: Vec<Region>) -> Self {
        Self {
            canvas_width: canvas.width,
            canvas_height: canvas.height,
            regions,
        }
    }

    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.canvas_width, self.canvas_height)
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Regions with `layer_index > 0`, i.e. everything but the background entry.
    pub fn foregrounds(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(|r| r.layer_index > 0)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WireRegion {
    layer: i64,
    x: i64,
    y: i64,
    width: i64,
    height: i64,
}

/// Parse the JSON array wire format. Regions come back sorted by layer.
pub fn parse_layout(text: &str, canvas: Canvas) -> Result<AnonymousRegionLayout> {
    let wire: Vec<WireRegion> = serde_json::from_str(text)?;
    let mut regions = Vec::with_capacity(wire.len());
    for w in wire {
        if w.layer < 0 {
            return Err(Error::Layout(format!("negative layer index {}", w.layer)));
        }
        if w.width < 0 || w.height < 0 {
            return Err(Error::Layout(format!(
                "layer {}: negative size {}x{}",
                w.layer, w.width, w.height
            )));
        }
        if w.width > u32::MAX as i64 || w.height > u32::MAX as i64 {
            return Err(Error::Layout(format!("layer {}: size overflow", w.layer)));
        }
        regions.push(Region {
            layer_index: w.layer as usize,
            cx: w.x,
            cy: w.y,
            width: w.width as u32,
            height: w.height as u32,
        });
    }
    regions.sort_by_key(|r| r.layer_index);
    if let Some(pair) = regions
        .windows(2)
        .find(|p| p[0].layer_index == p[1].layer_index)
    {
        return Err(Error::Layout(format!(
            "duplicate layer index {}",
            pair[0].layer_index
        )));
    }
    Ok(AnonymousRegionLayout::new(canvas, regions))
}

fn to_wire(layout: &AnonymousRegionLayout) -> Vec<WireRegion> {
    layout
        .regions
        .iter()
        .map(|r| WireRegion {
            layer: r.layer_index as i64,
            x: r.cx,
            y: r.cy,
            width: r.width as i64,
            height: r.height as i64,
        })
        .collect()
}

/// Compact JSON, one object per region in list order.
pub fn serialize_layout(layout: &AnonymousRegionLayout) -> String {
    serde_json::to_string(&to_wire(layout)).expect("plain integers always serialize")
}

pub fn serialize_layout_pretty(layout: &AnonymousRegionLayout) -> String {
    serde_json::to_string_pretty(&to_wire(layout)).expect("plain integers always serialize")
}

/// Smallest box holding every pixel with `alpha > threshold`, or `None` for a
/// fully transparent raster. Reads channel 0; alpha is on the `[0,1]` scale.
pub fn bbox_from_alpha(alpha: &Raster, threshold: f64) -> Option<PixelBox> {
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for row in 0..alpha.height {
        for col in 0..alpha.width {
            if alpha.get(row, col, 0) > threshold {
                x1 = x1.min(col);
                y1 = y1.min(row);
                x2 = x2.max(col + 1);
                y2 = y2.max(row + 1);
            }
        }
    }
    (x1 != usize::MAX).then(|| PixelBox::new(x1, y1, x2, y2))
}

/// Tightest box containing `b` whose edges lie on the `alignment` grid.
///
/// Width and height come out as multiples of `alignment` and the box maps
/// onto whole latent tokens. The canvas must itself be a multiple of
/// `alignment`, so the snapped box never overruns an edge.
pub fn ceiling_aligned_crop(b: PixelBox, canvas: Canvas, alignment: usize) -> Result<PixelBox> {
    if alignment == 0 {
        return Err(Error::Config("alignment must be positive".into()));
    }
    if canvas.width < alignment || canvas.height < alignment {
        return Err(Error::CanvasTooSmall {
            width: canvas.width,
            height: canvas.height,
            detail: format!("smaller than alignment {alignment}"),
        });
    }
    if canvas.width % alignment != 0 || canvas.height % alignment != 0 {
        return Err(Error::Config(format!(
            "canvas {}x{} not a multiple of alignment {alignment}",
            canvas.width, canvas.height
        )));
    }
    if !b.within(canvas) {
        return Err(Error::Shape(format!(
            "box {b:?} not inside {}x{} canvas",
            canvas.width, canvas.height
        )));
    }
    let down = |v: usize| v / alignment * alignment;
    let up = |v: usize| v.div_ceil(alignment) * alignment;
    Ok(PixelBox::new(down(b.x1), down(b.y1), up(b.x2), up(b.y2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    ZeroSize,
    OutOfBounds,
    LayerOrder,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Layer index of the offending region.
    pub layer: usize,
    pub kind: ViolationKind,
    pub message: String,
}

/// Every broken region/layout invariant; empty means the layout is valid.
pub fn validate_layout(layout: &AnonymousRegionLayout) -> Vec<Violation> {
    let canvas = layout.canvas();
    let mut out = Vec::new();
    for (pos, r) in layout.regions.iter().enumerate() {
        if r.layer_index != pos {
            out.push(Violation {
                layer: r.layer_index,
                kind: ViolationKind::LayerOrder,
                message: format!(
                    "region at position {pos} has layer index {} (expected {pos})",
                    r.layer_index
                ),
            });
        }
        if r.width == 0 || r.height == 0 {
            out.push(Violation {
                layer: r.layer_index,
                kind: ViolationKind::ZeroSize,
                message: format!(
                    "layer {}: degenerate size {}x{}",
                    r.layer_index, r.width, r.height
                ),
            });
            continue;
        }
        if r.pixel_box(canvas).is_none() {
            let (x1, y1, x2, y2) = r.corners();
            out.push(Violation {
                layer: r.layer_index,
                kind: ViolationKind::OutOfBounds,
                message: format!(
                    "layer {}: box ({x1},{y1},{x2},{y2}) exceeds {}x{} canvas",
                    r.layer_index, canvas.width, canvas.height
                ),
            });
        }
    }
    out
}
