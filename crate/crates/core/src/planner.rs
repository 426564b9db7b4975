//! Seeded rule-based layout planner.
//!
//! Boxes are placed on a 16-pixel grid, so every corner and size is a
//! multiple of 16 and every center a multiple of 8.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::PipelineConfig;
use crate::layout::{
    ceiling_aligned_crop, serialize_layout_pretty, AnonymousRegionLayout, Canvas, PixelBox, Region,
};

pub const MAX_ELEMENTS: usize = 50;
pub const SNAP: usize = 16;
pub const MIN_CANVAS: usize = 64;

/// Element counts drawn by [`PlannerRequest::sampled`].
pub const DEFAULT_ELEMENTS: std::ops::RangeInclusive<usize> = 5..=15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    #[default]
    Poster,
    Banner,
    Scatter,
    Grid,
}

impl Template {
    pub const ALL: [Template; 4] = [Template::Poster, Template::Banner, Template::Scatter, Template::Grid];
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Template::Poster => "poster",
            Template::Banner => "banner",
            Template::Scatter => "scatter",
            Template::Grid => "grid",
        })
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown template {s:?} (poster, banner, scatter, grid)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRequest {
    pub canvas_width: usize,
    pub canvas_height: usize,
    pub element_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub template: Template,
    /// Largest allowed overlap of a new accent box with any earlier
    /// foreground, as a fraction of the smaller box. `None` allows any.
    #[serde(default)]
    pub max_overlap: Option<f64>,
}

impl PlannerRequest {
    pub fn new(canvas: Canvas, element_count: usize, seed: u64, template: Template) -> Self {
        Self {
            canvas_width: canvas.width,
            canvas_height: canvas.height,
            element_count,
            seed,
            template,
            max_overlap: None,
        }
    }

    /// Poster request whose element count is drawn from [`DEFAULT_ELEMENTS`].
    pub fn sampled(canvas: Canvas, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe1e3_e475);
        Self::new(canvas, rng.random_range(DEFAULT_ELEMENTS), seed, Template::Poster)
    }

    pub fn canvas(&self) -> Canvas {
        Canvas::new(self.canvas_width, self.canvas_height)
    }

    pub fn validate(&self) -> Result<()> {
        if self.element_count > MAX_ELEMENTS {
            return Err(Error::Config(format!(
                "{} elements requested, at most {MAX_ELEMENTS}",
                self.element_count
            )));
        }
        let (w, h) = (self.canvas_width, self.canvas_height);
        if w < MIN_CANVAS || h < MIN_CANVAS {
            return Err(Error::CanvasTooSmall {
                width: w,
                height: h,
                detail: format!("templates need at least {MIN_CANVAS}x{MIN_CANVAS}"),
            });
        }
        if w % SNAP != 0 || h % SNAP != 0 {
            return Err(Error::Unaligned {
                alignment: SNAP,
                detail: format!("canvas {w}x{h}"),
            });
        }
        if let Some(f) = self.max_overlap {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("max_overlap {f} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerResponse {
    pub layout: AnonymousRegionLayout,
}

impl PlannerResponse {
    pub fn to_json(&self) -> String {
        serialize_layout_pretty(&self.layout)
    }
}

/// Box in grid units.
#[derive(Debug, Clone, Copy)]
struct Cell {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Cell {
    fn overlap(&self, o: &Cell) -> usize {
        let ix = (self.x + self.w).min(o.x + o.w).saturating_sub(self.x.max(o.x));
        let iy = (self.y + self.h).min(o.y + o.h).saturating_sub(self.y.max(o.y));
        ix * iy
    }

    fn area(&self) -> usize {
        self.w * self.h
    }
}

struct Grid {
    cols: usize,
    rows: usize,
}

impl Grid {
    /// Box from fractions of the canvas: center `(cx, cy)`, size `(w, h)`.
    fn place(&self, cx: f64, cy: f64, w: f64, h: f64) -> Cell {
        let w = ((w * self.cols as f64).round() as usize).clamp(1, self.cols);
        let h = ((h * self.rows as f64).round() as usize).clamp(1, self.rows);
        let x = (cx * self.cols as f64 - w as f64 / 2.0).round().max(0.0) as usize;
        let y = (cy * self.rows as f64 - h as f64 / 2.0).round().max(0.0) as usize;
        Cell {
            x: x.min(self.cols - w),
            y: y.min(self.rows - h),
            w,
            h,
        }
    }
}

fn accent(grid: &Grid, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Cell {
    let w = rng.random_range(lo..hi);
    let h = rng.random_range(lo..hi);
    grid.place(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), w, h)
}

fn accent_with_overlap(
    grid: &Grid,
    rng: &mut ChaCha8Rng,
    placed: &[Cell],
    max_overlap: Option<f64>,
    (lo, hi): (f64, f64),
) -> Cell {
    let mut cell = accent(grid, rng, lo, hi);
    let Some(limit) = max_overlap else {
        return cell;
    };
    for _ in 0..64 {
        let worst = placed
            .iter()
            .map(|p| p.overlap(&cell) as f64 / p.area().min(cell.area()) as f64)
            .fold(0.0, f64::max);
        if worst <= limit {
            break;
        }
        cell = accent(grid, rng, lo, hi);
    }
    cell
}

fn template_cells(req: &PlannerRequest, grid: &Grid, rng: &mut ChaCha8Rng) -> Vec<Cell> {
    let n = req.element_count;
    let mut cells: Vec<Cell> = Vec::with_capacity(n);
    let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
    match req.template {
        Template::Poster => {
            for i in 0..n {
                let c = match i {
                    0 => grid.place(0.5 + jitter(rng, 0.05), 0.12, rng.random_range(0.6..0.9), rng.random_range(0.08..0.15)),
                    1 => grid.place(0.5, 0.5 + jitter(rng, 0.05), rng.random_range(0.4..0.75), rng.random_range(0.3..0.5)),
                    2 => grid.place(0.5 + jitter(rng, 0.1), 0.86, rng.random_range(0.4..0.8), rng.random_range(0.06..0.12)),
                    3 => grid.place(0.5 + jitter(rng, 0.1), 0.94, rng.random_range(0.3..0.6), rng.random_range(0.04..0.08)),
                    _ => accent_with_overlap(grid, rng, &cells, req.max_overlap, (0.08, 0.3)),
                };
                cells.push(c);
            }
        }
        Template::Banner => {
            for i in 0..n {
                let c = match i {
                    0 => grid.place(0.3, 0.35 + jitter(rng, 0.05), rng.random_range(0.35..0.55), rng.random_range(0.15..0.3)),
                    1 => grid.place(0.75, 0.5, rng.random_range(0.3..0.45), rng.random_range(0.6..0.9)),
                    2 => grid.place(0.3, 0.7 + jitter(rng, 0.05), rng.random_range(0.3..0.5), rng.random_range(0.08..0.15)),
                    _ => accent_with_overlap(grid, rng, &cells, req.max_overlap, (0.06, 0.25)),
                };
                cells.push(c);
            }
        }
        Template::Scatter => {
            for _ in 0..n {
                let c = accent_with_overlap(grid, rng, &cells, req.max_overlap, (0.1, 0.4));
                cells.push(c);
            }
        }
        Template::Grid => {
            let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
            let rows = n.div_ceil(cols).max(1);
            let margin = rng.random_range(0.1..0.25);
            for i in 0..n {
                let (r, c) = (i / cols, i % cols);
                let (cw, ch) = (1.0 / cols as f64, 1.0 / rows as f64);
                cells.push(grid.place(
                    (c as f64 + 0.5) * cw,
                    (r as f64 + 0.5) * ch,
                    cw * (1.0 - margin),
                    ch * (1.0 - margin),
                ));
            }
        }
    }
    cells
}

/// Plan `element_count + 1` regions: full-canvas layer 0 plus one box per
/// element, in template order.
pub fn plan(req: &PlannerRequest) -> Result<PlannerResponse> {
    req.validate()?;
    let canvas = req.canvas();
    let grid = Grid {
        cols: canvas.width / SNAP,
        rows: canvas.height / SNAP,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut regions = vec![Region::full_canvas(0, canvas)];
    for (i, c) in template_cells(req, &grid, &mut rng).into_iter().enumerate() {
        let b = PixelBox::new(c.x * SNAP, c.y * SNAP, (c.x + c.w) * SNAP, (c.y + c.h) * SNAP);
        regions.push(Region::from_box(i + 1, b));
    }
    Ok(PlannerResponse {
        layout: AnonymousRegionLayout::new(canvas, regions),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayoutStats {
    pub layouts: usize,
    /// Layer count → number of layouts.
    pub layer_histogram: BTreeMap<usize, usize>,
    pub mean_layers: f64,
    /// Mean of region area / canvas area over every region.
    pub mean_area_fraction: f64,
    /// Mean per layout of the summed aligned-crop token counts.
    pub mean_tokens: f64,
}

pub fn layout_stats(layouts: &[AnonymousRegionLayout], cfg: &PipelineConfig) -> Result<LayoutStats> {
    let mut hist = BTreeMap::new();
    let (mut area_sum, mut regions, mut tokens) = (0.0, 0usize, 0usize);
    let align = cfg.alignment();
    for layout in layouts {
        *hist.entry(layout.len()).or_insert(0) += 1;
        let canvas = layout.canvas();
        let canvas_area = (canvas.width * canvas.height) as f64;
        for r in &layout.regions {
            let b = r
                .pixel_box(canvas)
                .ok_or_else(|| Error::Layout(format!("layer {} outside canvas", r.layer_index)))?;
            area_sum += b.area() as f64 / canvas_area;
            regions += 1;
            tokens += ceiling_aligned_crop(b, canvas, align)?.area() / (align * align);
        }
    }
    let n = layouts.len().max(1) as f64;
    Ok(LayoutStats {
        layouts: layouts.len(),
        mean_layers: regions as f64 / n,
        layer_histogram: hist,
        mean_area_fraction: if regions == 0 { 0.0 } else { area_sum / regions as f64 },
        mean_tokens: tokens as f64 / n,
    })
}
