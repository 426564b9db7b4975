//! wasm-bindgen bindings for the browser demo in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function so the logic can
//! be tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use art_core::attention::{scaling_sweep, sweep_csv, AttentionConfig, SchemeKind};
use art_core::latent::PipelineConfig;
use art_core::layout::{parse_layout, validate_layout, AnonymousRegionLayout, Canvas};
use art_core::planner::{plan, PlannerRequest, Template};
use art_core::raster::Raster;
use art_core::transparency::{composite, RgbaLayer};

/// Planned layout as compact JSON. A negative `elements` samples the count.
pub fn plan_json(width: usize, height: usize, elements: i32, seed: u64, template: &str) -> Result<String, String> {
    let canvas = Canvas::new(width, height);
    let template: Template = template.parse().map_err(|e: art_core::Error| e.to_string())?;
    let req = match usize::try_from(elements) {
        Ok(n) => PlannerRequest::new(canvas, n, seed, template),
        Err(_) => PlannerRequest { template, ..PlannerRequest::sampled(canvas, seed) },
    };
    let resp = plan(&req).map_err(|e| e.to_string())?;
    Ok(art_core::layout::serialize_layout(&resp.layout))
}

fn checked_layout(json: &str, width: usize, height: usize) -> Result<AnonymousRegionLayout, String> {
    let layout = parse_layout(json, Canvas::new(width, height)).map_err(|e| e.to_string())?;
    if let Some(v) = validate_layout(&layout).first() {
        return Err(v.message.clone());
    }
    Ok(layout)
}

fn paint_layer(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbaLayer {
    let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.9..0.9));
    let opacity: f64 = rng.random_range(0.6..1.0);
    let ellipse = rng.random_bool(0.5);
    let mut px = Raster::new(w, h, 4);
    for row in 0..h {
        for col in 0..w {
            let dx = (col as f64 + 0.5) / w as f64 * 2.0 - 1.0;
            let dy = (row as f64 + 0.5) / h as f64 * 2.0 - 1.0;
            let r = if ellipse { (dx * dx + dy * dy).sqrt() } else { dx.abs().max(dy.abs()) };
            let a = opacity * ((1.0 - r) * 6.0).clamp(0.0, 1.0);
            let p = px.pixel_mut(row, col);
            if a > 0.0 {
                p[..3].copy_from_slice(&color);
            }
            p[3] = 2.0 * a - 1.0;
        }
    }
    RgbaLayer::new(px).expect("painted values stay in range")
}

/// Paint one seeded shape per foreground region, composite them over a
/// gradient background and return the canvas as RGBA bytes.
pub fn render_rgba(layout_json: &str, width: usize, height: usize, seed: u64) -> Result<Vec<u8>, String> {
    let layout = checked_layout(layout_json, width, height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
    let bottom: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
    let mut base = Raster::new(width, height, 3);
    for row in 0..height {
        let t = row as f64 / height.max(2).saturating_sub(1) as f64;
        for col in 0..width {
            let p = base.pixel_mut(row, col);
            for c in 0..3 {
                p[c] = (1.0 - t) * top[c] + t * bottom[c];
            }
        }
    }
    let layers: Vec<_> = layout
        .foregrounds()
        .map(|r| {
            let b = r.pixel_box(layout.canvas()).expect("validated");
            (paint_layer(&mut rng, b.width(), b.height()), *r)
        })
        .collect();
    let out = composite(&base, &layers).map_err(|e| e.to_string())?;
    let mut bytes = Vec::with_capacity(width * height * 4);
    for px in out.data.chunks_exact(3) {
        bytes.extend(px.iter().map(|&v| art_core::io::to_u8(v)));
        bytes.push(255);
    }
    Ok(bytes)
}

/// Sweep CSV for square regions of side `region` on a 1024² canvas.
pub fn sweep(scheme: &str, k_from: usize, k_to: usize, region: usize) -> Result<String, String> {
    let scheme: SchemeKind = scheme.parse().map_err(|e: art_core::Error| e.to_string())?;
    if k_from > k_to {
        return Err(format!("empty range {k_from}..{k_to}"));
    }
    let ks: Vec<usize> = (k_from..=k_to).collect();
    let rows = scaling_sweep(
        Canvas::new(1024, 1024),
        (region, region),
        &ks,
        scheme,
        &AttentionConfig::default(),
        &PipelineConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    Ok(sweep_csv(&rows))
}

#[wasm_bindgen(js_name = planLayout)]
pub fn plan_layout(width: u32, height: u32, elements: i32, seed: u32, template: &str) -> Result<String, JsError> {
    plan_json(width as usize, height as usize, elements, seed.into(), template).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = renderLayers)]
pub fn render_layers(layout_json: &str, width: u32, height: u32, seed: u32) -> Result<Vec<u8>, JsError> {
    render_rgba(layout_json, width as usize, height as usize, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = costSweep)]
pub fn cost_sweep(scheme: &str, k_from: u32, k_to: u32, region: u32) -> Result<String, JsError> {
    sweep(scheme, k_from as usize, k_to as usize, region as usize).map_err(|e| JsError::new(&e))
}
