//! 8-bit PNG and layer-manifest I/O.
//!
//! Stored values map linearly: `v = x / 127.5 − 1` on read and
//! `x = round((v + 1) · 127.5)` (clamped) on write. The encoder configuration
//! is fixed so identical rasters always produce identical bytes.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{parse_layout, serialize_layout_pretty, validate_layout, Canvas};
use crate::raster::Raster;
use crate::transparency::{MultiLayerImage, RgbaLayer};

pub fn from_u8(x: u8) -> f64 {
    x as f64 / 127.5 - 1.0
}

pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Decode PNG bytes to a 3- or 4-channel raster. Gray images are expanded to
/// RGB, 16-bit samples are reduced to 8 bits.
pub fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_ch = info.color_type.samples();
    let buf = &buf[..info.buffer_size()];
    let (channels, pick): (usize, fn(&[u8], usize) -> u8) = match info.color_type {
        png::ColorType::Rgb => (3, |px, c| px[c]),
        png::ColorType::Rgba => (4, |px, c| px[c]),
        png::ColorType::Grayscale => (3, |px, _| px[0]),
        png::ColorType::GrayscaleAlpha => (4, |px, c| if c == 3 { px[1] } else { px[0] }),
        other => return Err(Error::Png(format!("unsupported colour type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf.chunks_exact(info.line_size).take(h) {
        for px in row[..w * src_ch].chunks_exact(src_ch) {
            data.extend((0..channels).map(|c| from_u8(pick(px, c))));
        }
    }
    Raster::from_vec(w, h, channels, data)
}

/// Encode a 3- or 4-channel raster as an 8-bit PNG.
pub fn encode_png(raster: &Raster) -> Result<Vec<u8>> {
    let color = match raster.channels {
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        c => return Err(Error::Shape(format!("cannot write {c}-channel raster as PNG"))),
    };
    if raster.width == 0 || raster.height == 0 {
        return Err(Error::Shape("cannot write an empty PNG".into()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, raster.width as u32, raster.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Paeth);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let bytes: Vec<u8> = raster.data.iter().map(|&v| to_u8(v)).collect();
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::Png(e.to_string()))?;
        writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<Raster> {
    decode_png(&std::fs::read(path)?)
}

pub fn write_png(path: &Path, raster: &Raster) -> Result<()> {
    std::fs::write(path, encode_png(raster)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub layer: usize,
    pub file: String,
}

/// Pairs layer PNGs with a layout file. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub canvas_width: usize,
    pub canvas_height: usize,
    /// RGB PNG covering the whole canvas.
    pub background: String,
    /// Layout JSON; layer 0 is the background.
    pub layout: String,
    /// RGBA PNGs, each the size of its region.
    pub layers: Vec<ManifestLayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged: Option<String>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn rgb_only(r: Raster, what: &str) -> Result<Raster> {
    match r.channels {
        3 => Ok(r),
        4 => Ok(r.select_channels(0..3)),
        c => Err(Error::Shape(format!("{what}: {c} channels"))),
    }
}

/// Load a layered image described by a manifest.
pub fn load_manifest(path: &Path) -> Result<MultiLayerImage> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let dir = base_dir(path);
    let canvas = Canvas::new(manifest.canvas_width, manifest.canvas_height);
    let layout = parse_layout(&std::fs::read_to_string(dir.join(&manifest.layout))?, canvas)?;
    if let Some(v) = validate_layout(&layout).first() {
        return Err(Error::Layout(v.message.clone()));
    }
    let background = rgb_only(read_png(&dir.join(&manifest.background))?, "background")?;
    if (background.width, background.height) != (canvas.width, canvas.height) {
        return Err(Error::Shape(format!(
            "background is {}x{}, canvas is {}x{}",
            background.width, background.height, canvas.width, canvas.height
        )));
    }
    let mut foregrounds = Vec::new();
    for region in layout.foregrounds() {
        let entry = manifest
            .layers
            .iter()
            .find(|l| l.layer == region.layer_index)
            .ok_or_else(|| Error::Layout(format!("no file for layer {}", region.layer_index)))?;
        let pixels = read_png(&dir.join(&entry.file))?;
        if pixels.channels != 4 {
            return Err(Error::Shape(format!("{}: layer PNG must be RGBA", entry.file)));
        }
        let b = region
            .pixel_box(canvas)
            .ok_or_else(|| Error::Layout(format!("layer {} outside canvas", region.layer_index)))?;
        if (pixels.width, pixels.height) != (b.width(), b.height()) {
            return Err(Error::Shape(format!(
                "{} is {}x{}, region is {}x{}",
                entry.file,
                pixels.width,
                pixels.height,
                b.width(),
                b.height()
            )));
        }
        foregrounds.push((RgbaLayer::new(pixels)?, *region));
    }
    if let Some(extra) = manifest
        .layers
        .iter()
        .find(|l| !layout.foregrounds().any(|r| r.layer_index == l.layer))
    {
        return Err(Error::Layout(format!("layer {} is not in the layout", extra.layer)));
    }
    let merged = match &manifest.merged {
        Some(f) => Some(rgb_only(read_png(&dir.join(f))?, "merged")?),
        None => None,
    };
    Ok(MultiLayerImage {
        canvas,
        background,
        foregrounds,
        merged,
    })
}

/// Write PNGs, the layout and a manifest into `dir`; returns the manifest path.
pub fn save_multilayer(image: &MultiLayerImage, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    write_png(&dir.join("background.png"), &image.background)?;
    let mut layers = Vec::new();
    for (layer, region) in &image.foregrounds {
        let file = format!("layer_{:02}.png", region.layer_index);
        write_png(&dir.join(&file), &layer.pixels)?;
        layers.push(ManifestLayer {
            layer: region.layer_index,
            file,
        });
    }
    let merged = match &image.merged {
        Some(m) => {
            write_png(&dir.join("merged.png"), m)?;
            Some("merged.png".to_string())
        }
        None => None,
    };
    std::fs::write(dir.join("layout.json"), serialize_layout_pretty(&image.layout()))?;
    let manifest = Manifest {
        canvas_width: image.canvas.width,
        canvas_height: image.canvas.height,
        background: "background.png".into(),
        layout: "layout.json".into(),
        layers,
        merged,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
