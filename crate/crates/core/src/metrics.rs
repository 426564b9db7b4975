//! PSNR and SSIM on `[-1,1]` rasters.
//!
//! PSNR of identical inputs is `f64::INFINITY`; in JSON it is written as the
//! string `"inf"`.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Peak-to-peak range of the `[-1,1]` scale.
pub const UNIT_RANGE_PEAK: f64 = 2.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// `10·log10(peak² / MSE)`, or `+∞` when the inputs are identical.
pub fn psnr(a: &Raster, b: &Raster, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    psnr_slices(&a.data, &b.data, peak)
}

fn psnr_slices(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Shape("empty raster".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (peak * peak / mse).log10())
    }
}

/// Per-layer PSNR of the RGB channels and of the alpha channel, on RGBA
/// rasters with peak 2.
pub fn layer_psnr(pred: &[Raster], gt: &[Raster]) -> Result<(Vec<f64>, Vec<f64>)> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted layers vs {} ground-truth layers",
            pred.len(),
            gt.len()
        )));
    }
    let mut rgb = Vec::with_capacity(pred.len());
    let mut alpha = Vec::with_capacity(pred.len());
    for (p, g) in pred.iter().zip(gt) {
        p.ensure_same_shape(g)?;
        if p.channels != 4 {
            return Err(Error::Shape(format!("layer has {} channels, want 4", p.channels)));
        }
        rgb.push(psnr(&p.select_channels(0..3), &g.select_channels(0..3), UNIT_RANGE_PEAK)?);
        alpha.push(psnr(&p.select_channels(3..4), &g.select_channels(3..4), UNIT_RANGE_PEAK)?);
    }
    Ok((rgb, alpha))
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Odd window side actually used for an image: 11, or less for tiny images.
pub fn ssim_window(width: usize, height: usize) -> usize {
    let w = SSIM_WINDOW.min(width).min(height);
    if w % 2 == 0 {
        w - 1
    } else {
        w
    }
}

/// Separable "valid" Gaussian filter of one plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = kernel.len();
    let ow = width + 1 - k;
    let oh = height + 1 - k;
    let mut horiz = vec![0.0; ow * height];
    for r in 0..height {
        for c in 0..ow {
            horiz[r * ow + c] = (0..k).map(|t| kernel[t] * plane[r * width + c + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| kernel[t] * horiz[(r + t) * ow + c]).sum();
        }
    }
    (out, ow, oh)
}

/// Mean SSIM over all valid windows and channels (Gaussian 11×11, σ = 1.5,
/// k1 = 0.01, k2 = 0.03, dynamic range 2).
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::Shape("empty raster".into()));
    }
    let c1 = (SSIM_K1 * UNIT_RANGE_PEAK).powi(2);
    let c2 = (SSIM_K2 * UNIT_RANGE_PEAK).powi(2);
    let kernel = gaussian_kernel(ssim_window(a.width, a.height), SSIM_SIGMA);
    let (w, h) = (a.width, a.height);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..a.channels {
        let x: Vec<f64> = a.data.iter().skip(ch).step_by(a.channels).copied().collect();
        let y: Vec<f64> = b.data.iter().skip(ch).step_by(b.channels).copied().collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, ..) = filter_valid(&x, w, h, &kernel);
        let (my, ..) = filter_valid(&y, w, h, &kernel);
        let (exx, ..) = filter_valid(&xx, w, h, &kernel);
        let (eyy, ..) = filter_valid(&yy, w, h, &kernel);
        let (exy, ..) = filter_valid(&xy, w, h, &kernel);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cov = exy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// PSNR and SSIM between the reference-stream output and the recomposited layers.
pub fn merged_consistency(reference: &Raster, composed: &Raster) -> Result<(f64, f64)> {
    Ok((
        psnr(reference, composed, UNIT_RANGE_PEAK)?,
        ssim(reference, composed)?,
    ))
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn serialize_db_list<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    struct Db(f64);
    impl Serialize for Db {
        fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
            serialize_db(&self.0, s)
        }
    }
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for &x in v {
        seq.serialize_element(&Db(x))?;
    }
    seq.end()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    #[serde(serialize_with = "serialize_db")]
    pub psnr_merged: f64,
    #[serde(serialize_with = "serialize_db_list")]
    pub psnr_layer_rgb: Vec<f64>,
    #[serde(serialize_with = "serialize_db_list")]
    pub psnr_layer_alpha: Vec<f64>,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(reference: &Raster, composed: &Raster, pred_layers: &[Raster], gt_layers: &[Raster]) -> Result<Self> {
        let (psnr_merged, ssim) = merged_consistency(reference, composed)?;
        let (psnr_layer_rgb, psnr_layer_alpha) = layer_psnr(pred_layers, gt_layers)?;
        Ok(Self {
            psnr_merged,
            psnr_layer_rgb,
            psnr_layer_alpha,
            ssim,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let db = |v: f64| {
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v:.4}")
            }
        };
        let mut out = format!(
            "{:<18}{:>12}\n{:<18}{:>12}\n{:<18}{:>12.6}\n",
            "metric", "value", "psnr_merged_db", db(self.psnr_merged), "ssim", self.ssim
        );
        for (i, (r, a)) in self.psnr_layer_rgb.iter().zip(&self.psnr_layer_alpha).enumerate() {
            out.push_str(&format!("{:<18}{:>12}\n", format!("layer{}_rgb_db", i + 1), db(*r)));
            out.push_str(&format!("{:<18}{:>12}\n", format!("layer{}_alpha_db", i + 1), db(*a)));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Raster {
        Raster::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_is_infinite() {
        let a = Raster::filled(4, 4, 3, 0.3);
        assert_eq!(psnr(&a, &a, 2.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn closed_form_twenty_db() {
        let a = Raster::filled(10, 10, 1, 0.0);
        let b = Raster::filled(10, 10, 1, 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_offset_twenty_db() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gt = random(&mut rng, 8, 8, 4);
        let mut pred = gt.clone();
        for px in pred.data.chunks_exact_mut(4) {
            px[3] += 0.2;
        }
        let (rgb, alpha) = layer_psnr(&[pred], &[gt]).unwrap();
        assert_eq!(rgb, vec![f64::INFINITY]);
        assert!((alpha[0] - 20.0).abs() < 1e-9);
    }

    #[test]
    fn shape_and_count_mismatch() {
        let a = Raster::new(4, 4, 3);
        assert!(psnr(&a, &Raster::new(4, 5, 3), 2.0).is_err());
        assert!(ssim(&a, &Raster::new(4, 4, 1)).is_err());
        assert!(layer_psnr(&[Raster::new(2, 2, 4)], &[]).is_err());
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (w, h) in [(32, 32), (16, 24), (7, 5), (1, 1)] {
            let a = random(&mut rng, w, h, 3);
            assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 20, 20, 3);
        let b = random(&mut rng, 20, 20, 3);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_lowers_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 8, 8, 3);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 1e-3);
        assert!(psnr(&a, &b, 2.0).unwrap().is_finite());
    }

    #[test]
    fn report_json_uses_inf_token() {
        let a = Raster::filled(12, 12, 3, 0.1);
        let l = Raster::filled(4, 4, 4, 0.5);
        let r = MetricReport::compute(&a, &a, &[l.clone()], &[l]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["psnr_merged"], "inf");
        assert_eq!(v["psnr_layer_rgb"][0], "inf");
        assert_eq!(v["ssim"], 1.0);
        assert!(r.table().contains("layer1_alpha_db"));
    }
}
