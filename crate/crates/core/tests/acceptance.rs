//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p art-core --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use art_core::attention::{cost_report, region_family, AttentionConfig, SchemeKind};
use art_core::decoder::{batch_loss, grad, train_overfit, Batch, Conditioning, DecoderConfig, LossKind, Parameters};
use art_core::latent::{crop_and_flatten, prepare_latent_image_ids, toy_encode, PipelineConfig, TokenId};
use art_core::layout::{
    ceiling_aligned_crop, parse_layout, serialize_layout, AnonymousRegionLayout, Canvas, PixelBox, Region,
};
use art_core::metrics::{psnr, ssim, UNIT_RANGE_PEAK};
use art_core::planner::{plan, PlannerRequest, Template};
use art_core::rope::{attention_score, RopeSpec, DEFAULT_THETA, FULL_SCALE_AXES, TOY_AXES};
use art_core::transparency::{composite, decode_transparency, encode_transparency, synth_multilayer, RgbaLayer};
use art_core::Raster;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_id(rng: &mut ChaCha8Rng, span: i64) -> TokenId {
    [rng.random_range(-span..=span), rng.random_range(-span..=span), rng.random_range(-span..=span)]
}

/// `Re Σ q_j · conj(k_j) · e^{i(φ_q − φ_k)}` over complex channel pairs.
fn complex_score(q: &[f64], k: &[f64], pq: TokenId, pk: TokenId, axes: [usize; 3], theta: f64) -> f64 {
    let mut total = Complex64::new(0.0, 0.0);
    let mut pair = 0;
    for (axis, &dim) in axes.iter().enumerate() {
        for j in 0..dim / 2 {
            let freq = theta.powf(-(2.0 * j as f64) / dim as f64);
            let zq = Complex64::new(q[2 * pair], q[2 * pair + 1]);
            let zk = Complex64::new(k[2 * pair], k[2 * pair + 1]);
            let dphi = (pq[axis] - pk[axis]) as f64 * freq;
            total += zq * zk.conj() * Complex64::from_polar(1.0, dphi);
            pair += 1;
        }
    }
    total.re
}

fn c1_rope_complex_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let axes = if i % 2 == 0 { TOY_AXES } else { FULL_SCALE_AXES };
        let spec = RopeSpec::new(axes, DEFAULT_THETA).unwrap();
        let d = spec.head_dim();
        let (q, k) = (random_vec(&mut rng, d), random_vec(&mut rng, d));
        let (pq, pk) = (random_id(&mut rng, 128), random_id(&mut rng, 128));
        let got = attention_score(&q, &k, pq, pk, &spec).unwrap();
        worst = worst.max((got - complex_score(&q, &k, pq, pk, axes, DEFAULT_THETA)).abs());
    }
    check(worst <= 1e-9, format!("max abs error {worst:.2e} (tol 1e-9)"))
}

fn c2_shift_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let axes = if i % 2 == 0 { TOY_AXES } else { FULL_SCALE_AXES };
        let spec = RopeSpec::new(axes, DEFAULT_THETA).unwrap();
        let d = spec.head_dim();
        let (q, k) = (random_vec(&mut rng, d), random_vec(&mut rng, d));
        let (pq, pk) = (random_id(&mut rng, 64), random_id(&mut rng, 64));
        let base = attention_score(&q, &k, pq, pk, &spec).unwrap();
        for _ in 0..10 {
            let s = random_id(&mut rng, 256);
            let shift = |p: TokenId| [p[0] + s[0], p[1] + s[1], p[2] + s[2]];
            let moved = attention_score(&q, &k, shift(pq), shift(pk), &spec).unwrap();
            worst = worst.max((moved - base).abs());
        }
    }
    check(worst <= 1e-9, format!("max score change {worst:.2e} (tol 1e-9)"))
}

/// Ids by direct enumeration: region `i` gets layer id `i`, rows then columns.
fn ids_by_enumeration(layout: &AnonymousRegionLayout, align: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    for (i, r) in layout.regions.iter().enumerate() {
        let b = r.pixel_box(layout.canvas()).unwrap();
        for row in b.y1 / align..b.y2 / align {
            for col in b.x1 / align..b.x2 / align {
                out.push([i as i64, row as i64, col as i64]);
            }
        }
    }
    out
}

fn c3_id_fixtures() -> Outcome {
    let cfg = PipelineConfig::default();
    let c32 = Canvas::new(32, 32);
    let single = AnonymousRegionLayout::new(c32, vec![Region::full_canvas(0, c32)]);
    let double = AnonymousRegionLayout::new(c32, vec![Region::full_canvas(0, c32), Region::full_canvas(1, c32)]);
    let c = Canvas::new(64, 48);
    let nested = AnonymousRegionLayout::new(
        c,
        vec![
            Region::full_canvas(0, c),
            Region::from_box(1, PixelBox::new(16, 16, 48, 32)),
            Region::from_box(2, PixelBox::new(32, 0, 64, 48)),
        ],
    );
    let fixtures: [(&AnonymousRegionLayout, Vec<TokenId>); 3] = [
        (&single, vec![[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]),
        (
            &double,
            vec![[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]],
        ),
        (
            &nested,
            vec![
                [0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3],
                [0, 1, 0], [0, 1, 1], [0, 1, 2], [0, 1, 3],
                [0, 2, 0], [0, 2, 1], [0, 2, 2], [0, 2, 3],
                [1, 1, 1], [1, 1, 2],
                [2, 0, 2], [2, 0, 3], [2, 1, 2], [2, 1, 3], [2, 2, 2], [2, 2, 3],
            ],
        ),
    ];
    for (i, (layout, want)) in fixtures.iter().enumerate() {
        let got = prepare_latent_image_ids(layout, &cfg).unwrap();
        if &got != want {
            return Err(format!("fixture {} differs: {got:?}", i + 1));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let align = cfg.alignment();
    for case in 0..50 {
        let (gw, gh) = (rng.random_range(2..=10), rng.random_range(2..=10));
        let canvas = Canvas::new(gw * align, gh * align);
        let mut regions = vec![Region::full_canvas(0, canvas)];
        for l in 1..=rng.random_range(0..=6) {
            let (x1, y1) = (rng.random_range(0..gw), rng.random_range(0..gh));
            let (x2, y2) = (rng.random_range(x1 + 1..=gw), rng.random_range(y1 + 1..=gh));
            regions.push(Region::from_box(l, PixelBox::new(x1 * align, y1 * align, x2 * align, y2 * align)));
        }
        let layout = AnonymousRegionLayout::new(canvas, regions);
        let got = prepare_latent_image_ids(&layout, &cfg).unwrap();
        let latent = toy_encode(&Raster::new(canvas.width, canvas.height, 3), &cfg).unwrap();
        let mut assembled = Vec::new();
        for (i, r) in layout.regions.iter().enumerate() {
            let block = crop_and_flatten(&latent, r.pixel_box(canvas).unwrap(), i, &cfg).unwrap();
            assembled.extend(block.ids);
        }
        if got != assembled || got != ids_by_enumeration(&layout, align) {
            return Err(format!("random layout {case} differs from crop-then-concat"));
        }
    }
    check(true, "3 fixtures exact, 50 random layouts match crop-then-concat".into())
}

fn random_layer(rng: &mut ChaCha8Rng, w: usize, h: usize) -> RgbaLayer {
    let mut data = Vec::with_capacity(w * h * 4);
    for _ in 0..w * h {
        data.extend(random_vec(rng, 3));
        let a = match rng.random_range(0..10) {
            0 => -1.0,
            1 => 1.0,
            _ => rng.random_range(-1.0..=1.0),
        };
        data.push(a);
    }
    RgbaLayer::new(Raster::from_vec(w, h, 4, data).unwrap()).unwrap()
}

fn c4_transparency_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Accurate decoding for alpha > -0.999 needs coefficient eps = 5e-4.
    let eps = 5e-4;
    let mut worst: f64 = 0.0;
    let mut transparent = 0usize;
    for _ in 0..100 {
        let layer = random_layer(&mut rng, 64, 64);
        let alpha = layer.alpha();
        let gray = encode_transparency(&layer).unwrap();
        let out = decode_transparency(&gray, &alpha, eps).unwrap();
        let default = decode_transparency(&gray, &alpha, art_core::transparency::DEFAULT_DECODE_EPS).unwrap();
        for (i, &a) in alpha.data.iter().enumerate() {
            let want = layer.pixels.pixel(i / 64, i % 64);
            if a > -0.999 {
                for c in 0..3 {
                    worst = worst.max((out.data[i * 3 + c] - want[c]).abs());
                }
            }
            if a > -0.998 {
                for c in 0..3 {
                    worst = worst.max((default.data[i * 3 + c] - want[c]).abs());
                }
            }
            if a == -1.0 {
                transparent += 1;
                if out.data[i * 3..i * 3 + 3] != [0.0; 3] || default.data[i * 3..i * 3 + 3] != [0.0; 3] {
                    return Err(format!("transparent pixel {i} did not decode to 0"));
                }
            }
        }
    }
    check(
        worst < 1e-6 && transparent > 0,
        format!("max abs error {worst:.2e} (tol 1e-6), {transparent} transparent pixels exactly 0"),
    )
}

fn c5_composite_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (w, h) = (16usize, 16usize);
    let canvas = Canvas::new(w, h);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let base = Raster::from_vec(w, h, 3, random_vec(&mut rng, w * h * 3)).unwrap();
        let mut stack = Vec::new();
        for l in 1..=rng.random_range(0..=5) {
            let (x1, y1) = (rng.random_range(0..w), rng.random_range(0..h));
            let (x2, y2) = (rng.random_range(x1 + 1..=w), rng.random_range(y1 + 1..=h));
            let b = PixelBox::new(x1, y1, x2, y2);
            stack.push((random_layer(&mut rng, b.width(), b.height()), Region::from_box(l, b)));
        }
        let got = composite(&base, &stack).unwrap();
        for row in 0..h {
            for col in 0..w {
                for c in 0..3 {
                    let mut v = base.get(row, col, c);
                    for (layer, region) in &stack {
                        let b = region.pixel_box(canvas).unwrap();
                        if row >= b.y1 && row < b.y2 && col >= b.x1 && col < b.x2 {
                            let px = layer.pixels.pixel(row - b.y1, col - b.x1);
                            let a = 0.5 * px[3] + 0.5;
                            v = a * px[c] + (1.0 - a) * v;
                        }
                    }
                    worst = worst.max((got.get(row, col, c) - v).abs());
                }
            }
        }
    }
    check(worst <= 1e-12, format!("max abs error {worst:.2e} (tol 1e-12)"))
}

/// Smallest-area aligned box containing `b`, ties broken by `(x1, y1)`.
fn brute_force_crop(b: PixelBox, canvas: Canvas, align: usize) -> PixelBox {
    let xs: Vec<usize> = (0..=canvas.width).step_by(align).collect();
    let ys: Vec<usize> = (0..=canvas.height).step_by(align).collect();
    let mut best: Option<(usize, usize, usize, PixelBox)> = None;
    for &x1 in &xs {
        for &x2 in &xs {
            for &y1 in &ys {
                for &y2 in &ys {
                    if x1 > b.x1 || y1 > b.y1 || x2 < b.x2 || y2 < b.y2 {
                        continue;
                    }
                    let cand = (( x2 - x1) * (y2 - y1), x1, y1, PixelBox::new(x1, y1, x2, y2));
                    if best.is_none_or(|cur| (cand.0, cand.1, cand.2) < (cur.0, cur.1, cur.2)) {
                        best = Some(cand);
                    }
                }
            }
        }
    }
    best.expect("the canvas itself encloses every box").3
}

fn c6_crop_oracle() -> Outcome {
    let mut checked = 0usize;
    for side in [48usize, 64] {
        let canvas = Canvas::new(side, side);
        for x1 in 0..side {
            for x2 in x1 + 1..=side {
                for y1 in 0..side {
                    for y2 in y1 + 1..=side {
                        let b = PixelBox::new(x1, y1, x2, y2);
                        let got = ceiling_aligned_crop(b, canvas, 16).map_err(|e| format!("{b:?}: {e}"))?;
                        let want = brute_force_crop(b, canvas, 16);
                        if got != want {
                            return Err(format!("{b:?} on {side}²: got {got:?}, oracle {want:?}"));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    check(true, format!("{checked} boxes on 48² and 64² match the brute-force oracle"))
}

fn pairs(scheme: SchemeKind, k: usize) -> (u64, u64) {
    let layout = region_family(Canvas::new(1024, 1024), (64, 64), k).unwrap();
    let r = cost_report(&layout, scheme, &AttentionConfig::default(), &PipelineConfig::default()).unwrap();
    (r.total_tokens, r.attention_pairs)
}

fn c7_cost_scaling() -> Outcome {
    // 1024² canvas: 64×64 = 4096 canvas tokens, 4×4 = 16 tokens per region.
    let n = 4096u64;
    let expect_tokens = |scheme, k: u64| match scheme {
        SchemeKind::RegionalFull => 2 * n + 16 * k,
        _ => 2 * n + k * n,
    };
    for scheme in [SchemeKind::RegionalFull, SchemeKind::Full] {
        for k in [10u64, 50] {
            let (t, p) = pairs(scheme, k as usize);
            let want = expect_tokens(scheme, k);
            if t != want || p != want * want {
                return Err(format!("{scheme} K={k}: {t} tokens / {p} pairs, expected {want} / {}", want * want));
            }
        }
    }
    let regional = pairs(SchemeKind::RegionalFull, 50).1 as f64 / pairs(SchemeKind::RegionalFull, 10).1 as f64;
    let full = pairs(SchemeKind::Full, 50).1 as f64 / pairs(SchemeKind::Full, 10).1 as f64;
    check(
        regional <= 1.25 && full >= 15.0,
        format!("K=10→50 pair growth: regional {regional:.4}× (≤ 1.25), full {full:.3}× (≥ 15)"),
    )
}

fn c8_pair_ratio() -> Outcome {
    let ratio = pairs(SchemeKind::Full, 50).1 as f64 / pairs(SchemeKind::RegionalFull, 50).1 as f64;
    check(ratio >= 12.0, format!("full/regional pairs at K=50 = {ratio:.1} (≥ 12, cost-model proxy)"))
}

fn c9_gradient_check() -> Outcome {
    let pipe = PipelineConfig {
        vae_downsample: 2,
        patch_size: 2,
        latent_channels: 3,
        projection_seed: 1,
    };
    let cfg = DecoderConfig {
        depth: 2,
        hidden: 16,
        mlp_dim: 16,
        heads: 2,
        in_channels: pipe.token_dim(),
        patch_px: pipe.alignment(),
        rope: RopeSpec::new([2, 2, 4], DEFAULT_THETA).unwrap(),
        condition_on: Conditioning { merged: true, background: true },
        ..DecoderConfig::toy(&pipe)
    };
    let count = cfg.param_count();
    if count > 5000 {
        return Err(format!("{count} parameters exceeds 5k"));
    }
    let images: Vec<_> = (0..2).map(|s| synth_multilayer(s, 2, Canvas::new(32, 32)).unwrap()).collect();
    let batch = Batch::from_images(&images, &pipe, &cfg).unwrap();
    let params = Parameters::random(&cfg, 9, 0.3).unwrap();
    let g = grad(&params, &batch, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = rng.random_range(0..params.len());
        let mut up = params.clone();
        up.values[i] += h;
        let mut down = params.clone();
        down.values[i] -= h;
        let numeric = (batch_loss(&up, &batch, &cfg, LossKind::L1).unwrap()
            - batch_loss(&down, &batch, &cfg, LossKind::L1).unwrap())
            / (2.0 * h);
        worst = worst.max((numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-7));
    }
    check(worst <= 1e-4, format!("{count} params, 50 coords, max relative error {worst:.2e} (tol 1e-4)"))
}

/// Learning rate and seed frozen from the reference run (final/initial 0.0390).
const OVERFIT_LR: f64 = 1.0;
const OVERFIT_SEED: u64 = 0;

fn c10_toy_overfit() -> Outcome {
    let pipe = PipelineConfig::default();
    let cfg = DecoderConfig::toy(&pipe);
    let samples: Vec<_> = (0..4).map(|s| synth_multilayer(s, 2, Canvas::new(64, 64)).unwrap()).collect();
    let (_, trace) = train_overfit(&samples, &cfg, &pipe, 2000, OVERFIT_LR, OVERFIT_SEED).map_err(|e| e.to_string())?;
    let (first, last) = (trace[0].l1_loss, trace.last().unwrap().l1_loss);
    let (_, again) = train_overfit(&samples, &cfg, &pipe, 20, OVERFIT_LR, OVERFIT_SEED).map_err(|e| e.to_string())?;
    let same = again.iter().zip(&trace).all(|(a, b)| a.l1_loss.to_bits() == b.l1_loss.to_bits());
    let ratio = last / first;
    check(
        ratio <= 0.05 && same,
        format!(
            "L1 {first:.4} → {last:.4} after {} steps, ratio {ratio:.4} (≤ 0.05), rerun prefix bitwise equal: {same}",
            trace.len()
        ),
    )
}

const DESIGN_EXAMPLE: &str = r#"[
    {"layer": 0, "x": 512, "y": 512, "width": 1024, "height": 1024},
    {"layer": 1, "x": 744, "y": 496, "width": 496, "height": 256},
    {"layer": 2, "x": 856, "y": 704, "width": 240, "height": 96},
    {"layer": 3, "x": 792, "y": 640, "width": 368, "height": 64},
    {"layer": 4, "x": 840, "y": 336, "width": 272, "height": 64}
]"#;

fn c11_wire_format() -> Outcome {
    let canvas = Canvas::new(1024, 1024);
    let planned = plan(&PlannerRequest::new(canvas, 0, 1, Template::Poster)).unwrap();
    let parsed = parse_layout(&planned.to_json(), canvas).unwrap();
    let want = Region { layer_index: 0, cx: 512, cy: 512, width: 1024, height: 1024 };
    if parsed.regions != [want] {
        return Err(format!("planner layer 0 parsed as {:?}", parsed.regions));
    }
    let example = parse_layout(DESIGN_EXAMPLE, canvas).unwrap();
    let again = parse_layout(&serialize_layout(&example), canvas).unwrap();
    let compact: String = DESIGN_EXAMPLE.chars().filter(|c| !c.is_whitespace()).collect();
    check(
        again == example && serialize_layout(&example) == compact,
        "empty plan is the full-canvas object; 5-region example round-trips byte-exact".into(),
    )
}

fn psnr_oracle(a: &Raster, b: &Raster, peak: f64) -> f64 {
    let mut se = 0.0;
    for i in 0..a.data.len() {
        se += (a.data[i] - b.data[i]).powi(2);
    }
    10.0 * (peak * peak / (se / a.data.len() as f64)).log10()
}

/// Direct 2-D windowed SSIM with explicit means and central moments.
fn ssim_oracle(a: &Raster, b: &Raster) -> f64 {
    let mut win = 11.min(a.width).min(a.height);
    if win % 2 == 0 {
        win -= 1;
    }
    let half = (win / 2) as f64;
    let mut weights = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let d2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
            weights[i * win + j] = (-d2 / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let (c1, c2) = ((0.01f64 * 2.0).powi(2), (0.03f64 * 2.0).powi(2));
    let (mut sum, mut count) = (0.0, 0);
    for ch in 0..a.channels {
        for r in 0..=a.height - win {
            for c in 0..=a.width - win {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let w = weights[i * win + j];
                        mx += w * a.get(r + i, c + j, ch);
                        my += w * b.get(r + i, c + j, ch);
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..win {
                    for j in 0..win {
                        let w = weights[i * win + j];
                        let (dx, dy) = (a.get(r + i, c + j, ch) - mx, b.get(r + i, c + j, ch) - my);
                        vx += w * dx * dx;
                        vy += w * dy * dy;
                        cov += w * dx * dy;
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    sum / count as f64
}

fn c12_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for &(w, h, ch) in &[(32usize, 24usize, 3usize), (7, 9, 3), (16, 16, 1), (40, 33, 4)] {
        let a = Raster::from_vec(w, h, ch, random_vec(&mut rng, w * h * ch)).unwrap();
        let noisy: Vec<f64> = a
            .data
            .iter()
            .map(|v| (v + 0.1 * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0))
            .collect();
        let b = Raster::from_vec(w, h, ch, noisy).unwrap();
        let p = psnr(&a, &b, UNIT_RANGE_PEAK).unwrap();
        let s = ssim(&a, &b).unwrap();
        worst = worst
            .max((p - psnr_oracle(&a, &b, UNIT_RANGE_PEAK)).abs())
            .max((s - ssim_oracle(&a, &b)).abs())
            .max((s - ssim(&b, &a).unwrap()).abs());
        if psnr(&a, &a, UNIT_RANGE_PEAK).unwrap() != f64::INFINITY || ssim(&a, &a).unwrap() != 1.0 {
            return Err(format!("identical-input sentinels broken on {w}x{h}x{ch}"));
        }
    }
    check(worst <= 1e-6, format!("max deviation from scalar oracles {worst:.2e} (tol 1e-6); sentinels +inf and 1"))
}

type Criterion = (u32, &'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "rope matches complex-exponential oracle", c1_rope_complex_oracle, Some(Duration::from_secs(5))),
        (2, "rope scores invariant to global id shifts", c2_shift_invariance, None),
        (3, "latent ids match fixtures and crop-then-concat", c3_id_fixtures, None),
        (4, "transparency round-trip", c4_transparency_roundtrip, None),
        (5, "composite matches per-pixel over oracle", c5_composite_oracle, None),
        (6, "aligned crop matches brute force", c6_crop_oracle, None),
        (7, "attention cost scaling", c7_cost_scaling, Some(Duration::from_secs(1))),
        (8, "full vs regional pair ratio", c8_pair_ratio, None),
        (9, "decoder gradient vs finite differences", c9_gradient_check, Some(Duration::from_secs(60))),
        (10, "toy decoder overfits", c10_toy_overfit, Some(Duration::from_secs(300))),
        (11, "layout wire format", c11_wire_format, None),
        (12, "metrics match scalar oracles", c12_metric_oracles, None),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run, limit) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(d), Some(l)) if elapsed > l => Err(format!("{d}; took {elapsed:.2?}, limit {l:?}")),
            (o, _) => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {id:>2} {name}: {detail} [{elapsed:.2?}]");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
