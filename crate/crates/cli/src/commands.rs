use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use art_core::attention::{scaling_sweep, scaling_sweep_parallel, sweep_csv, AttentionConfig, SchemeKind};
use art_core::decoder::{save_checkpoint, trace_csv, train_overfit, Conditioning, DecoderConfig};
use art_core::io::{load_manifest, read_png, write_png};
use art_core::latent::{encode_multilayer, prepare_latent_image_ids, read_sequence, with_reference_stream, write_sequence, PipelineConfig, TokenId};
use art_core::layout::{parse_layout, serialize_layout, validate_layout, AnonymousRegionLayout, Canvas};
use art_core::metrics::MetricReport;
use art_core::planner::{self, PlannerRequest, Template};
use art_core::rope::{rope_3d, RopeSpec};
use art_core::transparency::{composite as composite_layers, decode_transparency, encode_transparency, synth_multilayer, GrayBackedLayer, RgbaLayer};
use art_core::{Error, Raster};

#[derive(Debug)]
pub enum CliError {
    /// Input rejected by a check; the message is already user-facing.
    Invalid(String),
    Core(Error),
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Io(_) => 2,
            CliError::Core(e) if e.is_io() => 2,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Invalid(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    Ok((w, h))
}

pub fn parse_id(s: &str) -> std::result::Result<[i64; 3], String> {
    let parts: Vec<i64> = s
        .split(',')
        .map(|p| p.trim().parse::<i64>().map_err(|_| format!("bad id component in {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected layer,row,col, got {s:?}"))
}

pub fn parse_axes(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad axis size in {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected three axis sizes, got {s:?}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KValues(pub Vec<usize>);

pub fn parse_k_range(s: &str) -> std::result::Result<KValues, String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("bad number {t:?} in {s:?}"));
    let values: Vec<usize> = if let Some((a, rest)) = s.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, st)) => (num(b)?, num(st)?),
            None => (num(rest)?, 1),
        };
        if step == 0 {
            return Err("step must be positive".into());
        }
        (num(a)?..=b).step_by(step).collect()
    } else {
        s.split(',').map(num).collect::<std::result::Result<_, _>>()?
    };
    if values.is_empty() {
        return Err(format!("empty k range {s:?}"));
    }
    Ok(KValues(values))
}

fn read_text(path: &Path) -> Result<String> {
    if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        Ok(std::fs::read_to_string(path)?)
    }
}

fn load_layout(path: &Path, (w, h): (usize, usize)) -> Result<AnonymousRegionLayout> {
    Ok(parse_layout(&read_text(path)?, Canvas::new(w, h))?)
}

fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn layout_validate(path: &Path, canvas: (usize, usize)) -> Result<()> {
    let layout = load_layout(path, canvas)?;
    let violations = validate_layout(&layout);
    if violations.is_empty() {
        return emit("ok\n");
    }
    let text: String = violations.iter().map(|v| format!("{}\n", v.message)).collect();
    emit(&text)?;
    Err(CliError::Invalid(format!("{} violation(s)", violations.len())))
}

fn ids_csv(ids: &[TokenId]) -> String {
    let mut out = String::from("token,layer,row,col\n");
    for (i, [l, r, c]) in ids.iter().enumerate() {
        out.push_str(&format!("{i},{l},{r},{c}\n"));
    }
    out
}

pub fn layout_ids(path: &Path, canvas: (usize, usize), reference: bool) -> Result<()> {
    let mut layout = load_layout(path, canvas)?;
    if reference {
        layout = with_reference_stream(&layout);
    }
    emit(&ids_csv(&prepare_latent_image_ids(&layout, &PipelineConfig::default())?))
}

pub fn plan(
    canvas: (usize, usize),
    elements: Option<usize>,
    seed: u64,
    template: Template,
    max_overlap: Option<f64>,
    compact: bool,
) -> Result<()> {
    let canvas = Canvas::new(canvas.0, canvas.1);
    let mut req = match elements {
        Some(n) => PlannerRequest::new(canvas, n, seed, template),
        None => PlannerRequest {
            template,
            ..PlannerRequest::sampled(canvas, seed)
        },
    };
    req.max_overlap = max_overlap;
    let resp = planner::plan(&req)?;
    let json = if compact { serialize_layout(&resp.layout) } else { resp.to_json() };
    emit(&format!("{json}\n"))
}

pub fn composite(manifest: &Path, out: &Path) -> Result<()> {
    let image = load_manifest(manifest)?;
    let merged = composite_layers(&image.background, &image.foregrounds)?;
    write_png(out, &merged)?;
    Ok(())
}

pub fn transparency_encode(input: &Path, out: &Path) -> Result<()> {
    let pixels = read_png(input)?;
    if pixels.channels != 4 {
        return Err(CliError::Invalid(format!("{} is not an RGBA image", input.display())));
    }
    let gray = encode_transparency(&RgbaLayer::new(pixels)?)?;
    write_png(out, &gray.pixels)?;
    Ok(())
}

pub fn transparency_decode(gray: &Path, alpha: &Path, out: &Path, eps: f64) -> Result<()> {
    let g = read_png(gray)?.select_channels(0..3);
    let a = read_png(alpha)?;
    let a = a.select_channels(a.channels - 1..a.channels);
    let rgb = decode_transparency(&GrayBackedLayer { pixels: g }, &a, eps)?;
    let mut rgba = Raster::new(rgb.width, rgb.height, 4);
    for ((dst, src), &av) in rgba.data.chunks_exact_mut(4).zip(rgb.data.chunks_exact(3)).zip(&a.data) {
        dst[..3].copy_from_slice(src);
        dst[3] = av;
    }
    write_png(out, &rgba)?;
    Ok(())
}

pub fn rope_dump(
    mut ids: Vec<TokenId>,
    layout: Option<(&Path, (usize, usize))>,
    axes: [usize; 3],
    theta: f64,
) -> Result<()> {
    if let Some((path, canvas)) = layout {
        ids.extend(prepare_latent_image_ids(&load_layout(path, canvas)?, &PipelineConfig::default())?);
    }
    if ids.is_empty() {
        return Err(CliError::Invalid("give at least one --id or a --layout".into()));
    }
    let spec = RopeSpec::new(axes, theta)?;
    let f = rope_3d(&ids, &spec)?;
    let mut out = String::from("token,layer,row,col,channel,cos,sin\n");
    for (i, [l, r, c]) in ids.iter().enumerate() {
        let (cos, sin) = f.row(i);
        for ch in 0..cos.len() {
            out.push_str(&format!("{i},{l},{r},{c},{ch},{},{}\n", cos[ch], sin[ch]));
        }
    }
    emit(&out)
}

pub fn cost_sweep(
    scheme: SchemeKind,
    k: &[usize],
    region: (usize, usize),
    canvas: (usize, usize),
    heads: usize,
    context: usize,
    jobs: usize,
) -> Result<()> {
    let attn = AttentionConfig {
        heads,
        context_tokens: context,
        ..AttentionConfig::default()
    };
    let pipe = PipelineConfig::default();
    let canvas = Canvas::new(canvas.0, canvas.1);
    let rows = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| CliError::Invalid(e.to_string()))?;
        pool.install(|| scaling_sweep_parallel(canvas, region, k, scheme, &attn, &pipe))?
    } else {
        scaling_sweep(canvas, region, k, scheme, &attn, &pipe)?
    };
    emit(&sweep_csv(&rows))
}

pub fn latent_dump(manifest: &Path, out: &Path) -> Result<()> {
    let image = load_manifest(manifest)?;
    let seq = encode_multilayer(&image, &PipelineConfig::default())?;
    let file = std::fs::File::create(out)?;
    write_sequence(&seq, std::io::BufWriter::new(file))?;
    Ok(())
}

pub fn latent_info(input: &Path) -> Result<()> {
    let seq = read_sequence(std::io::BufReader::new(std::fs::File::open(input)?))?;
    let mut out = format!("tokens {}\ndim {}\n", seq.len(), seq.dim);
    for s in &seq.segments {
        out.push_str(&format!(
            "layer {} tokens {} grid {}..{} x {}..{}\n",
            s.stream.layer_id(),
            s.range.len(),
            s.grid.y1,
            s.grid.y2,
            s.grid.x1,
            s.grid.x2
        ));
    }
    emit(&out)
}

pub struct TrainOptions {
    pub samples: usize,
    pub layers: usize,
    pub size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub condition_merged: bool,
    pub condition_background: bool,
    pub trace: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

pub fn train_toy(o: TrainOptions) -> Result<()> {
    let pipe = PipelineConfig::default();
    let cfg = DecoderConfig {
        condition_on: Conditioning {
            merged: o.condition_merged,
            background: o.condition_background,
        },
        ..DecoderConfig::toy(&pipe)
    };
    let canvas = Canvas::new(o.size, o.size);
    let images = (0..o.samples as u64)
        .map(|s| synth_multilayer(o.seed.wrapping_add(s), o.layers, canvas))
        .collect::<art_core::Result<Vec<_>>>()?;
    let (params, trace) = train_overfit(&images, &cfg, &pipe, o.steps, o.lr, o.seed)?;
    std::fs::write(&o.trace, trace_csv(&trace))?;
    if let Some(path) = &o.checkpoint {
        save_checkpoint(&params, &cfg, path)?;
    }
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        eprintln!(
            "{} params, {} steps: l1 {:.6} -> {:.6} ({:.4} of initial)",
            params.len(),
            trace.len(),
            first.l1_loss,
            last.l1_loss,
            last.l1_loss / first.l1_loss
        );
    }
    Ok(())
}

fn rgb(path: &Path) -> Result<Raster> {
    let r = read_png(path)?;
    Ok(r.select_channels(0..3))
}

pub fn metrics_compare(reference: &Path, composed: &Path, pred: &[PathBuf], gt: &[PathBuf], json: bool) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(CliError::Invalid(format!("{} --pred layers but {} --gt layers", pred.len(), gt.len())));
    }
    let load = |paths: &[PathBuf]| paths.iter().map(|p| read_png(p)).collect::<art_core::Result<Vec<_>>>();
    let report = MetricReport::compute(&rgb(reference)?, &rgb(composed)?, &load(pred)?, &load(gt)?)?;
    if json {
        emit(&format!("{}\n", report.to_json()))
    } else {
        emit(&report.table())
    }
}
