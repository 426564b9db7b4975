//! Rotary position embeddings over `(layer, row, col)` ids.
//!
//! Each axis gets its own slice of the head channels. Within a slice,
//! frequency `j` occupies the adjacent channel pair `(2j, 2j+1)` and the pair
//! is rotated by `position · theta^(-2j/dim)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::TokenId;

pub const DEFAULT_THETA: f64 = 10_000.0;

/// Channel split used at full model scale (head dim 128).
pub const FULL_SCALE_AXES: [usize; 3] = [16, 56, 56];

/// Small split used by the toy models and tests (head dim 16).
pub const TOY_AXES: [usize; 3] = [4, 6, 6];

/// Axis split and base frequency shared by queries and keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeSpec {
    pub axes_dim: [usize; 3],
    pub theta: f64,
}

impl Default for RopeSpec {
    fn default() -> Self {
        Self {
            axes_dim: TOY_AXES,
            theta: DEFAULT_THETA,
        }
    }
}

impl RopeSpec {
    pub fn new(axes_dim: [usize; 3], theta: f64) -> Result<Self> {
        let spec = Self { axes_dim, theta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn head_dim(&self) -> usize {
        self.axes_dim.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.axes_dim.iter().find(|d| *d % 2 != 0) {
            return Err(Error::Config(format!("axis dim {d} is odd")));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::Config(format!("theta {} must be positive", self.theta)));
        }
        Ok(())
    }
}

/// Per-token cosine and sine tables, `n × head_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeFrequencies {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    pub len: usize,
    pub axes_dim: [usize; 3],
    pub theta: f64,
}

impl RopeFrequencies {
    pub fn head_dim(&self) -> usize {
        self.axes_dim.iter().sum()
    }

    pub fn row(&self, i: usize) -> (&[f64], &[f64]) {
        let d = self.head_dim();
        (&self.cos[i * d..(i + 1) * d], &self.sin[i * d..(i + 1) * d])
    }
}

/// `theta^(-2j/dim)` for `j = 0..dim/2`.
pub fn frequencies(dim: usize, theta: f64) -> Vec<f64> {
    (0..dim / 2)
        .map(|j| 1.0 / theta.powf((2 * j) as f64 / dim as f64))
        .collect()
}

/// 1-D tables (`positions.len() × dim`), each frequency duplicated into two
/// adjacent channels.
pub fn rope_1d(dim: usize, positions: &[i64], theta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("rotary dim {dim} is odd")));
    }
    let freqs = frequencies(dim, theta);
    let mut cos = Vec::with_capacity(positions.len() * dim);
    let mut sin = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for &f in &freqs {
            let (s, c) = (p as f64 * f).sin_cos();
            cos.extend([c, c]);
            sin.extend([s, s]);
        }
    }
    Ok((cos, sin))
}

/// Concatenate per-axis 1-D tables in `(layer, row, col)` order.
pub fn rope_3d(ids: &[TokenId], spec: &RopeSpec) -> Result<RopeFrequencies> {
    spec.validate()?;
    let d = spec.head_dim();
    let n = ids.len();
    let mut cos = vec![0.0; n * d];
    let mut sin = vec![0.0; n * d];
    let mut offset = 0;
    for (axis, &ad) in spec.axes_dim.iter().enumerate() {
        let pos: Vec<i64> = ids.iter().map(|id| id[axis]).collect();
        let (c, s) = rope_1d(ad, &pos, spec.theta)?;
        for i in 0..n {
            cos[i * d + offset..i * d + offset + ad].copy_from_slice(&c[i * ad..(i + 1) * ad]);
            sin[i * d + offset..i * d + offset + ad].copy_from_slice(&s[i * ad..(i + 1) * ad]);
        }
        offset += ad;
    }
    Ok(RopeFrequencies {
        cos,
        sin,
        len: n,
        axes_dim: spec.axes_dim,
        theta: spec.theta,
    })
}

/// Rotate one head vector in place: `(a, b) → (a·cos − b·sin, b·cos + a·sin)`.
#[inline]
pub fn rotate_in_place(x: &mut [f64], cos: &[f64], sin: &[f64]) {
    for ((pair, c), s) in x
        .chunks_exact_mut(2)
        .zip(cos.chunks_exact(2))
        .zip(sin.chunks_exact(2))
    {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c[0] - b * s[0];
        pair[1] = b * c[1] + a * s[1];
    }
}

/// Transpose (inverse) rotation; maps gradients of rotated vectors back.
#[inline]
pub fn rotate_back_in_place(x: &mut [f64], cos: &[f64], sin: &[f64]) {
    for ((pair, c), s) in x
        .chunks_exact_mut(2)
        .zip(cos.chunks_exact(2))
        .zip(sin.chunks_exact(2))
    {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c[0] + b * s[1];
        pair[1] = b * c[1] - a * s[0];
    }
}

/// Rotate a sequence of head vectors (`freqs.len × head_dim`).
pub fn apply_rotary(x: &[f64], freqs: &RopeFrequencies) -> Result<Vec<f64>> {
    let d = freqs.head_dim();
    if x.len() != freqs.len * d {
        return Err(Error::Shape(format!(
            "{} values for {} tokens of dim {d}",
            x.len(),
            freqs.len
        )));
    }
    let mut out = x.to_vec();
    for (i, v) in out.chunks_exact_mut(d).enumerate() {
        let (c, s) = freqs.row(i);
        rotate_in_place(v, c, s);
    }
    Ok(out)
}

/// `⟨R(p_q) q, R(p_k) k⟩`: the pre-softmax score for one query/key pair.
pub fn attention_score(
    q: &[f64],
    k: &[f64],
    p_q: TokenId,
    p_k: TokenId,
    spec: &RopeSpec,
) -> Result<f64> {
    let d = spec.head_dim();
    if q.len() != d || k.len() != d {
        return Err(Error::Shape(format!(
            "q/k dims {}/{} vs head dim {d}",
            q.len(),
            k.len()
        )));
    }
    let f = rope_3d(&[p_q, p_k], spec)?;
    let mut qr = q.to_vec();
    let mut kr = k.to_vec();
    let (c, s) = f.row(0);
    rotate_in_place(&mut qr, c, s);
    let (c, s) = f.row(1);
    rotate_in_place(&mut kr, c, s);
    Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum())
}
