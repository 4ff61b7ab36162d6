//! Procedural histology-like patches and the image-space transformation
//! catalog: 12 parameterized transforms, their sampling ranges, identity
//! points, and fixed-width parameter encodings.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("{kind:?}: parameter {value} outside range [{lo}, {hi}]")]
    OutOfRange { kind: TransformKind, value: f64, lo: f64, hi: f64 },
    #[error("{kind:?}: choice index {index} out of range (must be < {slots})")]
    BadChoice { kind: TransformKind, index: usize, slots: usize },
    #[error("sequence repeats transform kind {kind:?}")]
    RepeatedKind { kind: TransformKind },
    #[error("sequence length {len} outside 1..={max}")]
    BadLength { len: usize, max: usize },
}

/// An H x W x 3 image with unit-interval intensities, row-major (y, x, c).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Patch {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * 3);
        Patch { height, width, pixels }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Patch { height, width, pixels: vec![value; height * width * 3] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn max_abs_diff(&self, other: &Patch) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// The 12 transformation families of the augmentation catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Crop,
    Dilation,
    Erosion,
    Blur,
    Brightness,
    Contrast,
    Saturation,
    Hue,
    Hed,
    Flip,
    Rotate,
    Gamma,
}

pub const ALL_KINDS: [TransformKind; 12] = [
    TransformKind::Crop,
    TransformKind::Dilation,
    TransformKind::Erosion,
    TransformKind::Blur,
    TransformKind::Brightness,
    TransformKind::Contrast,
    TransformKind::Saturation,
    TransformKind::Hue,
    TransformKind::Hed,
    TransformKind::Flip,
    TransformKind::Rotate,
    TransformKind::Gamma,
];

/// HED perturbation half-range per channel coefficient.
pub const HED_DELTA: f64 = 0.05;

/// Width of the encoded feature vector for continuous scalar parameters.
pub const SCALAR_ENC_DIM: usize = 5;

/// Sinusoidal feature lift of a normalized scalar in [-1, 1]. Cosine
/// components are shifted so the identity point (u = 0) encodes to zeros.
/// Cyclic parameters (hue, period 2 in normalized units) use frequencies
/// matched to the period so aliased endpoints encode identically; other
/// scalars use half frequencies, which keep the lift injective across the
/// whole range including the endpoints.
fn scalar_features(u: f64, cyclic: bool) -> Vec<f64> {
    let p = std::f64::consts::PI * u * if cyclic { 1.0 } else { 0.5 };
    vec![u, p.sin(), p.cos() - 1.0, (2.0 * p).sin(), (2.0 * p).cos() - 1.0]
}

impl TransformKind {
    /// Width of the encoded parameter vector fed to the per-kind
    /// projection. Discrete kinds are one-hot with an explicit identity
    /// slot so every kind has an identity encoding.
    pub fn param_dim(self) -> usize {
        match self {
            TransformKind::Brightness
            | TransformKind::Contrast
            | TransformKind::Saturation
            | TransformKind::Gamma
            | TransformKind::Hue => SCALAR_ENC_DIM,
            TransformKind::Hed => 6,
            TransformKind::Crop => 6,
            TransformKind::Flip => 3,
            TransformKind::Rotate => 4,
            TransformKind::Dilation | TransformKind::Erosion | TransformKind::Blur => 2,
        }
    }

    /// Continuous sampling range, if the kind is continuous and scalar.
    pub fn scalar_range(self) -> Option<(f64, f64)> {
        match self {
            TransformKind::Brightness
            | TransformKind::Contrast
            | TransformKind::Saturation
            | TransformKind::Gamma => Some((0.5, 1.5)),
            TransformKind::Hue => Some((-0.5, 0.5)),
            _ => None,
        }
    }

    /// For discrete kinds: total one-hot slots (last slot is identity).
    pub fn discrete_slots(self) -> Option<usize> {
        match self {
            TransformKind::Crop => Some(6),
            TransformKind::Flip => Some(3),
            TransformKind::Rotate => Some(4),
            TransformKind::Dilation | TransformKind::Erosion | TransformKind::Blur => Some(2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Crop => "crop",
            TransformKind::Dilation => "dilation",
            TransformKind::Erosion => "erosion",
            TransformKind::Blur => "blur",
            TransformKind::Brightness => "brightness",
            TransformKind::Contrast => "contrast",
            TransformKind::Saturation => "saturation",
            TransformKind::Hue => "hue",
            TransformKind::Hed => "hed",
            TransformKind::Flip => "flip",
            TransformKind::Rotate => "rotate",
            TransformKind::Gamma => "gamma",
        }
    }
}

/// A raw parameter point in a kind's parameter space.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformParam {
    /// Continuous scalar (brightness/contrast/saturation/gamma/hue).
    Scalar(f64),
    /// Six HED coefficients: (sigma_h, sigma_e, sigma_d, beta_h, beta_e, beta_d).
    Hed([f64; 6]),
    /// One-hot slot index; the kind's last slot is the identity.
    Choice(usize),
}

/// One transformation with its parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformStep {
    pub kind: TransformKind,
    pub param: TransformParam,
}

impl TransformStep {
    pub fn new(kind: TransformKind, param: TransformParam) -> Self {
        TransformStep { kind, param }
    }

    pub fn scalar(kind: TransformKind, v: f64) -> Self {
        TransformStep { kind, param: TransformParam::Scalar(v) }
    }

    /// The step that leaves every patch unchanged for this kind.
    pub fn identity(kind: TransformKind) -> Self {
        let param = match kind {
            TransformKind::Brightness
            | TransformKind::Contrast
            | TransformKind::Saturation
            | TransformKind::Gamma => TransformParam::Scalar(1.0),
            TransformKind::Hue => TransformParam::Scalar(0.0),
            TransformKind::Hed => TransformParam::Hed([0.0; 6]),
            k => TransformParam::Choice(k.discrete_slots().unwrap() - 1),
        };
        TransformStep { kind, param }
    }

    pub fn is_identity(&self) -> bool {
        self == &TransformStep::identity(self.kind)
    }

    pub fn validate(&self) -> Result<(), PatchError> {
        match (&self.param, self.kind) {
            (TransformParam::Scalar(v), k) => {
                let (lo, hi) = k.scalar_range().ok_or(PatchError::BadChoice {
                    kind: k,
                    index: 0,
                    slots: 0,
                })?;
                if *v < lo || *v > hi {
                    return Err(PatchError::OutOfRange { kind: k, value: *v, lo, hi });
                }
                Ok(())
            }
            (TransformParam::Hed(p), TransformKind::Hed) => {
                for &v in p {
                    if !(-HED_DELTA..=HED_DELTA).contains(&v) {
                        return Err(PatchError::OutOfRange {
                            kind: TransformKind::Hed,
                            value: v,
                            lo: -HED_DELTA,
                            hi: HED_DELTA,
                        });
                    }
                }
                Ok(())
            }
            (TransformParam::Choice(i), k) => {
                let slots = k.discrete_slots().ok_or(PatchError::BadChoice {
                    kind: k,
                    index: *i,
                    slots: 0,
                })?;
                if *i >= slots {
                    return Err(PatchError::BadChoice { kind: k, index: *i, slots });
                }
                Ok(())
            }
            (_, k) => Err(PatchError::BadChoice { kind: k, index: 0, slots: 0 }),
        }
    }

    /// Fixed-width encoding fed to the generator's per-kind projection.
    /// Scalars normalize to [-1, 1] and append sinusoidal features of the
    /// normalized value, so parameter magnitudes that act on the embedding
    /// through periodic or curved responses stay linearly readable; HED
    /// coefficients divide by their half-range; discrete kinds are one-hot
    /// over their slots. The identity point always encodes to the
    /// designated identity encoding.
    pub fn encoded(&self) -> Vec<f64> {
        match (&self.param, self.kind) {
            (TransformParam::Scalar(v), TransformKind::Hue) => scalar_features(v / 0.5, true),
            (TransformParam::Scalar(v), _) => scalar_features((v - 1.0) / 0.5, false),
            (TransformParam::Hed(p), _) => p.iter().map(|x| x / HED_DELTA).collect(),
            (TransformParam::Choice(i), k) => {
                let mut one_hot = vec![0.0; k.discrete_slots().unwrap()];
                one_hot[*i] = 1.0;
                one_hot
            }
        }
    }

    /// Inverse of [`TransformStep::encoded`].
    pub fn decode(kind: TransformKind, encoded: &[f64]) -> TransformStep {
        let param = match kind {
            TransformKind::Hue => TransformParam::Scalar(encoded[0] * 0.5),
            TransformKind::Brightness
            | TransformKind::Contrast
            | TransformKind::Saturation
            | TransformKind::Gamma => TransformParam::Scalar(encoded[0] * 0.5 + 1.0),
            TransformKind::Hed => {
                let mut p = [0.0; 6];
                for (i, v) in encoded.iter().enumerate() {
                    p[i] = v * HED_DELTA;
                }
                TransformParam::Hed(p)
            }
            _ => {
                let i = encoded
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                TransformParam::Choice(i)
            }
        };
        TransformStep { kind, param }
    }
}

/// An ordered sequence of 1..k_max steps with no repeated kind.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSequence {
    pub steps: Vec<TransformStep>,
}

impl TransformSequence {
    pub fn new(steps: Vec<TransformStep>) -> Result<Self, PatchError> {
        if steps.is_empty() {
            return Err(PatchError::BadLength { len: 0, max: ALL_KINDS.len() });
        }
        for (i, s) in steps.iter().enumerate() {
            if steps[..i].iter().any(|t| t.kind == s.kind) {
                return Err(PatchError::RepeatedKind { kind: s.kind });
            }
        }
        Ok(TransformSequence { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Same kinds and order, every parameter replaced by its identity point.
    pub fn identity(&self) -> TransformSequence {
        TransformSequence {
            steps: self.steps.iter().map(|s| TransformStep::identity(s.kind)).collect(),
        }
    }
}

/// Draws random transformation sequences: K ~ U{1..k_max}, K distinct
/// kinds without replacement, parameters from each kind's range.
pub fn sample_sequence(rng: &mut ChaCha8Rng, k_max: usize) -> TransformSequence {
    assert!(k_max >= 1 && k_max <= ALL_KINDS.len());
    let k = rng.gen_range(1..=k_max);
    let mut kinds = ALL_KINDS.to_vec();
    kinds.shuffle(rng);
    kinds.truncate(k);
    let steps = kinds.into_iter().map(|kind| sample_step(rng, kind)).collect();
    TransformSequence { steps }
}

/// One random non-identity parameter point for the given kind.
pub fn sample_step(rng: &mut ChaCha8Rng, kind: TransformKind) -> TransformStep {
    let param = if let Some((lo, hi)) = kind.scalar_range() {
        TransformParam::Scalar(rng.gen_range(lo..hi))
    } else if kind == TransformKind::Hed {
        let mut p = [0.0; 6];
        for v in &mut p {
            *v = rng.gen_range(-HED_DELTA..HED_DELTA);
        }
        TransformParam::Hed(p)
    } else {
        // Uniform over non-identity slots.
        let slots = kind.discrete_slots().unwrap();
        TransformParam::Choice(rng.gen_range(0..slots - 1))
    };
    TransformStep { kind, param }
}

// ---- application ------------------------------------------------------

pub fn apply_transform(p: &Patch, step: &TransformStep) -> Result<Patch, PatchError> {
    step.validate()?;
    if step.is_identity() {
        // Identity-by-bypass keeps the identity exact for every kind,
        // including Blur and HED whose round-trips are lossy.
        return Ok(p.clone());
    }
    let mut out = match (&step.param, step.kind) {
        (TransformParam::Scalar(b), TransformKind::Brightness) => map_pixels(p, |v, _| v * b),
        (TransformParam::Scalar(c), TransformKind::Contrast) => {
            let mean = mean_gray(p);
            map_pixels(p, |v, _| mean + c * (v - mean))
        }
        (TransformParam::Scalar(s), TransformKind::Saturation) => saturation(p, *s),
        (TransformParam::Scalar(g), TransformKind::Gamma) => map_pixels(p, |v, _| v.max(0.0).powf(*g)),
        (TransformParam::Scalar(h), TransformKind::Hue) => hue_shift(p, *h),
        (TransformParam::Hed(coef), TransformKind::Hed) => hed_perturb(p, coef),
        (TransformParam::Choice(i), TransformKind::Flip) => flip(p, *i == 0),
        (TransformParam::Choice(i), TransformKind::Rotate) => rotate(p, *i + 1),
        (TransformParam::Choice(i), TransformKind::Crop) => crop_resize(p, *i),
        (TransformParam::Choice(_), TransformKind::Dilation) => morphology(p, true),
        (TransformParam::Choice(_), TransformKind::Erosion) => morphology(p, false),
        (TransformParam::Choice(_), TransformKind::Blur) => gaussian_blur(p),
        _ => unreachable!("validate() rejects kind/param mismatches"),
    };
    out.clamp_unit();
    Ok(out)
}

/// Left-to-right composition of the sequence (first step applied first).
pub fn apply_sequence(p: &Patch, seq: &TransformSequence) -> Result<Patch, PatchError> {
    let mut cur = p.clone();
    for step in &seq.steps {
        cur = apply_transform(&cur, step)?;
    }
    Ok(cur)
}

fn map_pixels(p: &Patch, f: impl Fn(f64, usize) -> f64) -> Patch {
    let pixels = p.pixels.iter().enumerate().map(|(i, &v)| f(v, i % 3)).collect();
    Patch { height: p.height, width: p.width, pixels }
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn mean_gray(p: &Patch) -> f64 {
    let mut s = 0.0;
    for px in p.pixels.chunks(3) {
        s += gray(px[0], px[1], px[2]);
    }
    s / (p.height * p.width) as f64
}

fn saturation(p: &Patch, s: f64) -> Patch {
    let mut out = p.clone();
    for px in out.pixels.chunks_mut(3) {
        let g = gray(px[0], px[1], px[2]);
        for v in px.iter_mut() {
            *v = g + s * (*v - g);
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Hue offset as a fraction of a full turn, wrapped.
fn hue_shift(p: &Patch, shift: f64) -> Patch {
    let mut out = p.clone();
    for px in out.pixels.chunks_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
    out
}

// Ruifrok-Johnston H&E-DAB stain vectors (rows, unnormalized).
const STAIN_ROWS: [[f64; 3]; 3] = [
    [0.65, 0.70, 0.29],
    [0.07, 0.99, 0.11],
    [0.27, 0.57, 0.78],
];

fn normalized_stain_matrix() -> [[f64; 3]; 3] {
    let mut m = STAIN_ROWS;
    for row in &mut m {
        let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    m
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b, c, d) = (
                m[(i + 1) % 3][(j + 1) % 3],
                m[(i + 1) % 3][(j + 2) % 3],
                m[(i + 2) % 3][(j + 1) % 3],
                m[(i + 2) % 3][(j + 2) % 3],
            );
            // Transposed cofactor.
            inv[j][i] = (a * d - b * c) * inv_det;
        }
    }
    inv
}

/// Optical-density deconvolution into H/E/DAB channels, per-channel
/// affine perturbation ch' = (1 + sigma) * ch + beta, then reconvolution.
fn hed_perturb(p: &Patch, coef: &[f64; 6]) -> Patch {
    let stain = normalized_stain_matrix();
    let unmix = invert3(&stain);
    let mut out = p.clone();
    for px in out.pixels.chunks_mut(3) {
        let od: Vec<f64> = px.iter().map(|&v| -((v + 1e-6).log10())).collect();
        let mut hed = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                hed[i] += od[j] * unmix[j][i];
            }
        }
        for i in 0..3 {
            hed[i] = (1.0 + coef[i]) * hed[i] + coef[3 + i];
        }
        for j in 0..3 {
            let mut od_j = 0.0;
            for i in 0..3 {
                od_j += hed[i] * stain[i][j];
            }
            px[j] = 10f64.powf(-od_j) - 1e-6;
        }
    }
    out
}

/// index 0 = horizontal (mirror columns), 1 = vertical (mirror rows).
fn flip(p: &Patch, horizontal: bool) -> Patch {
    let mut out = p.clone();
    for y in 0..p.height {
        for x in 0..p.width {
            let (sy, sx) = if horizontal { (y, p.width - 1 - x) } else { (p.height - 1 - y, x) };
            for c in 0..3 {
                out.set(y, x, c, p.get(sy, sx, c));
            }
        }
    }
    out
}

/// `quarter_turns` in 1..=3, counterclockwise.
fn rotate(p: &Patch, quarter_turns: usize) -> Patch {
    let mut cur = p.clone();
    for _ in 0..quarter_turns {
        let (h, w) = (cur.height, cur.width);
        let mut next = Patch::constant(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                // (y, x) -> (w - 1 - x, y)
                for c in 0..3 {
                    next.set(w - 1 - x, y, c, cur.get(y, x, c));
                }
            }
        }
        cur = next;
    }
    cur
}

/// Crop one of 4 corners or the center at side min(H, W)/2, then resize
/// back to the source resolution with bilinear interpolation.
fn crop_resize(p: &Patch, position: usize) -> Patch {
    let side = p.height.min(p.width) / 2;
    let (y0, x0) = match position {
        0 => (0, 0),
        1 => (0, p.width - side),
        2 => (p.height - side, 0),
        3 => (p.height - side, p.width - side),
        _ => ((p.height - side) / 2, (p.width - side) / 2),
    };
    let mut out = Patch::constant(p.height, p.width, 0.0);
    for y in 0..p.height {
        for x in 0..p.width {
            let sy = y as f64 * (side - 1) as f64 / (p.height - 1) as f64;
            let sx = x as f64 * (side - 1) as f64 / (p.width - 1) as f64;
            let (iy, ix) = (sy.floor() as usize, sx.floor() as usize);
            let (fy, fx) = (sy - iy as f64, sx - ix as f64);
            let (iy1, ix1) = ((iy + 1).min(side - 1), (ix + 1).min(side - 1));
            for c in 0..3 {
                let v00 = p.get(y0 + iy, x0 + ix, c);
                let v01 = p.get(y0 + iy, x0 + ix1, c);
                let v10 = p.get(y0 + iy1, x0 + ix, c);
                let v11 = p.get(y0 + iy1, x0 + ix1, c);
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                out.set(y, x, c, v);
            }
        }
    }
    out
}

/// Per-channel 4x4 max (dilation) or min (erosion) filter, top-left
/// anchored, edge replication.
fn morphology(p: &Patch, dilate: bool) -> Patch {
    const K: usize = 4;
    let mut out = p.clone();
    for y in 0..p.height {
        for x in 0..p.width {
            for c in 0..3 {
                let mut best = if dilate { f64::NEG_INFINITY } else { f64::INFINITY };
                for dy in 0..K {
                    for dx in 0..K {
                        let sy = (y + dy).min(p.height - 1);
                        let sx = (x + dx).min(p.width - 1);
                        let v = p.get(sy, sx, c);
                        best = if dilate { best.max(v) } else { best.min(v) };
                    }
                }
                out.set(y, x, c, best);
            }
        }
    }
    out
}

/// Kernel side scales with patch side (15 px at a 256-px patch), rounded
/// to the nearest odd integer, minimum 3; sigma = side/6.
fn blur_kernel_side(patch_side: usize) -> usize {
    let raw = 15.0 * patch_side as f64 / 256.0;
    let mut k = raw.round() as usize;
    if k % 2 == 0 {
        // Round to the nearest odd neighbor.
        k = if raw >= k as f64 { k + 1 } else { k - 1 };
    }
    k.max(3)
}

fn gaussian_blur(p: &Patch) -> Patch {
    let side = blur_kernel_side(p.height.min(p.width));
    let sigma = side as f64 / 6.0;
    let half = side / 2;
    let kernel: Vec<f64> = (0..side)
        .map(|i| {
            let d = i as f64 - half as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / norm).collect();

    // Separable convolution, edge replication.
    let mut tmp = p.clone();
    for y in 0..p.height {
        for x in 0..p.width {
            for c in 0..3 {
                let mut s = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sx = (x + i).saturating_sub(half).min(p.width - 1);
                    s += k * p.get(y, sx, c);
                }
                tmp.set(y, x, c, s);
            }
        }
    }
    let mut out = tmp.clone();
    for y in 0..p.height {
        for x in 0..p.width {
            for c in 0..3 {
                let mut s = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sy = (y + i).saturating_sub(half).min(p.height - 1);
                    s += k * tmp.get(sy, x, c);
                }
                out.set(y, x, c, s);
            }
        }
    }
    out
}

// ---- synthetic patches -------------------------------------------------

/// Scene parameters recorded by the synthesizer, used as the oracle for
/// class-separation checks.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub blob_count: usize,
    pub class_label: u8,
}

/// Blob-count ranges per class. Class 1 draws from a strictly higher
/// range so the toy encoder can separate the classes.
pub const CLASS0_BLOBS: (usize, usize) = (5, 9);
pub const CLASS1_BLOBS: (usize, usize) = (13, 20);
/// Guaranteed mean blob-count margin between the classes.
pub const CLASS_BLOB_MARGIN: f64 = 3.0;

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    color: [f64; 3],
}

/// Deterministic histology-like patch: eosin-pink textured background
/// with purple elliptical "nuclei". Resolution 64 renders the same scene
/// at twice the sampling rate of resolution 32.
pub fn synth_patch(seed: u64, class_label: u8, resolution: usize) -> Patch {
    synth_patch_with_scene(seed, class_label, resolution).0
}

pub fn synth_patch_with_scene(seed: u64, class_label: u8, resolution: usize) -> (Patch, SceneRecord) {
    assert!(resolution == 32 || resolution == 64, "supported resolutions: 32, 64");
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(class_label as u64));
    let (lo, hi) = if class_label == 0 { CLASS0_BLOBS } else { CLASS1_BLOBS };
    let n_blobs = rng.gen_range(lo..=hi);

    // Scene is drawn in normalized [0,1] coordinates so both resolutions
    // rasterize the same geometry.
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cy: rng.gen_range(0.05..0.95),
            cx: rng.gen_range(0.05..0.95),
            ry: rng.gen_range(0.04..0.11),
            rx: rng.gen_range(0.04..0.11),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            color: [
                0.42 + rng.gen_range(-0.06..0.06),
                0.26 + rng.gen_range(-0.05..0.05),
                0.58 + rng.gen_range(-0.06..0.06),
            ],
        })
        .collect();
    // Smooth background texture: low-frequency sinusoids with seeded phases.
    let tex: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(2.0..6.0),
                rng.gen_range(2.0..6.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.008..0.022),
            )
        })
        .collect();

    let base = [0.91, 0.74, 0.80];
    let mut patch = Patch::constant(resolution, resolution, 0.0);
    for y in 0..resolution {
        for x in 0..resolution {
            let ny = (y as f64 + 0.5) / resolution as f64;
            let nx = (x as f64 + 0.5) / resolution as f64;
            let mut t = 0.0;
            for &(fy, fx, phase, amp) in &tex {
                t += amp * (std::f64::consts::TAU * (fy * ny + fx * nx) + phase).sin();
            }
            let mut px = [base[0] + t, base[1] + t * 1.4, base[2] + t];
            for blob in &blobs {
                let dy = ny - blob.cy;
                let dx = nx - blob.cx;
                let (s, c) = blob.angle.sin_cos();
                let u = (c * dx + s * dy) / blob.rx;
                let v = (-s * dx + c * dy) / blob.ry;
                let d = u * u + v * v;
                if d < 1.0 {
                    // Soft edge over the outer 30% of the radius.
                    let w = ((1.0 - d) / 0.3).min(1.0);
                    for i in 0..3 {
                        px[i] = px[i] * (1.0 - w) + blob.color[i] * w;
                    }
                }
            }
            for (i, &v) in px.iter().enumerate() {
                patch.set(y, x, i, v.clamp(0.0, 1.0));
            }
        }
    }
    (patch, SceneRecord { blob_count: n_blobs, class_label })
}
