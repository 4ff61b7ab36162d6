//! A frozen, deterministic stand-in for the foundation encoder: a seeded
//! two-layer MLP over raw pixels. It is class-separable on the synthetic
//! patches and deliberately non-invariant to the transformation catalog.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::patchlab::Patch;
use crate::tensorcore::infer::cosine;

pub const EMBED_DIM: usize = 128;
pub const HIDDEN_DIM: usize = 512;
pub const BASE_RESOLUTION: usize = 32;
pub const INPUT_DIM: usize = BASE_RESOLUTION * BASE_RESOLUTION * 3;
pub const DEFAULT_ENCODER_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("unsupported patch resolution {0}x{0} (expected 32 or 64)")]
    UnsupportedResolution(usize),
}

/// A d-dimensional embedding produced by the encoder or the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Embedding { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        cosine(&self.values, &other.values)
    }

    pub fn l2_distance(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// Frozen encoder weights: pixels (centered) -> 512 tanh -> 128 linear.
/// Patches at 64 px are 2x2 average-pooled down to the 32-px base
/// resolution before the affine stack. Immutable after construction; all
/// entries are f32-representable so serialization round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub seed: u64,
    pub w1: Vec<f64>, // [INPUT_DIM x HIDDEN_DIM]
    pub b1: Vec<f64>, // [HIDDEN_DIM]
    pub w2: Vec<f64>, // [HIDDEN_DIM x EMBED_DIM]
    pub b2: Vec<f64>, // [EMBED_DIM]
}

impl EncoderWeights {
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Hidden features are random filters symmetrized into the four
        // one-dimensional irreducible representations of the square's
        // symmetry group (identity/rotations/flips). Under any flip or
        // quarter rotation of the input, each feature is exactly scaled by
        // +-1, so the embedding responds to those transforms with a fixed
        // per-dimension sign pattern while remaining generic (and strongly
        // non-invariant) for every other transform kind.
        const SIDE: usize = BASE_RESOLUTION;
        const N_IRREPS: usize = 4;
        const N_BASE: usize = HIDDEN_DIM / N_IRREPS;
        let s = SIDE - 1;
        type GridMap = fn(usize, usize, usize) -> (usize, usize);
        let group: [GridMap; 8] = [
            |y, x, _| (y, x),
            |y, x, s| (x, s - y),
            |y, x, s| (s - y, s - x),
            |y, x, s| (s - x, y),
            |y, x, s| (y, s - x),
            |y, x, s| (s - y, x),
            |y, x, _| (x, y),
            |y, x, s| (s - x, s - y),
        ];
        // Character table rows for A1, A2, B1, B2 in the group order above
        // (e, r90, r180, r270, h-flip, v-flip, transpose, anti-transpose).
        const CHI: [[f64; 8]; N_IRREPS] = [
            [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0],
            [1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, 1.0, -1.0, -1.0, -1.0, 1.0, 1.0],
        ];
        // Fan-in scaling tuned so tanh pre-activations sit in the
        // sensitive region for unit-interval pixel inputs; the projection
        // rescale keeps per-entry variance at the raw-filter level.
        let s1 = (3.0 / INPUT_DIM as f64).sqrt() * 2.0;
        let proj_scale = 1.0 / (8.0f64).sqrt();
        let mut w1 = vec![0.0f64; INPUT_DIM * HIDDEN_DIM];
        let mut raw = vec![0.0f64; INPUT_DIM];
        for base in 0..N_BASE {
            for v in raw.iter_mut() {
                *v = rng.gen_range(-s1..s1);
            }
            for (k, chi) in CHI.iter().enumerate() {
                let j = k * N_BASE + base;
                for y in 0..SIDE {
                    for x in 0..SIDE {
                        for c in 0..3 {
                            let mut acc = 0.0;
                            for (g, &ch) in group.iter().zip(chi) {
                                let (gy, gx) = g(y, x, s);
                                acc += ch * raw[(gy * SIDE + gx) * 3 + c];
                            }
                            let v = (acc * proj_scale) as f32;
                            w1[((y * SIDE + x) * 3 + c) * HIDDEN_DIM + j] = v as f64;
                        }
                    }
                }
            }
        }
        // Each embedding dimension reads features of a single irrep block
        // (block-diagonal second layer), so flips/rotations act on the
        // embedding as exact sign patterns aligned with contiguous chunks.
        let s2 = (3.0 / N_BASE as f64).sqrt();
        let mut w2 = vec![0.0f64; HIDDEN_DIM * EMBED_DIM];
        const DIMS_PER_IRREP: usize = EMBED_DIM / N_IRREPS;
        for k in 0..N_IRREPS {
            for base in 0..N_BASE {
                let j = k * N_BASE + base;
                for o in k * DIMS_PER_IRREP..(k + 1) * DIMS_PER_IRREP {
                    w2[j * EMBED_DIM + o] = (rng.gen_range(-s2..s2) as f32) as f64;
                }
            }
        }
        // Biases stay zero: a bias on a sign-flipping feature would break
        // the exact odd response through the odd tanh nonlinearity.
        EncoderWeights {
            seed,
            w1,
            b1: vec![0.0; HIDDEN_DIM],
            w2,
            b2: vec![0.0; EMBED_DIM],
        }
    }

    pub fn encode(&self, p: &Patch) -> Result<Embedding, EncoderError> {
        let input = self.prepare_input(p)?;
        let mut hidden = vec![0.0f64; HIDDEN_DIM];
        // Four inputs per pass so each accumulator load serves four rows.
        let mut quads = input.chunks_exact(4).enumerate();
        for (q, xs) in &mut quads {
            let base = q * 4 * HIDDEN_DIM;
            let r0 = &self.w1[base..base + HIDDEN_DIM];
            let r1 = &self.w1[base + HIDDEN_DIM..base + 2 * HIDDEN_DIM];
            let r2 = &self.w1[base + 2 * HIDDEN_DIM..base + 3 * HIDDEN_DIM];
            let r3 = &self.w1[base + 3 * HIDDEN_DIM..base + 4 * HIDDEN_DIM];
            for ((((h, &w0), &w1), &w2), &w3) in
                hidden.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3)
            {
                *h += xs[0] * w0 + xs[1] * w1 + xs[2] * w2 + xs[3] * w3;
            }
        }
        for (i, &x) in input.iter().enumerate().skip(INPUT_DIM - INPUT_DIM % 4) {
            let row = &self.w1[i * HIDDEN_DIM..(i + 1) * HIDDEN_DIM];
            for (h, &w) in hidden.iter_mut().zip(row) {
                *h += x * w;
            }
        }
        for (h, &b) in hidden.iter_mut().zip(&self.b1) {
            *h = (*h + b).tanh();
        }
        let mut out = self.b2.clone();
        for (j, &h) in hidden.iter().enumerate() {
            let row = &self.w2[j * EMBED_DIM..(j + 1) * EMBED_DIM];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += h * w;
            }
        }
        Ok(Embedding::new(out))
    }

    fn prepare_input(&self, p: &Patch) -> Result<Vec<f64>, EncoderError> {
        let pooled = match (p.height, p.width) {
            (32, 32) => p.clone(),
            (64, 64) => average_pool_2x2(p),
            (h, _) => return Err(EncoderError::UnsupportedResolution(h)),
        };
        // Center to [-1, 1]; color offsets then shift pre-activations.
        Ok(pooled.pixels.iter().map(|&v| 2.0 * (v - 0.5)).collect())
    }
}

fn average_pool_2x2(p: &Patch) -> Patch {
    let (h, w) = (p.height / 2, p.width / 2);
    let mut out = Patch::constant(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let s = p.get(2 * y, 2 * x, c)
                    + p.get(2 * y, 2 * x + 1, c)
                    + p.get(2 * y + 1, 2 * x, c)
                    + p.get(2 * y + 1, 2 * x + 1, c);
                out.set(y, x, c, s / 4.0);
            }
        }
    }
    out
}

/// Mean cosine between each patch's embedding and the embedding of its
/// transformed version, under sequences drawn by `sampler`. This is the
/// feature-extractor-invariance measurement; low values mean the encoder
/// is transformation-sensitive.
pub fn encoder_invariance(
    weights: &EncoderWeights,
    patches: &[Patch],
    mut sampler: impl FnMut() -> crate::patchlab::TransformSequence,
) -> f64 {
    assert!(patches.len() >= 100, "invariance needs at least 100 patches");
    let mut sum = 0.0;
    for p in patches {
        let z = weights.encode(p).expect("valid resolution");
        let seq = sampler();
        let transformed = crate::patchlab::apply_sequence(p, &seq).expect("in-range parameters");
        let z_bar = weights.encode(&transformed).expect("valid resolution");
        sum += z.cosine(&z_bar);
    }
    sum / patches.len() as f64
}

/// Per-patch invariance cosines (same protocol, no aggregation).
pub fn invariance_cosines(
    weights: &EncoderWeights,
    patches: &[Patch],
    mut sampler: impl FnMut() -> crate::patchlab::TransformSequence,
) -> Vec<f64> {
    patches
        .iter()
        .map(|p| {
            let z = weights.encode(p).expect("valid resolution");
            let transformed = crate::patchlab::apply_sequence(p, &sampler()).expect("in-range parameters");
            let z_bar = weights.encode(&transformed).expect("valid resolution");
            z.cosine(&z_bar)
        })
        .collect()
}
