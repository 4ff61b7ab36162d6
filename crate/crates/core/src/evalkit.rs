//! Evaluation protocols: reconstruction/invariance cosine metrics with
//! bootstrap confidence intervals, augmented-image retrieval, 2-D PCA
//! trajectory export, the 32-bit throughput/memory benchmark, and the
//! strategy results table.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::histaug::{augment_batch_f32, GeneratorModel, InferModel};
use crate::milbench::Strategy;
use crate::patchlab::{self, Patch, TransformKind, TransformParam, TransformSequence, TransformStep};
use crate::tensorcore::infer::{self, cosine, TrackedBuf};
use crate::tensorcore::tape_alloc_count;
use crate::toyencoder::{Embedding, EncoderWeights};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least {need} {what}, got {got}")]
    TooFew { what: &'static str, need: usize, got: usize },
    #[error("first batch size {batch} already exceeds the memory budget of {budget} bytes (needs {needed})")]
    OverBudget { batch: usize, budget: usize, needed: usize },
    #[error("results table: {0}")]
    Table(String),
    #[error(transparent)]
    Generator(#[from] crate::histaug::GeneratorError),
}

/// 17-significant-digit float formatting so CSV values round-trip exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

// ---- reports and bootstrap ---------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
    pub resolution: usize,
    pub fingerprint: String,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Percentile bootstrap 95% CI of the mean. The point estimate is the
/// plain sample mean and does not depend on the resample count.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64, f64) {
    assert!(!values.is_empty());
    assert!(resamples >= BOOTSTRAP_RESAMPLES);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let s: f64 = (0..values.len()).map(|_| values[rng.gen_range(0..values.len())]).sum();
            s / values.len() as f64
        })
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = means[((resamples as f64) * 0.025).floor() as usize];
    let hi = means[(((resamples as f64) * 0.975).ceil() as usize).min(resamples - 1)];
    (mean, lo.min(mean), hi.max(mean))
}

// ---- augmenter abstraction ---------------------------------------------

/// Anything that can produce the embedding of a transformed patch from
/// the original embedding and a sequence.
pub trait Augmenter {
    fn augment(&self, patch: &Patch, z: &Embedding, seq: &TransformSequence) -> Embedding;
}

/// The trained generator: never touches pixels.
pub struct ModelAugmenter<'a>(pub &'a GeneratorModel);

impl Augmenter for ModelAugmenter<'_> {
    fn augment(&self, _patch: &Patch, z: &Embedding, seq: &TransformSequence) -> Embedding {
        self.0.forward(z, seq).expect("valid sequence")
    }
}

/// Ground truth: transform the image, then encode. Calibrates harnesses —
/// every protocol must score it perfectly.
pub struct OracleAugmenter<'a>(pub &'a EncoderWeights);

impl Augmenter for OracleAugmenter<'_> {
    fn augment(&self, patch: &Patch, _z: &Embedding, seq: &TransformSequence) -> Embedding {
        let t = patchlab::apply_sequence(patch, seq).expect("valid sequence");
        self.0.encode(&t).expect("valid resolution")
    }
}

// ---- reconstruction / cross-resolution ---------------------------------

/// Per held-out patch: sample one sequence, compare the augmenter's output
/// against the encoding of the truly transformed patch by cosine. The
/// resolution tag comes from the patches themselves, so the same protocol
/// serves the base and cross-resolution evaluations.
pub fn reconstruction_eval(
    aug: &dyn Augmenter,
    encoder: &EncoderWeights,
    patches: &[Patch],
    k_max: usize,
    seed: u64,
    fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    if patches.is_empty() {
        return Err(EvalError::TooFew { what: "patches", need: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cosines: Vec<f64> = patches
        .iter()
        .map(|p| {
            let z = encoder.encode(p).expect("valid resolution");
            let seq = patchlab::sample_sequence(&mut rng, k_max);
            let truth = patchlab::apply_sequence(p, &seq).expect("valid step");
            let z_bar = encoder.encode(&truth).expect("valid resolution");
            aug.augment(p, &z, &seq).cosine(&z_bar)
        })
        .collect();
    let (value, ci_lo, ci_hi) = bootstrap_ci(&cosines, BOOTSTRAP_RESAMPLES, seed ^ 0xB00);
    Ok(EvalReport {
        metric: "reconstruction_cosine".into(),
        value,
        ci_lo,
        ci_hi,
        n: cosines.len(),
        resolution: patches[0].height,
        fingerprint: fingerprint.into(),
    })
}

/// Mean identity-similarity: cos(augmenter(z, identity-sequence), z).
pub fn identity_eval(
    aug: &dyn Augmenter,
    encoder: &EncoderWeights,
    patches: &[Patch],
    k_max: usize,
    seed: u64,
    fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    if patches.is_empty() {
        return Err(EvalError::TooFew { what: "patches", need: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cosines: Vec<f64> = patches
        .iter()
        .map(|p| {
            let z = encoder.encode(p).expect("valid resolution");
            let seq = patchlab::sample_sequence(&mut rng, k_max).identity();
            aug.augment(p, &z, &seq).cosine(&z)
        })
        .collect();
    let (value, ci_lo, ci_hi) = bootstrap_ci(&cosines, BOOTSTRAP_RESAMPLES, seed ^ 0xB01);
    Ok(EvalReport {
        metric: "identity_cosine".into(),
        value,
        ci_lo,
        ci_hi,
        n: cosines.len(),
        resolution: patches[0].height,
        fingerprint: fingerprint.into(),
    })
}

/// Encoder sensitivity baseline on the same protocol: cos(z, z_bar).
pub fn invariance_eval(
    encoder: &EncoderWeights,
    patches: &[Patch],
    k_max: usize,
    seed: u64,
    fingerprint: &str,
) -> Result<EvalReport, EvalError> {
    if patches.is_empty() {
        return Err(EvalError::TooFew { what: "patches", need: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cosines: Vec<f64> = patches
        .iter()
        .map(|p| {
            let z = encoder.encode(p).expect("valid resolution");
            let seq = patchlab::sample_sequence(&mut rng, k_max);
            let truth = patchlab::apply_sequence(p, &seq).expect("valid step");
            z.cosine(&encoder.encode(&truth).expect("valid resolution"))
        })
        .collect();
    let (value, ci_lo, ci_hi) = bootstrap_ci(&cosines, BOOTSTRAP_RESAMPLES, seed ^ 0xB02);
    Ok(EvalReport {
        metric: "encoder_invariance_cosine".into(),
        value,
        ci_lo,
        ci_hi,
        n: cosines.len(),
        resolution: patches[0].height,
        fingerprint: fingerprint.into(),
    })
}

// ---- retrieval ---------------------------------------------------------

/// Key grid: hue and contrast at four non-identity settings each, plus a
/// blur and an erosion — ten single-step keys per patch. Hue stops short
/// of the half-turn endpoints because a +0.5 and a -0.5 turn are the same
/// rotation and would make two keys indistinguishable by construction.
pub fn default_key_grid() -> Vec<TransformStep> {
    let mut grid = Vec::new();
    for h in [-0.4, -0.2, 0.2, 0.4] {
        grid.push(TransformStep::new(TransformKind::Hue, TransformParam::Scalar(h)));
    }
    for c in [0.5, 0.75, 1.25, 1.5] {
        grid.push(TransformStep::new(TransformKind::Contrast, TransformParam::Scalar(c)));
    }
    grid.push(TransformStep::new(TransformKind::Blur, TransformParam::Choice(0)));
    grid.push(TransformStep::new(TransformKind::Erosion, TransformParam::Choice(0)));
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub accuracy: f64,
    pub n_keys: usize,
    pub n_queries: usize,
    pub fingerprint: String,
}

/// For each (patch, step) pair: keys are true transform-then-encode
/// embeddings of every grid step; the query is the augmenter's embedding
/// for that step; top-1 cosine retrieval must land on the matching key.
pub fn retrieval_eval(
    aug: &dyn Augmenter,
    encoder: &EncoderWeights,
    patches: &[Patch],
    key_grid: &[TransformStep],
    fingerprint: &str,
) -> Result<RetrievalReport, EvalError> {
    if key_grid.len() < 2 {
        return Err(EvalError::TooFew { what: "key grid entries", need: 2, got: key_grid.len() });
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for p in patches {
        let z = encoder.encode(p).expect("valid resolution");
        let keys: Vec<Embedding> = key_grid
            .iter()
            .map(|step| {
                let seq = TransformSequence::new(vec![step.clone()]).expect("single step");
                let t = patchlab::apply_sequence(p, &seq).expect("valid step");
                encoder.encode(&t).expect("valid resolution")
            })
            .collect();
        for (qi, step) in key_grid.iter().enumerate() {
            let seq = TransformSequence::new(vec![step.clone()]).expect("single step");
            let query = aug.augment(p, &z, &seq);
            let best = keys
                .iter()
                .enumerate()
                .map(|(i, k)| (i, cosine(&query.values, &k.values)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            correct += usize::from(best == qi);
            total += 1;
        }
    }
    Ok(RetrievalReport {
        accuracy: correct as f64 / total as f64,
        n_keys: key_grid.len(),
        n_queries: total,
        fingerprint: fingerprint.into(),
    })
}

// ---- PCA + trajectories ------------------------------------------------

/// Cyclic Jacobi eigendecomposition of a symmetric n x n matrix.
/// Returns (eigenvalues, eigenvectors as rows), sorted descending.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off = f64::max(off, a[p * n + q].abs());
            }
        }
        if off < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let eigvals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (r, &i) in order.iter().enumerate() {
        for k in 0..n {
            eigvecs[r * n + k] = v[k * n + i];
        }
    }
    (eigvals, eigvecs)
}

/// Top-2 PCA of the row set, fitted via the Gram matrix (exact for
/// n <= d). Projections are mean-centered; each component's d-space
/// loading has its first nonzero entry positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(&x, &m)| x - m).collect())
        .collect();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g = infer::dot(&centered[i], &centered[j]);
            gram[i * n + j] = g;
            gram[j * n + i] = g;
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(gram, n);
    let mut out = vec![[0.0; 2]; n];
    for comp in 0..2usize.min(n) {
        let u = &eigvecs[comp * n..(comp + 1) * n];
        if eigvals[comp] <= 1e-12 {
            continue;
        }
        // d-space loading: X^T u, normalized.
        let mut loading = vec![0.0; d];
        for (i, c) in centered.iter().enumerate() {
            for (l, &x) in loading.iter_mut().zip(c) {
                *l += u[i] * x;
            }
        }
        let norm = infer::dot(&loading, &loading).sqrt();
        let mut sign = 1.0;
        for &l in &loading {
            if l.abs() > 1e-12 {
                sign = l.signum();
                break;
            }
        }
        for (i, c) in centered.iter().enumerate() {
            out[i][comp] = sign * infer::dot(c, &loading) / norm;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrajectoryExport {
    pub params: Vec<f64>,
    pub true_points: Vec<[f64; 2]>,
    pub generated_points: Vec<[f64; 2]>,
    pub csv: String,
    pub svg: String,
}

impl TrajectoryExport {
    pub fn mean_paired_distance(&self) -> f64 {
        self.true_points
            .iter()
            .zip(&self.generated_points)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum::<f64>()
            / self.true_points.len() as f64
    }
}

/// Sweep one continuous transform over a parameter grid; project the true
/// and generated embeddings with a shared PCA basis; emit paired
/// polylines (circles = true, squares = generated) and the coordinates.
pub fn trajectory_export(
    aug: &dyn Augmenter,
    encoder: &EncoderWeights,
    patch: &Patch,
    kind: TransformKind,
    param_grid: &[f64],
) -> Result<TrajectoryExport, EvalError> {
    if param_grid.len() < 3 {
        return Err(EvalError::TooFew { what: "grid points", need: 3, got: param_grid.len() });
    }
    let z = encoder.encode(patch).expect("valid resolution");
    let mut true_rows = Vec::with_capacity(param_grid.len());
    let mut gen_rows = Vec::with_capacity(param_grid.len());
    for &p in param_grid {
        // For the stain transform the grid value is a normalized shared
        // coefficient in [-1, 1] applied to all six channels.
        let step = if kind == TransformKind::Hed {
            TransformStep::new(kind, TransformParam::Hed([p * patchlab::HED_DELTA; 6]))
        } else {
            TransformStep::new(kind, TransformParam::Scalar(p))
        };
        let seq = TransformSequence::new(vec![step]).expect("single step");
        let truth = patchlab::apply_sequence(patch, &seq).expect("valid step");
        true_rows.push(encoder.encode(&truth).expect("valid resolution").values);
        gen_rows.push(aug.augment(patch, &z, &seq).values);
    }
    let union: Vec<Vec<f64>> = true_rows.iter().chain(&gen_rows).cloned().collect();
    let pts = pca_2d(&union);
    let true_points = pts[..param_grid.len()].to_vec();
    let generated_points = pts[param_grid.len()..].to_vec();

    let mut csv = String::from("param,true_x,true_y,gen_x,gen_y\n");
    for (i, &p) in param_grid.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_float(p),
            fmt_float(true_points[i][0]),
            fmt_float(true_points[i][1]),
            fmt_float(generated_points[i][0]),
            fmt_float(generated_points[i][1]),
        ));
    }
    let svg = trajectory_svg(&true_points, &generated_points);
    Ok(TrajectoryExport { params: param_grid.to_vec(), true_points, generated_points, csv, svg })
}

fn svg_scale(points: &[[f64; 2]]) -> (f64, f64, f64) {
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        lo_x = lo_x.min(p[0]);
        hi_x = hi_x.max(p[0]);
        lo_y = lo_y.min(p[1]);
        hi_y = hi_y.max(p[1]);
    }
    let span = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    (lo_x, lo_y, 560.0 / span)
}

fn trajectory_svg(true_pts: &[[f64; 2]], gen_pts: &[[f64; 2]]) -> String {
    let all: Vec<[f64; 2]> = true_pts.iter().chain(gen_pts).copied().collect();
    let (lo_x, lo_y, scale) = svg_scale(&all);
    let map = |p: &[f64; 2]| ((p[0] - lo_x) * scale + 20.0, (p[1] - lo_y) * scale + 20.0);
    let polyline = |pts: &[[f64; 2]], color: &str| {
        let coords: Vec<String> = pts
            .iter()
            .map(|p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        format!("<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>", coords.join(" "))
    };
    let mut body = String::new();
    body.push_str(&polyline(true_pts, "#1f77b4"));
    body.push_str(&polyline(gen_pts, "#d62728"));
    for p in true_pts {
        let (x, y) = map(p);
        body.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#1f77b4\"/>"));
    }
    for p in gen_pts {
        let (x, y) = map(p);
        body.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"8\" height=\"8\" fill=\"#d62728\"/>",
            x - 4.0,
            y - 4.0
        ));
    }
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"600\">{body}</svg>")
}

// ---- throughput benchmark ----------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub batch: usize,
    pub wall_seconds: f64,
    pub peak_bytes: usize,
    pub rows_per_sec: f64,
}

/// Time one 32-bit inference pass per ascending batch size; peak memory
/// comes from the deterministic buffer gauge, and the pass is asserted
/// tape-free via the tape allocation counter.
pub fn bench_throughput(
    model: &GeneratorModel,
    batch_sizes: &[usize],
    mem_budget: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>, EvalError> {
    let d = model.config.d;
    let infer_model = InferModel::<f32>::from_model(model);
    let seq = TransformSequence::new(vec![TransformStep::new(
        TransformKind::Hue,
        TransformParam::Scalar(0.25),
    )])
    .expect("single step");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(batch_sizes.len());
    for (bi, &batch) in batch_sizes.iter().enumerate() {
        // Input + output buffers dominate; refuse rather than thrash.
        let needed = 2 * batch * d * std::mem::size_of::<f32>();
        if needed > mem_budget {
            if bi == 0 {
                return Err(EvalError::OverBudget { batch, budget: mem_budget, needed });
            }
            break;
        }
        infer::reset_peak_bytes();
        let tapes_before = tape_alloc_count();
        let mut rows = TrackedBuf::<f32>::zeros(batch * d);
        for v in rows.data.iter_mut() {
            *v = rng.gen_range(-1.0f32..1.0f32);
        }
        let start = Instant::now();
        let out = augment_batch_f32(&infer_model, &rows, batch, &seq)?;
        let wall_seconds = start.elapsed().as_secs_f64();
        assert_eq!(tape_alloc_count(), tapes_before, "inference pass must not allocate a tape");
        assert!(out.data.iter().all(|v| v.is_finite()));
        records.push(BenchRecord {
            batch,
            wall_seconds,
            peak_bytes: infer::peak_bytes(),
            rows_per_sec: batch as f64 / wall_seconds,
        });
    }
    Ok(records)
}

pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("batch,wall_seconds,peak_bytes,rows_per_sec\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.batch,
            fmt_float(r.wall_seconds),
            r.peak_bytes,
            fmt_float(r.rows_per_sec)
        ));
    }
    out
}

/// Log-log scatter of wall time against batch size.
pub fn bench_svg(records: &[BenchRecord]) -> String {
    let pts: Vec<[f64; 2]> = records
        .iter()
        .map(|r| [(r.batch as f64).log10(), r.wall_seconds.max(1e-9).log10()])
        .collect();
    let (lo_x, lo_y, scale) = svg_scale(&pts);
    let mut body = String::new();
    for p in &pts {
        let x = (p[0] - lo_x) * scale + 20.0;
        let y = 580.0 - (p[1] - lo_y) * scale;
        body.push_str(&format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#1f77b4\"/>"));
    }
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"600\">{body}</svg>")
}

// ---- strategy table ----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyCell {
    pub strategy: String,
    pub data_fraction: f64,
    pub resolution: usize,
    pub mean_auc: f64,
    /// Absent (and flagged) when the cell holds a single fold.
    pub std_auc: Option<f64>,
    pub n_folds: usize,
}

#[derive(Debug, Clone)]
pub struct StrategyTable {
    pub cells: Vec<StrategyCell>,
    /// (fraction, resolution, strategy) groups expected but absent.
    pub missing: Vec<String>,
    /// Gain over the Noise baseline per (fraction, resolution, strategy).
    pub gain_over_noise: Vec<(String, f64, usize, f64)>,
}

pub const RESULTS_HEADER: &str = "fold,strategy,data_fraction,resolution,seed,auc,epochs_ran,wall_seconds";
/// Same table with a trailing config-fingerprint column, as the command
/// line front end appends it.
pub const RESULTS_HEADER_FP: &str =
    "fold,strategy,data_fraction,resolution,seed,auc,epochs_ran,wall_seconds,fingerprint";

/// Aggregate the flat results CSV into per-(strategy, fraction,
/// resolution) means and standard deviations, plus gain-over-Noise
/// deltas. Cells with no rows are listed as missing, never invented.
pub fn strategy_table(csv_text: &str) -> Result<StrategyTable, EvalError> {
    let mut lines = csv_text.lines();
    let header = lines.next().ok_or_else(|| EvalError::Table("empty results file".into()))?;
    let n_cols = match header.trim() {
        h if h == RESULTS_HEADER => 8,
        h if h == RESULTS_HEADER_FP => 9,
        _ => return Err(EvalError::Table(format!("unexpected header {header:?}"))),
    };
    let mut groups: std::collections::BTreeMap<(String, String, String), Vec<f64>> = Default::default();
    for (li, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            return Err(EvalError::Table(format!("row {} has {} fields", li + 2, fields.len())));
        }
        let auc: f64 = fields[5]
            .parse()
            .map_err(|_| EvalError::Table(format!("row {}: bad auc {:?}", li + 2, fields[5])))?;
        groups
            .entry((fields[1].to_string(), fields[2].to_string(), fields[3].to_string()))
            .or_default()
            .push(auc);
    }
    let mut cells = Vec::new();
    for ((strategy, fraction, resolution), aucs) in &groups {
        let n = aucs.len();
        let mean = aucs.iter().sum::<f64>() / n as f64;
        let std = if n >= 2 {
            Some((aucs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
        } else {
            None
        };
        cells.push(StrategyCell {
            strategy: strategy.clone(),
            data_fraction: fraction.parse().unwrap_or(f64::NAN),
            resolution: resolution.parse().unwrap_or(0),
            mean_auc: mean,
            std_auc: std,
            n_folds: n,
        });
    }
    let contexts: std::collections::BTreeSet<(String, String)> =
        groups.keys().map(|(_, f, r)| (f.clone(), r.clone())).collect();
    let mut missing = Vec::new();
    let mut gain_over_noise = Vec::new();
    for (fraction, resolution) in &contexts {
        let get = |s: Strategy| groups.get(&(s.name().to_string(), fraction.clone(), resolution.clone()));
        let noise_mean = get(Strategy::Noise).map(|v| v.iter().sum::<f64>() / v.len() as f64);
        for s in [Strategy::Base, Strategy::Noise, Strategy::Inst, Strategy::Wsi] {
            match get(s) {
                None => missing.push(format!("{}@fraction={fraction},resolution={resolution}", s.name())),
                Some(v) => {
                    if let Some(nm) = noise_mean {
                        let mean = v.iter().sum::<f64>() / v.len() as f64;
                        gain_over_noise.push((
                            s.name().to_string(),
                            fraction.parse().unwrap_or(f64::NAN),
                            resolution.parse().unwrap_or(0),
                            mean - nm,
                        ));
                    }
                }
            }
        }
        if noise_mean.is_none() {
            missing.push(format!("noise baseline missing @fraction={fraction},resolution={resolution}"));
        }
    }
    Ok(StrategyTable { cells, missing, gain_over_noise })
}

pub fn strategy_table_text(table: &StrategyTable) -> String {
    let mut out = String::from("strategy,data_fraction,resolution,mean_auc,std_auc,n_folds\n");
    for c in &table.cells {
        let std = c.std_auc.map(|s| fmt_float(s)).unwrap_or_else(|| "single-fold".into());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.strategy,
            c.data_fraction,
            c.resolution,
            fmt_float(c.mean_auc),
            std,
            c.n_folds
        ));
    }
    if !table.gain_over_noise.is_empty() {
        out.push_str("\nstrategy,data_fraction,resolution,gain_over_noise\n");
        for (s, f, r, g) in &table.gain_over_noise {
            out.push_str(&format!("{s},{f},{r},{}\n", fmt_float(*g)));
        }
    }
    if !table.missing.is_empty() {
        out.push_str("\nmissing cells:\n");
        for m in &table.missing {
            out.push_str(&format!("  {m}\n"));
        }
    }
    out
}
