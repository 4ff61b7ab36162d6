//! Synthetic multiple-instance classification task, the gated-attention
//! ABMIL aggregator, and the four training-time augmentation strategies
//! (Base, Noise, Instance-wise, Bag-wise) under leakage-safe splits.
//!
//! Each bag simulates one slide: its patches share a slide-level
//! appearance transformation applied in image space before encoding, so
//! embedding-space augmentation at training time genuinely models the
//! appearance shifts seen at test time.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::histaug::{augment_batch, BatchSequences, GeneratorModel};
use crate::patchlab::{self, sample_step, synth_patch, TransformKind, TransformSequence};
use crate::tensorcore::{AdamW, Param, Tape, Tensor, TensorError, Var};
use crate::toyencoder::{Embedding, EncoderWeights};

#[derive(Debug, Error)]
pub enum MilError {
    #[error("bag must contain at least one instance")]
    EmptyBag,
    #[error("metric needs both classes, got only class {0}")]
    SingleClass(u8),
    #[error("fold has no training bags")]
    EmptyFold,
    #[error("strategy {0} requires a generator")]
    MissingGenerator(&'static str),
    #[error("patch universe of {0} is too small (need >= 50)")]
    UniverseTooSmall(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Generator(#[from] crate::histaug::GeneratorError),
}

// ---- splits ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    /// Bootstrap sample (with replacement) of the 70% training patches.
    pub train_pool: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub seed: u64,
    /// 70% of the patch universe: generator and MIL training draw from here.
    pub gen_train_ids: Vec<usize>,
    /// The held-out 30%, used only for validation/test bags.
    pub holdout_ids: Vec<usize>,
    pub folds: Vec<FoldPlan>,
}

pub const N_FOLDS: usize = 5;

/// Class identity of a patch id: the universe alternates classes.
pub fn patch_class(id: usize) -> u8 {
    (id % 2) as u8
}

/// Three-step split recipe: one 70/30 partition of the patch universe,
/// then per fold a bootstrap of the 70% and a fresh shuffle-split of the
/// 30% into equal validation and test halves.
pub fn make_splits(seed: u64, n_patches: usize) -> Result<SplitPlan, MilError> {
    if n_patches < 50 {
        return Err(MilError::UniverseTooSmall(n_patches));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = (0..n_patches).collect();
    ids.shuffle(&mut rng);
    let cut = (n_patches * 7) / 10;
    let mut gen_train_ids = ids[..cut].to_vec();
    let mut holdout_ids = ids[cut..].to_vec();
    gen_train_ids.sort_unstable();
    holdout_ids.sort_unstable();

    let folds = (0..N_FOLDS)
        .map(|_| {
            let train_pool = (0..gen_train_ids.len())
                .map(|_| gen_train_ids[rng.gen_range(0..gen_train_ids.len())])
                .collect();
            let mut held = holdout_ids.clone();
            held.shuffle(&mut rng);
            let half = held.len() / 2;
            FoldPlan { train_pool, val_ids: held[..half].to_vec(), test_ids: held[half..].to_vec() }
        })
        .collect();
    Ok(SplitPlan { seed, gen_train_ids, holdout_ids, folds })
}

// ---- bags --------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub slide_id: usize,
    pub label: u8,
    /// Class-1 fraction above which a bag is labeled positive.
    pub threshold: f64,
    pub witness_fraction: f64,
    pub patch_ids: Vec<usize>,
    /// Slide-level appearance shift applied in image space to every patch.
    pub appearance: TransformSequence,
    pub embeddings: Vec<Embedding>,
}

#[derive(Debug, Clone)]
pub struct TaskConfig {
    pub n_patches: usize,
    pub n_train_bags: usize,
    pub n_val_bags: usize,
    pub n_test_bags: usize,
    pub m_range: (usize, usize),
    pub pos_witness: (f64, f64),
    pub neg_witness: (f64, f64),
    pub threshold: f64,
    pub resolution: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_patches: 400,
            n_train_bags: 100,
            n_val_bags: 30,
            n_test_bags: 30,
            m_range: (20, 200),
            pos_witness: (0.2, 0.6),
            neg_witness: (0.0, 0.1),
            threshold: 0.15,
            resolution: 32,
        }
    }
}

/// Appearance kinds a slide can differ by: color chemistry and optics,
/// not geometry, so the witness signal survives the shift.
const APPEARANCE_KINDS: [TransformKind; 5] = [
    TransformKind::Brightness,
    TransformKind::Contrast,
    TransformKind::Saturation,
    TransformKind::Hue,
    TransformKind::Hed,
];

fn sample_appearance(rng: &mut ChaCha8Rng) -> TransformSequence {
    let mut kinds = APPEARANCE_KINDS.to_vec();
    kinds.shuffle(rng);
    let k = rng.gen_range(1..=2);
    let steps = kinds[..k].iter().map(|&kk| sample_step(rng, kk)).collect();
    TransformSequence::new(steps).expect("distinct kinds")
}

fn build_bag(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    cfg: &TaskConfig,
    encoder: &EncoderWeights,
    slide_id: usize,
) -> Bag {
    let pos_pool: Vec<usize> = pool.iter().copied().filter(|&id| patch_class(id) == 1).collect();
    let neg_pool: Vec<usize> = pool.iter().copied().filter(|&id| patch_class(id) == 0).collect();
    let m = rng.gen_range(cfg.m_range.0..=cfg.m_range.1);
    let label: u8 = rng.gen_range(0..2);
    let (lo, hi) = if label == 1 { cfg.pos_witness } else { cfg.neg_witness };
    let witness_fraction = rng.gen_range(lo..=hi);
    let n_pos = (witness_fraction * m as f64).round() as usize;
    let mut patch_ids: Vec<usize> = Vec::with_capacity(m);
    for _ in 0..n_pos {
        patch_ids.push(pos_pool[rng.gen_range(0..pos_pool.len())]);
    }
    for _ in n_pos..m {
        patch_ids.push(neg_pool[rng.gen_range(0..neg_pool.len())]);
    }
    patch_ids.shuffle(rng);
    let realized = patch_ids.iter().filter(|&&id| patch_class(id) == 1).count() as f64 / m as f64;
    let label = u8::from(realized > cfg.threshold);
    let appearance = sample_appearance(rng);
    let embeddings = patch_ids
        .iter()
        .map(|&id| {
            let p = synth_patch(id as u64, patch_class(id), cfg.resolution);
            let shifted = patchlab::apply_sequence(&p, &appearance).expect("valid appearance step");
            encoder.encode(&shifted).expect("valid resolution")
        })
        .collect();
    Bag { slide_id, label, threshold: cfg.threshold, witness_fraction: realized, patch_ids, appearance, embeddings }
}

#[derive(Debug, Clone)]
pub struct FoldBags {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
    pub test: Vec<Bag>,
}

/// Materialize the bags of one fold. Train bags draw only from the fold's
/// bootstrap pool; val/test bags only from the held-out shuffle halves.
pub fn build_fold_bags(
    plan: &SplitPlan,
    fold: usize,
    cfg: &TaskConfig,
    encoder: &EncoderWeights,
) -> FoldBags {
    let fp = &plan.folds[fold];
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ ((fold as u64 + 1) * 0x5DEECE66D));
    let mut slide = 0..;
    let mut build_set = |pool: &[usize], n: usize, rng: &mut ChaCha8Rng| -> Vec<Bag> {
        (0..n).map(|_| build_bag(rng, pool, cfg, encoder, slide.next().unwrap())).collect()
    };
    let train = build_set(&fp.train_pool, cfg.n_train_bags, &mut rng);
    let val = build_set(&fp.val_ids, cfg.n_val_bags, &mut rng);
    let test = build_set(&fp.test_ids, cfg.n_test_bags, &mut rng);
    FoldBags { train, val, test }
}

/// Appendix-style leakage check: no generator-training patch id may appear
/// in any validation or test bag.
pub fn leakage_disjoint(gen_train_ids: &[usize], eval_bags: &[Bag]) -> bool {
    let train: std::collections::HashSet<usize> = gen_train_ids.iter().copied().collect();
    eval_bags.iter().all(|b| b.patch_ids.iter().all(|id| !train.contains(id)))
}

// ---- ABMIL -------------------------------------------------------------

pub const ATTN_HIDDEN: usize = 64;

/// Gated-attention MIL aggregator: per-instance score
/// w'(tanh(V z) * sigmoid(U z)), softmax over the bag, weighted mean,
/// then a two-class linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct AbmilModel {
    pub d: usize,
    pub h: usize,
    pub params: Vec<Param>, // attn.v, attn.u, attn.w, head.w, head.b
}

impl AbmilModel {
    pub fn init(d: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Tensor {
            let limit = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| (rng.gen_range(-limit..limit) as f32) as f64).collect();
            Tensor::new(shape, data)
        };
        let params = vec![
            Param::new("attn.v", uniform(vec![d, h], d)),
            Param::new("attn.u", uniform(vec![d, h], d)),
            Param::new("attn.w", uniform(vec![h, 1], h)),
            Param::new("head.w", uniform(vec![d, 2], d)),
            Param::new("head.b", Tensor::zeros(vec![2])),
        ];
        AbmilModel { d, h, params }
    }

    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            p.quantize_f32();
        }
    }
}

fn bag_matrix(d: usize, embeddings: &[Embedding]) -> Tensor {
    let data: Vec<f64> = embeddings.iter().flat_map(|e| e.values.clone()).collect();
    Tensor::new(vec![embeddings.len(), d], data)
}

/// Tape forward over one bag. Returns (logits [1,2], attention [1,M]).
pub fn abmil_forward_on_tape(
    tape: &mut Tape,
    vars: &[Var],
    d: usize,
    embeddings: &[Embedding],
) -> Result<(Var, Var), MilError> {
    if embeddings.is_empty() {
        return Err(MilError::EmptyBag);
    }
    let z = tape.constant(bag_matrix(d, embeddings));
    let (v, u, w, hw, hb) = (vars[0], vars[1], vars[2], vars[3], vars[4]);
    let zv = tape.matmul(z, v)?;
    let gate_t = tape.tanh(zv);
    let zu = tape.matmul(z, u)?;
    let gate_s = tape.sigmoid(zu);
    let gated = tape.mul(gate_t, gate_s)?;
    let scores = tape.matmul(gated, w)?; // [M,1]
    let scores_row = tape.transpose(scores)?; // [1,M]
    let attn = tape.softmax_rows(scores_row);
    let pooled = tape.matmul(attn, z)?; // [1,d]
    let logits = tape.matmul(pooled, hw)?;
    let logits = tape.add_row(logits, hb)?;
    Ok((logits, attn))
}

/// Tape-free forward: (probability of class 1, attention weights).
pub fn abmil_eval(model: &AbmilModel, embeddings: &[Embedding]) -> Result<(f64, Vec<f64>), MilError> {
    if embeddings.is_empty() {
        return Err(MilError::EmptyBag);
    }
    let (d, h) = (model.d, model.h);
    let v = &model.params[0].value.data;
    let u = &model.params[1].value.data;
    let w = &model.params[2].value.data;
    let hw = &model.params[3].value.data;
    let hb = &model.params[4].value.data;
    let mut scores: Vec<f64> = embeddings
        .iter()
        .map(|e| {
            let mut s = 0.0;
            for j in 0..h {
                let mut a = 0.0;
                let mut b = 0.0;
                for i in 0..d {
                    a += e.values[i] * v[i * h + j];
                    b += e.values[i] * u[i * h + j];
                }
                s += w[j] * a.tanh() * (1.0 / (1.0 + (-b).exp()));
            }
            s
        })
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
    let mut pooled = vec![0.0; d];
    for (a, e) in scores.iter().zip(embeddings) {
        for (p, &zv) in pooled.iter_mut().zip(&e.values) {
            *p += a * zv;
        }
    }
    let mut logits = [hb[0], hb[1]];
    for (i, &p) in pooled.iter().enumerate() {
        logits[0] += p * hw[i * 2];
        logits[1] += p * hw[i * 2 + 1];
    }
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    Ok((e1 / (e0 + e1), scores))
}

// ---- augmentation strategies -------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    Base,
    Noise,
    Inst,
    Wsi,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Noise => "noise",
            Strategy::Inst => "inst",
            Strategy::Wsi => "wsi",
        }
    }
}

pub const DEFAULT_P_AUG: f64 = 0.75;

/// The embeddings a MIL step actually trains on, plus the sequence each
/// instance was conditioned on (None when untouched).
pub struct AugmentedBag {
    pub embeddings: Vec<Embedding>,
    pub sequences: Vec<Option<TransformSequence>>,
}

/// Per-component noise scale matched to the generator's mean per-row
/// displacement: a Gaussian with this sigma has expected norm close to
/// the mean of ||generated - original|| over random sequences.
pub fn calibrate_noise_sigma(
    generator: &GeneratorModel,
    sample: &[Embedding],
    k_max: usize,
    seed: u64,
) -> Result<f64, MilError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for z in sample {
        let seq = patchlab::sample_sequence(&mut rng, k_max);
        let out = generator.forward(z, &seq)?;
        total += out.l2_distance(z);
    }
    let mean_disp = total / sample.len() as f64;
    Ok(mean_disp / (generator.config.d as f64).sqrt())
}

/// Mean displacement a per-component sigma produces, measured empirically;
/// used to verify the calibration, not to set it.
pub fn measure_noise_displacement(sigma: f64, d: usize, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut total = 0.0;
    for _ in 0..n {
        let sq: f64 = (0..d).map(|_| normal.sample(&mut rng).powi(2)).sum();
        total += sq.sqrt();
    }
    total / n as f64
}

pub fn augment_bag(
    bag: &Bag,
    strategy: Strategy,
    generator: Option<&GeneratorModel>,
    noise_sigma: f64,
    p_aug: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedBag, MilError> {
    let untouched = || AugmentedBag {
        embeddings: bag.embeddings.clone(),
        sequences: vec![None; bag.embeddings.len()],
    };
    if strategy == Strategy::Base || rng.gen::<f64>() >= p_aug {
        return Ok(untouched());
    }
    match strategy {
        Strategy::Base => unreachable!(),
        Strategy::Noise => {
            let normal = Normal::new(0.0, noise_sigma).expect("positive sigma");
            let embeddings = bag
                .embeddings
                .iter()
                .map(|e| Embedding::new(e.values.iter().map(|&v| v + normal.sample(rng)).collect()))
                .collect();
            Ok(AugmentedBag { embeddings, sequences: vec![None; bag.embeddings.len()] })
        }
        Strategy::Inst => {
            let g = generator.ok_or(MilError::MissingGenerator("inst"))?;
            let seqs: Vec<TransformSequence> = (0..bag.embeddings.len())
                .map(|_| patchlab::sample_sequence(rng, g.config.k_max))
                .collect();
            let embeddings = augment_batch(g, &bag.embeddings, BatchSequences::PerRow(&seqs))?;
            Ok(AugmentedBag { embeddings, sequences: seqs.into_iter().map(Some).collect() })
        }
        Strategy::Wsi => {
            let g = generator.ok_or(MilError::MissingGenerator("wsi"))?;
            let seq = patchlab::sample_sequence(rng, g.config.k_max);
            let embeddings = augment_batch(g, &bag.embeddings, BatchSequences::Shared(&seq))?;
            let sequences = vec![Some(seq); bag.embeddings.len()];
            Ok(AugmentedBag { embeddings, sequences })
        }
    }
}

// ---- metrics -----------------------------------------------------------

/// Rank-based AUC (Mann-Whitney), ties counted half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MilError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(MilError::SingleClass(0));
    }
    if n_neg == 0 {
        return Err(MilError::SingleClass(1));
    }
    let mut wins = 0.0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (n_pos * n_neg) as f64)
}

pub fn balanced_accuracy(preds: &[u8], labels: &[u8]) -> f64 {
    let mut hits = [0.0f64; 2];
    let mut counts = [0.0f64; 2];
    for (&p, &l) in preds.iter().zip(labels) {
        counts[l as usize] += 1.0;
        if p == l {
            hits[l as usize] += 1.0;
        }
    }
    let mut total = 0.0;
    let mut classes = 0.0;
    for c in 0..2 {
        if counts[c] > 0.0 {
            total += hits[c] / counts[c];
            classes += 1.0;
        }
    }
    total / classes
}

// ---- training ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MilHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_accum: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub p_aug: f64,
}

impl Default for MilHyper {
    fn default() -> Self {
        MilHyper { lr: 1e-4, weight_decay: 1e-5, grad_accum: 4, patience: 30, max_epochs: 200, p_aug: DEFAULT_P_AUG }
    }
}

pub struct MilOutcome {
    pub model: AbmilModel,
    pub test_auc: f64,
    pub epochs_ran: usize,
    pub best_val_balacc: f64,
}

fn eval_scores(model: &AbmilModel, bags: &[Bag]) -> Result<(Vec<f64>, Vec<u8>), MilError> {
    let mut scores = Vec::with_capacity(bags.len());
    let mut labels = Vec::with_capacity(bags.len());
    for b in bags {
        scores.push(abmil_eval(model, &b.embeddings)?.0);
        labels.push(b.label);
    }
    Ok((scores, labels))
}

/// One-bag-per-step cross-entropy training with gradient accumulation and
/// early stopping on validation balanced accuracy; returns the best model
/// by that criterion and its held-out test AUC.
pub fn train_mil(
    fold: &FoldBags,
    strategy: Strategy,
    generator: Option<&GeneratorModel>,
    noise_sigma: f64,
    data_fraction: f64,
    hyper: &MilHyper,
    seed: u64,
) -> Result<MilOutcome, MilError> {
    let n_train = ((data_fraction * fold.train.len() as f64).ceil() as usize).min(fold.train.len());
    if n_train == 0 {
        return Err(MilError::EmptyFold);
    }
    let train_bags = &fold.train[..n_train];
    let d = train_bags[0].embeddings[0].dim();
    let mut model = AbmilModel::init(d, ATTN_HIDDEN, seed);
    model.quantize_f32();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_D00D_F00D);
    let mut opt = AdamW::new(hyper.lr, hyper.weight_decay);

    let mut best = model.clone();
    let mut best_val = -1.0;
    let mut since_best = 0;
    let mut epochs_ran = 0;

    let mut order: Vec<usize> = (0..n_train).collect();
    for _epoch in 0..hyper.max_epochs {
        epochs_ran += 1;
        order.shuffle(&mut rng);
        let mut accum: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let mut in_accum = 0;
        for &bi in &order {
            let bag = &train_bags[bi];
            let aug = augment_bag(bag, strategy, generator, noise_sigma, hyper.p_aug, &mut rng)?;
            let mut tape = Tape::new();
            let vars: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
            let (logits, _) = abmil_forward_on_tape(&mut tape, &vars, d, &aug.embeddings)?;
            let flat = tape.reshape(logits, vec![2])?;
            let loss = tape.cross_entropy_logits(flat, bag.label as usize)?;
            let scaled = tape.scale(loss, 1.0 / hyper.grad_accum as f64);
            tape.backward(scaled)?;
            for (acc, &v) in accum.iter_mut().zip(&vars) {
                if let Some(g) = tape.grad(v) {
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
            }
            in_accum += 1;
            if in_accum == hyper.grad_accum {
                opt.step(&mut model.params, &accum);
                for a in accum.iter_mut() {
                    a.iter_mut().for_each(|x| *x = 0.0);
                }
                in_accum = 0;
            }
        }
        if in_accum > 0 {
            opt.step(&mut model.params, &accum);
        }

        let mut preds = Vec::with_capacity(fold.val.len());
        let mut labels = Vec::with_capacity(fold.val.len());
        for b in &fold.val {
            let (p1, _) = abmil_eval(&model, &b.embeddings)?;
            preds.push(u8::from(p1 > 0.5));
            labels.push(b.label);
        }
        let val_balacc = balanced_accuracy(&preds, &labels);
        if val_balacc > best_val {
            best_val = val_balacc;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }

    let (scores, labels) = eval_scores(&best, &fold.test)?;
    let test_auc = auc(&scores, &labels)?;
    Ok(MilOutcome { model: best, test_auc, epochs_ran, best_val_balacc: best_val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histaug::GeneratorConfig;
    use crate::tensorcore::gradcheck::{central_diff, max_rel_err};

    fn tiny_task() -> TaskConfig {
        TaskConfig {
            n_patches: 60,
            n_train_bags: 8,
            n_val_bags: 6,
            n_test_bags: 6,
            m_range: (20, 30),
            ..TaskConfig::default()
        }
    }

    fn tiny_generator() -> GeneratorModel {
        let cfg = GeneratorConfig { d: 128, chunks: 4, blocks: 1, heads: 2, k_max: 2, ffn_mult: 1, lambda_id: 1.0 };
        GeneratorModel::init(cfg, 5).unwrap()
    }

    #[test]
    fn splits_are_deterministic_and_disjoint() {
        let a = make_splits(9, 120).unwrap();
        let b = make_splits(9, 120).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gen_train_ids.len(), 84);
        assert_eq!(a.holdout_ids.len(), 36);
        let train: std::collections::HashSet<_> = a.gen_train_ids.iter().collect();
        assert!(a.holdout_ids.iter().all(|id| !train.contains(id)));
        assert_eq!(a.folds.len(), N_FOLDS);
        for f in &a.folds {
            assert!(f.val_ids.iter().all(|id| a.holdout_ids.contains(id)));
            assert!(f.test_ids.iter().all(|id| a.holdout_ids.contains(id)));
            let val: std::collections::HashSet<_> = f.val_ids.iter().collect();
            assert!(f.test_ids.iter().all(|id| !val.contains(id)));
        }
        assert!(matches!(make_splits(1, 40), Err(MilError::UniverseTooSmall(40))));
    }

    #[test]
    fn bootstrap_pools_contain_duplicates() {
        let plan = make_splits(3, 100).unwrap();
        for f in &plan.folds {
            let unique: std::collections::HashSet<_> = f.train_pool.iter().collect();
            assert!(unique.len() < f.train_pool.len(), "bootstrap of {} had no duplicates", f.train_pool.len());
        }
    }

    #[test]
    fn bags_respect_pools_and_labels() {
        let plan = make_splits(11, 60).unwrap();
        let encoder = EncoderWeights::seeded(42);
        let bags = build_fold_bags(&plan, 0, &tiny_task(), &encoder);
        assert!(leakage_disjoint(&plan.gen_train_ids, &bags.val));
        assert!(leakage_disjoint(&plan.gen_train_ids, &bags.test));
        for b in bags.train.iter().chain(&bags.val).chain(&bags.test) {
            let frac = b.patch_ids.iter().filter(|&&id| patch_class(id) == 1).count() as f64
                / b.patch_ids.len() as f64;
            assert_eq!(b.label, u8::from(frac > b.threshold));
            assert_eq!(b.witness_fraction, frac);
            assert_eq!(b.embeddings.len(), b.patch_ids.len());
            assert!(b.patch_ids.len() >= 20 && b.patch_ids.len() <= 200);
        }
    }

    #[test]
    fn attention_is_uniform_on_identical_instances_and_normalized() {
        let model = AbmilModel::init(6, 4, 1);
        let z = Embedding::new(vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.7]);
        let bag: Vec<Embedding> = vec![z; 5];
        let (_, attn) = abmil_eval(&model, &bag).unwrap();
        for &a in &attn {
            assert!((a - 0.2).abs() < 1e-12);
        }
        let mixed: Vec<Embedding> = (0..7)
            .map(|r| Embedding::new((0..6).map(|i| ((r * 6 + i) as f64).sin()).collect()))
            .collect();
        let (_, attn) = abmil_eval(&model, &mixed).unwrap();
        assert!((attn.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(attn.iter().all(|&a| a > 0.0));
        assert!(matches!(abmil_eval(&model, &[]), Err(MilError::EmptyBag)));
    }

    #[test]
    fn tape_and_eval_forward_agree() {
        let model = AbmilModel::init(6, 4, 2);
        let bag: Vec<Embedding> = (0..4)
            .map(|r| Embedding::new((0..6).map(|i| ((r * 6 + i) as f64 * 0.37).cos()).collect()))
            .collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.value.clone(), false)).collect();
        let (logits, attn) = abmil_forward_on_tape(&mut tape, &vars, 6, &bag).unwrap();
        let l = tape.data(logits).to_vec();
        let a = tape.data(attn).to_vec();
        let (p1, attn_eval) = abmil_eval(&model, &bag).unwrap();
        let m = l[0].max(l[1]);
        let expect_p1 = (l[1] - m).exp() / ((l[0] - m).exp() + (l[1] - m).exp());
        assert!((p1 - expect_p1).abs() < 1e-12);
        for (x, y) in a.iter().zip(&attn_eval) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bag_loss_gradients_match_finite_differences() {
        let model = AbmilModel::init(6, 4, 7);
        let bag: Vec<Embedding> = (0..3)
            .map(|r| Embedding::new((0..6).map(|i| ((r * 6 + i) as f64 * 0.21).sin()).collect()))
            .collect();
        let sizes: Vec<usize> = model.params.iter().map(|p| p.value.numel()).collect();
        let flat: Vec<f64> = model.params.iter().flat_map(|p| p.value.data.clone()).collect();
        let eval = |theta: &[f64]| -> f64 {
            let mut m = model.clone();
            let mut off = 0;
            for (p, &n) in m.params.iter_mut().zip(&sizes) {
                p.value.data.copy_from_slice(&theta[off..off + n]);
                off += n;
            }
            let mut tape = Tape::new();
            let vars: Vec<Var> = m.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
            let (logits, _) = abmil_forward_on_tape(&mut tape, &vars, 6, &bag).unwrap();
            let flat_l = tape.reshape(logits, vec![2]).unwrap();
            let loss = tape.cross_entropy_logits(flat_l, 1).unwrap();
            tape.data(loss)[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
        let (logits, _) = abmil_forward_on_tape(&mut tape, &vars, 6, &bag).unwrap();
        let flat_l = tape.reshape(logits, vec![2]).unwrap();
        let loss = tape.cross_entropy_logits(flat_l, 1).unwrap();
        tape.backward(loss).unwrap();
        let analytic: Vec<f64> = vars
            .iter()
            .zip(&sizes)
            .flat_map(|(&v, &n)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]))
            .collect();
        let numeric = central_diff(eval, &flat, 1e-5);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= 1e-3, "max rel err {err}");
    }

    fn one_bag() -> Bag {
        let encoder = EncoderWeights::seeded(42);
        let plan = make_splits(13, 60).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let cfg = TaskConfig { m_range: (50, 50), ..tiny_task() };
        build_bag(&mut rng, &plan.gen_train_ids, &cfg, &encoder, 0)
    }

    #[test]
    fn base_strategy_and_zero_probability_are_noops() {
        let bag = one_bag();
        let g = tiny_generator();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment_bag(&bag, Strategy::Base, None, 0.1, 1.0, &mut rng).unwrap();
        assert_eq!(out.embeddings, bag.embeddings);
        assert!(out.sequences.iter().all(|s| s.is_none()));
        for strategy in [Strategy::Noise, Strategy::Inst, Strategy::Wsi] {
            let out = augment_bag(&bag, strategy, Some(&g), 0.1, 0.0, &mut rng).unwrap();
            assert_eq!(out.embeddings, bag.embeddings);
        }
    }

    #[test]
    fn wsi_mode_shares_one_sequence_and_inst_mode_varies() {
        let bag = one_bag();
        let g = tiny_generator();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wsi = augment_bag(&bag, Strategy::Wsi, Some(&g), 0.1, 1.0, &mut rng).unwrap();
        let first = wsi.sequences[0].as_ref().unwrap();
        assert!(wsi.sequences.iter().all(|s| s.as_ref().unwrap() == first));
        let inst = augment_bag(&bag, Strategy::Inst, Some(&g), 0.1, 1.0, &mut rng).unwrap();
        let distinct: std::collections::HashSet<String> =
            inst.sequences.iter().map(|s| format!("{:?}", s.as_ref().unwrap())).collect();
        assert!(distinct.len() >= 2, "50 instances drew {} distinct sequences", distinct.len());
        assert!(matches!(
            augment_bag(&bag, Strategy::Wsi, None, 0.1, 1.0, &mut rng),
            Err(MilError::MissingGenerator("wsi"))
        ));
    }

    #[test]
    fn noise_displacement_matches_calibration_target() {
        let d = 128;
        let sigma = 0.05;
        let measured = measure_noise_displacement(sigma, d, 400, 31);
        let expected = sigma * (d as f64).sqrt();
        assert!((measured - expected).abs() / expected < 0.05, "measured {measured}, expected {expected}");
    }

    #[test]
    fn auc_oracle_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(MilError::SingleClass(1))));
    }

    #[test]
    fn balanced_accuracy_weights_classes_equally() {
        // 3 negatives all right, 1 positive wrong: (1.0 + 0.0) / 2.
        assert_eq!(balanced_accuracy(&[0, 0, 0, 0], &[0, 0, 0, 1]), 0.5);
        assert_eq!(balanced_accuracy(&[0, 1], &[0, 1]), 1.0);
    }

    #[test]
    fn train_mil_is_deterministic_and_respects_fraction() {
        let plan = make_splits(17, 60).unwrap();
        let encoder = EncoderWeights::seeded(42);
        let bags = build_fold_bags(&plan, 0, &tiny_task(), &encoder);
        let hyper = MilHyper { max_epochs: 3, patience: 2, ..MilHyper::default() };
        let a = train_mil(&bags, Strategy::Base, None, 0.0, 0.5, &hyper, 7).unwrap();
        let b = train_mil(&bags, Strategy::Base, None, 0.0, 0.5, &hyper, 7).unwrap();
        assert_eq!(a.test_auc, b.test_auc);
        assert_eq!(a.model.params, b.model.params);
        assert!(a.epochs_ran <= 3);
        assert!((0.0..=1.0).contains(&a.test_auc));
    }
}
