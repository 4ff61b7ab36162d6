//! The conditional generator: a chunked-token cross-attention transformer
//! that maps (embedding, transformation sequence) to the embedding of the
//! transformed patch, trained under a reconstruction + identity loss.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::patchlab::{self, Patch, TransformKind, TransformSequence, ALL_KINDS};
use crate::tensorcore::infer::{self, Real, TrackedBuf};
use crate::tensorcore::{AdamW, Param, Tape, Tensor, TensorError, Var};
use crate::toyencoder::{Embedding, EncoderWeights};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("embedding dim {d} not divisible by chunk count {c}")]
    BadChunking { d: usize, c: usize },
    #[error("chunk width {width} not divisible by head count {heads}")]
    BadHeads { width: usize, heads: usize },
    #[error("sequence length {len} exceeds capacity k_max={k_max}")]
    TooManySteps { len: usize, k_max: usize },
    #[error("embedding dim {got} does not match model dim {expect}")]
    DimMismatch { got: usize, expect: usize },
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Patch(#[from] patchlab::PatchError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub d: usize,
    pub chunks: usize,
    pub blocks: usize,
    pub heads: usize,
    pub k_max: usize,
    pub ffn_mult: usize,
    pub lambda_id: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { d: 128, chunks: 4, blocks: 4, heads: 4, k_max: 4, ffn_mult: 4, lambda_id: 1.0 }
    }
}

impl GeneratorConfig {
    pub fn chunk_width(&self) -> usize {
        self.d / self.chunks
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        if self.d % self.chunks != 0 {
            return Err(GeneratorError::BadChunking { d: self.d, c: self.chunks });
        }
        if self.chunk_width() % self.heads != 0 {
            return Err(GeneratorError::BadHeads { width: self.chunk_width(), heads: self.heads });
        }
        Ok(())
    }
}

/// Split an embedding into C contiguous chunks (no positional encoding).
pub fn chunk_raw(z: &[f64], chunks: usize) -> Result<Vec<Vec<f64>>, GeneratorError> {
    if z.len() % chunks != 0 {
        return Err(GeneratorError::BadChunking { d: z.len(), c: chunks });
    }
    let width = z.len() / chunks;
    Ok(z.chunks(width).map(|c| c.to_vec()).collect())
}

/// Sinusoidal positional encoding for token `pos` of the given width.
pub fn sinusoidal_pe(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|i| {
            let pair = (i / 2) as f64;
            let rate = (pos as f64) / 10000f64.powf(2.0 * pair / width as f64);
            if i % 2 == 0 {
                rate.sin()
            } else {
                rate.cos()
            }
        })
        .collect()
}

/// Chunk an embedding into C tokens with sinusoidal positional encoding
/// added per token index. Concatenating the pre-PE chunks restores z.
pub fn chunk(z: &[f64], chunks: usize) -> Result<Vec<Vec<f64>>, GeneratorError> {
    let mut toks = chunk_raw(z, chunks)?;
    let width = z.len() / chunks;
    for (pos, t) in toks.iter_mut().enumerate() {
        for (v, pe) in t.iter_mut().zip(sinusoidal_pe(pos, width)) {
            *v += pe;
        }
    }
    Ok(toks)
}

/// All learnable generator weights, in a fixed named order that doubles
/// as the serialization manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl GeneratorModel {
    /// Seeded initialization: attention/FFN weights symmetric-uniform by
    /// fan-in, layer-norm gains one, order embeddings zero so untrained
    /// step tokens start as pure parameter projections. All entries are
    /// f32-representable.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self, GeneratorError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dc = config.chunk_width();
        let mut params = Vec::new();
        let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Tensor {
            let limit = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| (rng.gen_range(-limit..limit) as f32) as f64).collect();
            Tensor::new(shape, data)
        };
        for kind in ALL_KINDS {
            let pd = kind.param_dim();
            params.push(Param::new(format!("phi.{}", kind.name()), uniform(vec![pd, dc], pd)));
        }
        params.push(Param::new("order_emb", Tensor::zeros(vec![config.k_max, dc])));
        for j in 0..config.blocks {
            for w in ["wq", "wk", "wv", "wo"] {
                params.push(Param::new(format!("block{j}.attn.{w}"), uniform(vec![dc, dc], dc)));
                params.push(Param::new(format!("block{j}.attn.b{}", &w[1..]), Tensor::zeros(vec![dc])));
            }
            for ln in ["ln1", "ln2"] {
                params.push(Param::new(format!("block{j}.{ln}.gain"), Tensor::new(vec![dc], vec![1.0; dc])));
                params.push(Param::new(format!("block{j}.{ln}.bias"), Tensor::zeros(vec![dc])));
            }
            let fw = dc * config.ffn_mult;
            params.push(Param::new(format!("block{j}.ffn.w1"), uniform(vec![dc, fw], dc)));
            params.push(Param::new(format!("block{j}.ffn.b1"), Tensor::zeros(vec![fw])));
            params.push(Param::new(format!("block{j}.ffn.w2"), uniform(vec![fw, dc], fw)));
            params.push(Param::new(format!("block{j}.ffn.b2"), Tensor::zeros(vec![dc])));
        }
        params.push(Param::new("head.w1", uniform(vec![config.d, 2 * config.d], config.d)));
        params.push(Param::new("head.b1", Tensor::zeros(vec![2 * config.d])));
        params.push(Param::new("head.w2", uniform(vec![2 * config.d, config.d], 2 * config.d)));
        params.push(Param::new("head.b2", Tensor::zeros(vec![config.d])));
        // Gate head: zero-init last layer so the gate starts as exactly one
        // (pure skip) while its first layer already carries gradient signal.
        params.push(Param::new("head.gw1", uniform(vec![config.d, 2 * config.d], config.d)));
        params.push(Param::new("head.gb1", Tensor::zeros(vec![2 * config.d])));
        params.push(Param::new("head.gw2", Tensor::zeros(vec![2 * config.d, config.d])));
        params.push(Param::new("head.gb2", Tensor::zeros(vec![config.d])));

        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(GeneratorModel { config, params, index })
    }

    pub fn from_parts(config: GeneratorConfig, params: Vec<Param>) -> Result<Self, GeneratorError> {
        config.validate()?;
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(GeneratorModel { config, params, index })
    }

    pub fn param(&self, name: &str) -> &Param {
        &self.params[self.index[name]]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            p.quantize_f32();
        }
    }

    /// Single-sample forward pass without a tape, in f64.
    pub fn forward(&self, z: &Embedding, seq: &TransformSequence) -> Result<Embedding, GeneratorError> {
        let infer = InferModel::<f64>::from_model(self);
        infer.forward(&z.values, seq).map(Embedding::new)
    }
}

// ---- tape forward (training / gradient checks) -------------------------

/// Generator parameters registered as requires-grad leaves on a tape.
pub struct TapeModel {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl TapeModel {
    pub fn register(tape: &mut Tape, model: &GeneratorModel) -> Self {
        let vars = model.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
        TapeModel { vars, index: model.index.clone() }
    }

    fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

/// Step-token embedding on the tape: token_k = phi_T(encoded) + order[k].
fn step_tokens_on_tape(
    tape: &mut Tape,
    tm: &TapeModel,
    cfg: &GeneratorConfig,
    seq: &TransformSequence,
) -> Result<Var, GeneratorError> {
    if seq.len() > cfg.k_max {
        return Err(GeneratorError::TooManySteps { len: seq.len(), k_max: cfg.k_max });
    }
    let order = tm.var("order_emb");
    let mut rows = Vec::with_capacity(seq.len());
    for (k, step) in seq.steps.iter().enumerate() {
        let enc = step.encoded();
        let enc_var = tape.constant(Tensor::new(vec![1, enc.len()], enc));
        let phi = tm.var(&format!("phi.{}", step.kind.name()));
        let projected = tape.matmul(enc_var, phi)?;
        let order_row = tape.narrow(order, 0, k, 1)?;
        rows.push(tape.add(projected, order_row)?);
    }
    Ok(tape.concat(&rows, 0)?)
}

/// Full generator forward on the tape. Returns a [1, d] output.
pub fn forward_on_tape(
    tape: &mut Tape,
    tm: &TapeModel,
    cfg: &GeneratorConfig,
    z: &[f64],
    seq: &TransformSequence,
) -> Result<Var, GeneratorError> {
    if z.len() != cfg.d {
        return Err(GeneratorError::DimMismatch { got: z.len(), expect: cfg.d });
    }
    let dc = cfg.chunk_width();
    let toks = chunk(z, cfg.chunks)?;
    let mut tokens = tape.constant(Tensor::new(vec![cfg.chunks, dc], toks.concat()));
    let steps = step_tokens_on_tape(tape, tm, cfg, seq)?;
    let hd = dc / cfg.heads;
    let scale = 1.0 / (hd as f64).sqrt();

    for j in 0..cfg.blocks {
        let name = |s: &str| format!("block{j}.{s}");
        let q_all = {
            let w = tm.var(&name("attn.wq"));
            let b = tm.var(&name("attn.bq"));
            let m = tape.matmul(tokens, w)?;
            tape.add_row(m, b)?
        };
        let k_all = {
            let w = tm.var(&name("attn.wk"));
            let b = tm.var(&name("attn.bk"));
            let m = tape.matmul(steps, w)?;
            tape.add_row(m, b)?
        };
        let v_all = {
            let w = tm.var(&name("attn.wv"));
            let b = tm.var(&name("attn.bv"));
            let m = tape.matmul(steps, w)?;
            tape.add_row(m, b)?
        };
        let mut head_ctx = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.narrow(q_all, 1, h * hd, hd)?;
            let kh = tape.narrow(k_all, 1, h * hd, hd)?;
            let vh = tape.narrow(v_all, 1, h * hd, hd)?;
            let kh_t = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kh_t)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled);
            head_ctx.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat(&head_ctx, 1)?;
        let attn_out = {
            let w = tm.var(&name("attn.wo"));
            let b = tm.var(&name("attn.bo"));
            let m = tape.matmul(ctx, w)?;
            tape.add_row(m, b)?
        };
        // Post-norm: attention, add, norm; FFN, add, norm.
        let res1 = tape.add(tokens, attn_out)?;
        let ln1 = tape.layer_norm(res1, tm.var(&name("ln1.gain")), tm.var(&name("ln1.bias")), 1e-5)?;
        let ffn = {
            let h1 = tape.matmul(ln1, tm.var(&name("ffn.w1")))?;
            let h1 = tape.add_row(h1, tm.var(&name("ffn.b1")))?;
            let h1 = tape.gelu(h1);
            let h2 = tape.matmul(h1, tm.var(&name("ffn.w2")))?;
            tape.add_row(h2, tm.var(&name("ffn.b2")))?
        };
        let res2 = tape.add(ln1, ffn)?;
        tokens = tape.layer_norm(res2, tm.var(&name("ln2.gain")), tm.var(&name("ln2.bias")), 1e-5)?;
    }

    let flat = tape.reshape(tokens, vec![1, cfg.d])?;
    let h1 = tape.matmul(flat, tm.var("head.w1"))?;
    let h1 = tape.add_row(h1, tm.var("head.b1"))?;
    let h1 = tape.gelu(h1);
    let out = tape.matmul(h1, tm.var("head.w2"))?;
    let out = tape.add_row(out, tm.var("head.b2"))?;
    // Gated skip from the input embedding: the blocks' layer norms discard
    // per-chunk scale, so sign- or scale-type transform actions are emitted
    // as a per-dimension multiplier on z (a scale-free decision) while the
    // additive head supplies the remaining delta.
    let g1 = tape.matmul(flat, tm.var("head.gw1"))?;
    let g1 = tape.add_row(g1, tm.var("head.gb1"))?;
    let g1 = tape.gelu(g1);
    let g = tape.matmul(g1, tm.var("head.gw2"))?;
    let g = tape.add_row(g, tm.var("head.gb2"))?;
    let ones = tape.constant(Tensor::new(vec![1, cfg.d], vec![1.0; cfg.d]));
    let gate = tape.add(g, ones)?;
    let z_in = tape.constant(Tensor::new(vec![1, cfg.d], z.to_vec()));
    let gated = tape.mul(gate, z_in)?;
    Ok(tape.add(out, gated)?)
}

/// Two-term objective: reconstruction L2 plus lambda_id times the
/// identity L2 (norms of difference vectors, not squared).
pub fn loss_on_tape(
    tape: &mut Tape,
    tm: &TapeModel,
    cfg: &GeneratorConfig,
    z: &[f64],
    z_bar: &[f64],
    seq: &TransformSequence,
) -> Result<Var, GeneratorError> {
    let recon_out = forward_on_tape(tape, tm, cfg, z, seq)?;
    let target = tape.constant(Tensor::new(vec![1, cfg.d], z_bar.to_vec()));
    let recon_diff = tape.sub(recon_out, target)?;
    let recon = tape.l2_norm(recon_diff);

    let id_seq = seq.identity();
    let id_out = forward_on_tape(tape, tm, cfg, z, &id_seq)?;
    let z_const = tape.constant(Tensor::new(vec![1, cfg.d], z.to_vec()));
    let id_diff = tape.sub(id_out, z_const)?;
    let id_norm = tape.l2_norm(id_diff);
    let id_term = tape.scale(id_norm, cfg.lambda_id);
    Ok(tape.add(recon, id_term)?)
}

/// Convenience wrapper computing the training loss from a raw patch.
pub fn loss_value(
    model: &GeneratorModel,
    patch: &Patch,
    seq: &TransformSequence,
    encoder: &EncoderWeights,
) -> Result<f64, GeneratorError> {
    let z = encoder.encode(patch).expect("valid resolution");
    let transformed = patchlab::apply_sequence(patch, seq)?;
    let z_bar = encoder.encode(&transformed).expect("valid resolution");
    let mut tape = Tape::new();
    let tm = TapeModel::register(&mut tape, model);
    let loss = loss_on_tape(&mut tape, &tm, &model.config, &z.values, &z_bar.values, seq)?;
    Ok(tape.data(loss)[0])
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    pub k_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 1e-4, weight_decay: 1e-5, batch: 64, steps: 3000, k_max: 4 }
    }
}

/// Minibatch training of the generator on the reconstruction + identity
/// loss averaged over the batch. Deterministic given the seed. Patches must come from the
/// generator-training split only.
pub fn train_generator(
    config: GeneratorConfig,
    patches: &[Patch],
    encoder: &EncoderWeights,
    train: &TrainConfig,
    seed: u64,
) -> Result<(GeneratorModel, Vec<f64>), GeneratorError> {
    let mut model = GeneratorModel::init(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = AdamW::new(train.lr, train.weight_decay);
    let mut curve = Vec::with_capacity(train.steps);

    let embeddings: Vec<Vec<f64>> = patches
        .iter()
        .map(|p| encoder.encode(p).expect("valid resolution").values)
        .collect();

    // Finite pool of precomputed (sequence, target) pairs per patch: the
    // image-space transform and encoder run once up front, keeping the
    // step loop purely on the tape.
    const POOL_PER_PATCH: usize = 32;
    let mut pool: Vec<(usize, patchlab::TransformSequence, Vec<f64>)> =
        Vec::with_capacity(patches.len() * POOL_PER_PATCH);
    for (i, patch) in patches.iter().enumerate() {
        for _ in 0..POOL_PER_PATCH {
            let seq = patchlab::sample_sequence(&mut rng, train.k_max);
            let transformed = patchlab::apply_sequence(patch, &seq)?;
            let z_bar = encoder.encode(&transformed).expect("valid resolution");
            pool.push((i, seq, z_bar.values));
        }
    }

    // Short linear warmup stabilizes the first optimizer steps at high
    // rates; a linear decay over the final fifth shrinks the noise floor
    // that a constant rate leaves under the non-squared loss.
    let warmup = (train.steps / 20).max(1);
    let decay_from = train.steps - train.steps / 5;
    for step in 0..train.steps {
        let ramp = ((step + 1) as f64 / warmup as f64).min(1.0);
        let tail = if step >= decay_from {
            (train.steps - step) as f64 / (train.steps - decay_from).max(1) as f64
        } else {
            1.0
        };
        opt.lr = train.lr * ramp * tail;
        let mut tape = Tape::new();
        let tm = TapeModel::register(&mut tape, &model);
        let mut total: Option<Var> = None;
        for _ in 0..train.batch {
            let (i, ref seq, ref z_bar) = pool[rng.gen_range(0..pool.len())];
            let sample = loss_on_tape(&mut tape, &tm, &model.config, &embeddings[i], z_bar, seq)?;
            total = Some(match total {
                None => sample,
                Some(acc) => tape.add(acc, sample)?,
            });
        }
        let mean = tape.scale(total.unwrap(), 1.0 / train.batch as f64);
        let loss = tape.data(mean)[0];
        if !loss.is_finite() {
            return Err(GeneratorError::Diverged { step });
        }
        curve.push(loss);
        tape.backward(mean)?;
        let grads: Vec<Vec<f64>> = tm
            .vars
            .iter()
            .map(|&v| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.data(v).len()]))
            .collect();
        opt.step(&mut model.params, &grads);
    }
    model.quantize_f32();
    Ok((model, curve))
}

// ---- tape-free inference ----------------------------------------------

/// Weights cast to the inference precision, laid out for plain-loop
/// forward passes. No tape is ever allocated on this path.
pub struct InferModel<F> {
    pub config: GeneratorConfig,
    phi: HashMap<TransformKind, Vec<F>>,
    order: Vec<F>,
    blocks: Vec<BlockWeights<F>>,
    head_w1: Vec<F>,
    head_b1: Vec<F>,
    head_w2: Vec<F>,
    head_b2: Vec<F>,
    head_gw1: Vec<F>,
    head_gb1: Vec<F>,
    head_gw2: Vec<F>,
    head_gb2: Vec<F>,
}

struct BlockWeights<F> {
    wq: Vec<F>,
    bq: Vec<F>,
    wk: Vec<F>,
    bk: Vec<F>,
    wv: Vec<F>,
    bv: Vec<F>,
    wo: Vec<F>,
    bo: Vec<F>,
    ln1_gain: Vec<F>,
    ln1_bias: Vec<F>,
    ln2_gain: Vec<F>,
    ln2_bias: Vec<F>,
    ffn_w1: Vec<F>,
    ffn_b1: Vec<F>,
    ffn_w2: Vec<F>,
    ffn_b2: Vec<F>,
}

fn cast<F: Real>(data: &[f64]) -> Vec<F> {
    data.iter().map(|&v| F::from_f64(v)).collect()
}

impl<F: Real> InferModel<F> {
    pub fn from_model(model: &GeneratorModel) -> Self {
        let g = |name: &str| cast::<F>(&model.param(name).value.data);
        let phi = ALL_KINDS
            .iter()
            .map(|&k| (k, g(&format!("phi.{}", k.name()))))
            .collect();
        let blocks = (0..model.config.blocks)
            .map(|j| {
                let n = |s: &str| format!("block{j}.{s}");
                BlockWeights {
                    wq: g(&n("attn.wq")),
                    bq: g(&n("attn.bq")),
                    wk: g(&n("attn.wk")),
                    bk: g(&n("attn.bk")),
                    wv: g(&n("attn.wv")),
                    bv: g(&n("attn.bv")),
                    wo: g(&n("attn.wo")),
                    bo: g(&n("attn.bo")),
                    ln1_gain: g(&n("ln1.gain")),
                    ln1_bias: g(&n("ln1.bias")),
                    ln2_gain: g(&n("ln2.gain")),
                    ln2_bias: g(&n("ln2.bias")),
                    ffn_w1: g(&n("ffn.w1")),
                    ffn_b1: g(&n("ffn.b1")),
                    ffn_w2: g(&n("ffn.w2")),
                    ffn_b2: g(&n("ffn.b2")),
                }
            })
            .collect();
        InferModel {
            config: model.config.clone(),
            phi,
            order: g("order_emb"),
            blocks,
            head_w1: g("head.w1"),
            head_b1: g("head.b1"),
            head_w2: g("head.w2"),
            head_b2: g("head.b2"),
            head_gw1: g("head.gw1"),
            head_gb1: g("head.gb1"),
            head_gw2: g("head.gw2"),
            head_gb2: g("head.gb2"),
        }
    }

    /// Step tokens for a sequence: [K x dc], shared across a batch.
    pub fn step_tokens(&self, seq: &TransformSequence) -> Result<Vec<F>, GeneratorError> {
        let cfg = &self.config;
        if seq.len() > cfg.k_max {
            return Err(GeneratorError::TooManySteps { len: seq.len(), k_max: cfg.k_max });
        }
        let dc = cfg.chunk_width();
        let mut out = vec![F::ZERO; seq.len() * dc];
        for (k, step) in seq.steps.iter().enumerate() {
            let enc = step.encoded();
            let phi = &self.phi[&step.kind];
            let row = &mut out[k * dc..(k + 1) * dc];
            for (i, &e) in enc.iter().enumerate() {
                let ef = F::from_f64(e);
                for (o, &w) in row.iter_mut().zip(&phi[i * dc..(i + 1) * dc]) {
                    *o += ef * w;
                }
            }
            for (o, &e) in row.iter_mut().zip(&self.order[k * dc..(k + 1) * dc]) {
                *o += e;
            }
        }
        Ok(out)
    }

    /// Forward one embedding given precomputed step tokens.
    pub fn forward_with_tokens(&self, z: &[F], step_toks: &[F], k: usize) -> Result<Vec<F>, GeneratorError> {
        let cfg = &self.config;
        if z.len() != cfg.d {
            return Err(GeneratorError::DimMismatch { got: z.len(), expect: cfg.d });
        }
        let dc = cfg.chunk_width();
        let c = cfg.chunks;
        let heads = cfg.heads;
        let hd = dc / heads;
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());
        let eps = F::from_f64(1e-5);

        // Chunk + sinusoidal PE.
        let mut tokens = z.to_vec();
        for pos in 0..c {
            for (i, pe) in sinusoidal_pe(pos, dc).into_iter().enumerate() {
                tokens[pos * dc + i] += F::from_f64(pe);
            }
        }

        let mut q = vec![F::ZERO; c * dc];
        let mut keys = vec![F::ZERO; k * dc];
        let mut vals = vec![F::ZERO; k * dc];
        let mut ctx = vec![F::ZERO; c * dc];
        let mut attn_out = vec![F::ZERO; c * dc];
        let fw = dc * cfg.ffn_mult;
        let mut ffn_h = vec![F::ZERO; c * fw];
        let mut ffn_out = vec![F::ZERO; c * dc];

        for bw in &self.blocks {
            for v in q.iter_mut() {
                *v = F::ZERO;
            }
            infer::matmul(&tokens, &bw.wq, &mut q, c, dc, dc);
            infer::add_row_inplace(&mut q, &bw.bq);
            for v in keys.iter_mut() {
                *v = F::ZERO;
            }
            infer::matmul(step_toks, &bw.wk, &mut keys, k, dc, dc);
            infer::add_row_inplace(&mut keys, &bw.bk);
            for v in vals.iter_mut() {
                *v = F::ZERO;
            }
            infer::matmul(step_toks, &bw.wv, &mut vals, k, dc, dc);
            infer::add_row_inplace(&mut vals, &bw.bv);

            for h in 0..heads {
                let off = h * hd;
                for ci in 0..c {
                    let qrow = &q[ci * dc + off..ci * dc + off + hd];
                    let mut scores: Vec<F> = (0..k)
                        .map(|ki| infer::dot(qrow, &keys[ki * dc + off..ki * dc + off + hd]) * scale)
                        .collect();
                    infer::softmax_row_inplace(&mut scores);
                    let crow = &mut ctx[ci * dc + off..ci * dc + off + hd];
                    for v in crow.iter_mut() {
                        *v = F::ZERO;
                    }
                    for (ki, &a) in scores.iter().enumerate() {
                        for (o, &vv) in crow.iter_mut().zip(&vals[ki * dc + off..ki * dc + off + hd]) {
                            *o += a * vv;
                        }
                    }
                }
            }
            for v in attn_out.iter_mut() {
                *v = F::ZERO;
            }
            infer::matmul(&ctx, &bw.wo, &mut attn_out, c, dc, dc);
            infer::add_row_inplace(&mut attn_out, &bw.bo);

            for (t, &a) in tokens.iter_mut().zip(&attn_out) {
                *t += a;
            }
            for ci in 0..c {
                infer::layer_norm_row_inplace(&mut tokens[ci * dc..(ci + 1) * dc], &bw.ln1_gain, &bw.ln1_bias, eps);
            }
            for v in ffn_h.iter_mut() {
                *v = F::ZERO;
            }
            infer::matmul(&tokens, &bw.ffn_w1, &mut ffn_h, c, dc, fw);
            infer::add_row_inplace(&mut ffn_h, &bw.ffn_b1);
            infer::gelu_inplace(&mut ffn_h);
            for v in ffn_out.iter_mut() {
                *v = F::ZERO;
            }
            infer::matmul(&ffn_h, &bw.ffn_w2, &mut ffn_out, c, fw, dc);
            infer::add_row_inplace(&mut ffn_out, &bw.ffn_b2);
            for (t, &f) in tokens.iter_mut().zip(&ffn_out) {
                *t += f;
            }
            for ci in 0..c {
                infer::layer_norm_row_inplace(&mut tokens[ci * dc..(ci + 1) * dc], &bw.ln2_gain, &bw.ln2_bias, eps);
            }
        }

        // Head MLP on the flattened tokens.
        let mut h1 = vec![F::ZERO; 2 * cfg.d];
        infer::matmul(&tokens, &self.head_w1, &mut h1, 1, cfg.d, 2 * cfg.d);
        for (v, &b) in h1.iter_mut().zip(&self.head_b1) {
            *v += b;
        }
        infer::gelu_inplace(&mut h1);
        let mut out = vec![F::ZERO; cfg.d];
        infer::matmul(&h1, &self.head_w2, &mut out, 1, 2 * cfg.d, cfg.d);
        for (v, &b) in out.iter_mut().zip(&self.head_b2) {
            *v += b;
        }
        // Gated skip from the input embedding, mirroring the tape forward:
        // out += (1 + gate(tokens)) * z elementwise.
        let mut g1 = vec![F::ZERO; 2 * cfg.d];
        infer::matmul(&tokens, &self.head_gw1, &mut g1, 1, cfg.d, 2 * cfg.d);
        for (v, &b) in g1.iter_mut().zip(&self.head_gb1) {
            *v += b;
        }
        infer::gelu_inplace(&mut g1);
        let mut gate = vec![F::ZERO; cfg.d];
        infer::matmul(&g1, &self.head_gw2, &mut gate, 1, 2 * cfg.d, cfg.d);
        for (v, &b) in gate.iter_mut().zip(&self.head_gb2) {
            *v += b;
        }
        let one = F::from_f64(1.0);
        for ((v, &g), &zi) in out.iter_mut().zip(&gate).zip(z) {
            *v += (g + one) * zi;
        }
        Ok(out)
    }

    pub fn forward(&self, z: &[f64], seq: &TransformSequence) -> Result<Vec<f64>, GeneratorError> {
        let toks = self.step_tokens(seq)?;
        let zf = cast::<F>(z);
        let out = self.forward_with_tokens(&zf, &toks, seq.len())?;
        Ok(out.iter().map(|v| v.to_f64()).collect())
    }
}

/// Step tokens for a sequence, one row per step:
/// token_k = phi_T(encoded(alpha_k)) + order_embedding[k].
pub fn embed_steps(model: &GeneratorModel, seq: &TransformSequence) -> Result<Vec<Vec<f64>>, GeneratorError> {
    let infer = InferModel::<f64>::from_model(model);
    let flat = infer.step_tokens(seq)?;
    let dc = model.config.chunk_width();
    Ok(flat.chunks(dc).map(|r| r.to_vec()).collect())
}

/// How a batch of embeddings is conditioned.
pub enum BatchSequences<'a> {
    /// One shared sequence broadcast across every row.
    Shared(&'a TransformSequence),
    /// An independent sequence per row.
    PerRow(&'a [TransformSequence]),
}

/// Single batched inference pass; no tape is allocated. Shared-sequence
/// mode computes the step tokens once and broadcasts them.
pub fn augment_batch(
    model: &GeneratorModel,
    zs: &[Embedding],
    seqs: BatchSequences<'_>,
) -> Result<Vec<Embedding>, GeneratorError> {
    let infer = InferModel::<f64>::from_model(model);
    for z in zs {
        if z.dim() != model.config.d {
            return Err(GeneratorError::DimMismatch { got: z.dim(), expect: model.config.d });
        }
    }
    match seqs {
        BatchSequences::Shared(seq) => {
            let toks = infer.step_tokens(seq)?;
            zs.iter()
                .map(|z| {
                    infer
                        .forward_with_tokens(&z.values, &toks, seq.len())
                        .map(Embedding::new)
                })
                .collect()
        }
        BatchSequences::PerRow(seqs) => {
            assert_eq!(zs.len(), seqs.len(), "one sequence per row");
            zs.iter()
                .zip(seqs)
                .map(|(z, s)| infer.forward(&z.values, s).map(Embedding::new))
                .collect()
        }
    }
}

/// 32-bit single-pass augmentation over a flat row-major batch, with
/// buffer accounting through the deterministic memory gauge. Used by the
/// throughput benchmark.
pub fn augment_batch_f32(
    infer_model: &InferModel<f32>,
    rows: &TrackedBuf<f32>,
    n_rows: usize,
    seq: &TransformSequence,
) -> Result<TrackedBuf<f32>, GeneratorError> {
    let d = infer_model.config.d;
    let toks = infer_model.step_tokens(seq)?;
    let mut out = TrackedBuf::<f32>::zeros(n_rows * d);
    for r in 0..n_rows {
        let row = &rows.data[r * d..(r + 1) * d];
        let y = infer_model.forward_with_tokens(row, &toks, seq.len())?;
        out.data[r * d..(r + 1) * d].copy_from_slice(&y);
    }
    Ok(out)
}
