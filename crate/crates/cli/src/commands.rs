//! Command implementations. Every command derives its randomness from the
//! single root seed, writes its resolved configuration beside its outputs,
//! and only ever writes under the configured output directory.

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use histaug_core::evalkit::{
    self, bench_csv, bench_svg, default_key_grid, fmt_float, EvalReport, ModelAugmenter,
    RESULTS_HEADER_FP,
};
use histaug_core::histaug::{train_generator, GeneratorConfig, TrainConfig};
use histaug_core::io as hio;
use histaug_core::milbench::{
    self, build_fold_bags, calibrate_noise_sigma, make_splits, patch_class, MilHyper, SplitPlan,
    Strategy, TaskConfig, N_FOLDS,
};
use histaug_core::patchlab::{synth_patch, TransformKind};
use histaug_core::toyencoder::EncoderWeights;
use histaug_core::{GeneratorModel, Patch};

use crate::config::RunConfig;
use crate::error::CliError;

const SPLIT_SALT: u64 = 0x53504c49;
const GEN_SALT: u64 = 0x47454e54;
const MIL_SALT: u64 = 0x4d494c54;
const EVAL_SALT: u64 = 0x4556414c;

fn ensure_out(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn write_resolved(cfg: &RunConfig, command: &str, extra: &[(String, String)]) -> Result<(), CliError> {
    let mut text = cfg.resolved();
    for (k, v) in extra {
        text.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(cfg.out_dir.join(format!("resolved_{command}.cfg")), text)?;
    Ok(())
}

fn encoder_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("encoder.lenc")
}

fn generator_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("generator.haug")
}

fn load_or_create_encoder(cfg: &RunConfig) -> Result<EncoderWeights, CliError> {
    let path = encoder_path(cfg);
    if path.exists() {
        Ok(hio::load_encoder(&path)?)
    } else {
        let e = EncoderWeights::seeded(cfg.encoder_seed);
        hio::save_encoder(&path, &e)?;
        Ok(e)
    }
}

fn require_generator(cfg: &RunConfig) -> Result<GeneratorModel, CliError> {
    let path = generator_path(cfg);
    if !path.exists() {
        return Err(CliError::Dependency(format!(
            "generator weights not found at {} (run train-gen first)",
            path.display()
        )));
    }
    Ok(hio::load_generator(&path)?)
}

fn splits(cfg: &RunConfig) -> Result<SplitPlan, CliError> {
    Ok(make_splits(cfg.seed ^ SPLIT_SALT, cfg.n_patches)?)
}

fn patch_for(id: usize, resolution: usize) -> Patch {
    synth_patch(id as u64, patch_class(id), resolution)
}

fn generator_config(cfg: &RunConfig) -> GeneratorConfig {
    GeneratorConfig {
        d: cfg.d,
        chunks: cfg.chunks,
        blocks: cfg.blocks,
        heads: cfg.heads,
        k_max: cfg.k_max,
        ffn_mult: cfg.ffn_mult,
        lambda_id: cfg.lambda_id,
    }
}

fn task_config(cfg: &RunConfig, resolution: usize) -> TaskConfig {
    TaskConfig {
        n_patches: cfg.n_patches,
        n_train_bags: cfg.n_train_bags,
        n_val_bags: cfg.n_val_bags,
        n_test_bags: cfg.n_test_bags,
        m_range: (cfg.m_min, cfg.m_max),
        threshold: cfg.bag_threshold,
        resolution,
        ..TaskConfig::default()
    }
}

fn holdout_patches(_cfg: &RunConfig, plan: &SplitPlan, n: usize, resolution: usize) -> Vec<Patch> {
    plan.holdout_ids.iter().take(n).map(|&id| patch_for(id, resolution)).collect()
}

pub fn train_gen(cfg: &RunConfig) -> Result<(), CliError> {
    ensure_out(cfg)?;
    let encoder = load_or_create_encoder(cfg)?;
    let plan = splits(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ GEN_SALT);
    let mut ids = plan.gen_train_ids.clone();
    ids.shuffle(&mut rng);
    ids.truncate(cfg.gen_patches);
    let patches: Vec<Patch> = ids.iter().map(|&id| patch_for(id, 32)).collect();

    let train = TrainConfig {
        lr: cfg.gen_lr,
        weight_decay: cfg.gen_wd,
        batch: cfg.gen_batch,
        steps: cfg.gen_steps,
        k_max: cfg.k_max,
    };
    let (model, curve) = train_generator(generator_config(cfg), &patches, &encoder, &train, cfg.seed ^ GEN_SALT)?;
    hio::save_generator(&generator_path(cfg), &model)?;

    let mut csv = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", fmt_float(*l)));
    }
    fs::write(cfg.out_dir.join("loss_curve.csv"), csv)?;
    write_resolved(cfg, "train-gen", &[("train_patches".into(), patches.len().to_string())])?;
    println!(
        "trained generator: {} steps, final loss {}",
        curve.len(),
        curve.last().map(|l| fmt_float(*l)).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn noise_sigma_for(cfg: &RunConfig, plan: &SplitPlan, encoder: &EncoderWeights) -> Result<(f64, bool), CliError> {
    let path = generator_path(cfg);
    if !path.exists() {
        return Ok((cfg.noise_sigma, false));
    }
    let generator = hio::load_generator(&path)?;
    let sample: Vec<_> = plan
        .gen_train_ids
        .iter()
        .take(64)
        .map(|&id| encoder.encode(&patch_for(id, 32)).expect("valid resolution"))
        .collect();
    let sigma = calibrate_noise_sigma(&generator, &sample, cfg.k_max, cfg.seed ^ MIL_SALT)?;
    Ok((sigma, true))
}

pub fn train_mil(cfg: &RunConfig, strategy: Strategy, fraction: f64, resolution: usize) -> Result<(), CliError> {
    ensure_out(cfg)?;
    let encoder = load_or_create_encoder(cfg)?;
    let plan = splits(cfg)?;
    let generator = match strategy {
        Strategy::Inst | Strategy::Wsi => Some(require_generator(cfg)?),
        Strategy::Base | Strategy::Noise => None,
    };
    let (noise_sigma, calibrated) = if strategy == Strategy::Noise {
        noise_sigma_for(cfg, &plan, &encoder)?
    } else {
        (cfg.noise_sigma, false)
    };
    let hyper = MilHyper {
        lr: cfg.mil_lr,
        weight_decay: cfg.mil_wd,
        grad_accum: cfg.grad_accum,
        patience: cfg.patience,
        max_epochs: cfg.max_epochs,
        p_aug: cfg.p_aug,
    };
    let task = task_config(cfg, resolution);
    let fingerprint = cfg.fingerprint();

    let results_path = cfg.out_dir.join("results.csv");
    let mut file = fs::OpenOptions::new().create(true).append(true).open(&results_path)?;
    if file.metadata()?.len() == 0 {
        writeln!(file, "{RESULTS_HEADER_FP}")?;
    }
    for fold in 0..N_FOLDS {
        let bags = build_fold_bags(&plan, fold, &task, &encoder);
        let start = Instant::now();
        let outcome = milbench::train_mil(
            &bags,
            strategy,
            generator.as_ref(),
            noise_sigma,
            fraction,
            &hyper,
            cfg.seed ^ MIL_SALT ^ (fold as u64) << 8,
        )?;
        let wall = start.elapsed().as_secs_f64();
        writeln!(
            file,
            "{fold},{},{fraction},{resolution},{},{},{},{},{fingerprint}",
            strategy.name(),
            cfg.seed,
            fmt_float(outcome.test_auc),
            outcome.epochs_ran,
            fmt_float(wall),
        )?;
        println!(
            "fold {fold} {}: auc {:.4} after {} epochs",
            strategy.name(),
            outcome.test_auc,
            outcome.epochs_ran
        );
    }
    let extras = vec![
        ("strategy".to_string(), strategy.name().to_string()),
        ("data_fraction".to_string(), fraction.to_string()),
        ("noise_sigma_effective".to_string(), fmt_float(noise_sigma)),
        ("noise_sigma_calibrated".to_string(), calibrated.to_string()),
    ];
    write_resolved(cfg, &format!("train-mil-{}", strategy.name()), &extras)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalWhich {
    Recon,
    Invariance,
    Retrieval,
    Trajectories,
    CrossRes,
}

fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("metric,value,ci_lo,ci_hi,n,resolution,fingerprint\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.metric,
            fmt_float(r.value),
            fmt_float(r.ci_lo),
            fmt_float(r.ci_hi),
            r.n,
            r.resolution,
            r.fingerprint
        ));
    }
    out
}

pub fn eval(cfg: &RunConfig, which: EvalWhich) -> Result<(), CliError> {
    ensure_out(cfg)?;
    let encoder = load_or_create_encoder(cfg)?;
    let plan = splits(cfg)?;
    let fingerprint = cfg.fingerprint();
    let eval_seed = cfg.seed ^ EVAL_SALT;
    match which {
        EvalWhich::Recon => {
            let generator = require_generator(cfg)?;
            let patches = holdout_patches(cfg, &plan, cfg.eval_patches, cfg.resolution);
            let aug = ModelAugmenter(&generator);
            let recon =
                evalkit::reconstruction_eval(&aug, &encoder, &patches, cfg.k_max, eval_seed, &fingerprint)?;
            let identity =
                evalkit::identity_eval(&aug, &encoder, &patches, cfg.k_max, eval_seed, &fingerprint)?;
            fs::write(cfg.out_dir.join("eval_recon.csv"), report_csv(&[recon.clone(), identity]))?;
            println!("reconstruction cosine {} [{}, {}]", recon.value, recon.ci_lo, recon.ci_hi);
        }
        EvalWhich::Invariance => {
            let patches = holdout_patches(cfg, &plan, cfg.eval_patches, cfg.resolution);
            let report = evalkit::invariance_eval(&encoder, &patches, cfg.k_max, eval_seed, &fingerprint)?;
            fs::write(cfg.out_dir.join("eval_invariance.csv"), report_csv(&[report.clone()]))?;
            println!("encoder invariance cosine {} [{}, {}]", report.value, report.ci_lo, report.ci_hi);
        }
        EvalWhich::Retrieval => {
            let generator = require_generator(cfg)?;
            let patches = holdout_patches(cfg, &plan, 100, cfg.resolution);
            let aug = ModelAugmenter(&generator);
            let grid = default_key_grid();
            let r = evalkit::retrieval_eval(&aug, &encoder, &patches, &grid, &fingerprint)?;
            fs::write(
                cfg.out_dir.join("retrieval.csv"),
                format!(
                    "accuracy,n_keys,n_queries,fingerprint\n{},{},{},{}\n",
                    fmt_float(r.accuracy),
                    r.n_keys,
                    r.n_queries,
                    r.fingerprint
                ),
            )?;
            println!("retrieval top-1 accuracy {} over {} keys", r.accuracy, r.n_keys);
        }
        EvalWhich::Trajectories => {
            let generator = require_generator(cfg)?;
            let aug = ModelAugmenter(&generator);
            let patch = patch_for(plan.holdout_ids[0], cfg.resolution);
            for (kind, name, grid) in [
                (TransformKind::Hue, "hue", grid_points(-0.45, 0.45, 9)),
                (TransformKind::Hed, "hed", grid_points(-0.9, 0.9, 9)),
            ] {
                let t = evalkit::trajectory_export(&aug, &encoder, &patch, kind, &grid)?;
                fs::write(cfg.out_dir.join(format!("trajectory_{name}.svg")), &t.svg)?;
                fs::write(cfg.out_dir.join(format!("trajectory_{name}.csv")), &t.csv)?;
                println!("trajectory {name}: mean paired distance {}", t.mean_paired_distance());
            }
        }
        EvalWhich::CrossRes => {
            let generator = require_generator(cfg)?;
            let patches = holdout_patches(cfg, &plan, cfg.eval_patches, 64);
            let aug = ModelAugmenter(&generator);
            let recon =
                evalkit::reconstruction_eval(&aug, &encoder, &patches, cfg.k_max, eval_seed, &fingerprint)?;
            let inv = evalkit::invariance_eval(&encoder, &patches, cfg.k_max, eval_seed, &fingerprint)?;
            fs::write(cfg.out_dir.join("eval_cross_res.csv"), report_csv(&[recon.clone(), inv.clone()]))?;
            println!("64 px reconstruction {} vs invariance {}", recon.value, inv.value);
        }
    }
    write_resolved(cfg, &format!("eval-{}", which_name(which)), &[])?;
    Ok(())
}

fn which_name(which: EvalWhich) -> &'static str {
    match which {
        EvalWhich::Recon => "recon",
        EvalWhich::Invariance => "invariance",
        EvalWhich::Retrieval => "retrieval",
        EvalWhich::Trajectories => "trajectories",
        EvalWhich::CrossRes => "cross-res",
    }
}

fn grid_points(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

pub fn bench(cfg: &RunConfig, batch_sizes: &[usize]) -> Result<(), CliError> {
    if batch_sizes.is_empty() {
        return Err(CliError::Usage("bench needs at least one batch size".into()));
    }
    if batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Usage(format!("batch sizes must be strictly ascending, got {batch_sizes:?}")));
    }
    ensure_out(cfg)?;
    let generator = require_generator(cfg)?;
    let records = evalkit::bench_throughput(&generator, batch_sizes, cfg.mem_budget, cfg.seed ^ EVAL_SALT)?;
    fs::write(cfg.out_dir.join("bench.csv"), bench_csv(&records))?;
    fs::write(cfg.out_dir.join("bench.svg"), bench_svg(&records))?;
    write_resolved(cfg, "bench", &[("batch_sizes".into(), format!("{batch_sizes:?}"))])?;
    for r in &records {
        println!(
            "batch {}: {:.3} s, {:.0} rows/s, peak {} bytes",
            r.batch, r.wall_seconds, r.rows_per_sec, r.peak_bytes
        );
    }
    if records.len() < batch_sizes.len() {
        return Err(CliError::Numeric(format!(
            "stopped after {} of {} batch sizes: next would exceed the memory budget",
            records.len(),
            batch_sizes.len()
        )));
    }
    Ok(())
}
