//! Temporary diagnostic (not part of the suite): compares reconstruction
//! fidelity on training vs held-out patches for an externally trained model.

use histaug_core::evalkit::{reconstruction_eval, ModelAugmenter};
use histaug_core::io::{load_encoder, load_generator};
use histaug_core::milbench::{make_splits, patch_class};
use histaug_core::patchlab::synth_patch;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[test]
#[ignore]
fn encoder_sign_equivariance() {
    use histaug_core::patchlab::{apply_sequence, TransformKind, TransformParam, TransformSequence, TransformStep};
    use histaug_core::toyencoder::EncoderWeights;
    let enc = EncoderWeights::seeded(42);
    let p = synth_patch(3, 1, 32);
    let z = enc.encode(&p).unwrap();
    for (kind, choice) in [(TransformKind::Flip, 0), (TransformKind::Flip, 1), (TransformKind::Rotate, 0), (TransformKind::Rotate, 1)] {
        let seq = TransformSequence::new(vec![TransformStep {
            kind,
            param: TransformParam::Choice(choice),
        }])
        .unwrap();
        let t = apply_sequence(&p, &seq).unwrap();
        let zb = enc.encode(&t).unwrap();
        let ratios: Vec<f64> = (0..4)
            .map(|blk| {
                let i = blk * 32;
                zb.values[i..i + 32]
                    .iter()
                    .zip(&z.values[i..i + 32])
                    .map(|(a, b)| a / b)
                    .sum::<f64>()
                    / 32.0
            })
            .collect();
        eprintln!("{:?} choice {choice}: block sign ratios {:?}", kind, ratios.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
    }
}

#[test]
#[ignore]
fn key_gram_matrix() {
    use histaug_core::evalkit::default_key_grid;
    use histaug_core::patchlab::{apply_sequence, TransformSequence};
    use histaug_core::tensorcore::infer::cosine;
    use histaug_core::toyencoder::EncoderWeights;
    let enc = EncoderWeights::seeded(7);
    let grid = default_key_grid();
    let n = grid.len();
    let mut gram = vec![0.0f64; n * n];
    let plan = make_splits(7 ^ 0x53504c49, 2000).unwrap();
    for &id in &plan.holdout_ids[..50] {
        let p = synth_patch(id as u64, patch_class(id), 32);
        let keys: Vec<_> = grid
            .iter()
            .map(|s| {
                let seq = TransformSequence::new(vec![s.clone()]).unwrap();
                enc.encode(&apply_sequence(&p, &seq).unwrap()).unwrap()
            })
            .collect();
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] += cosine(&keys[i].values, &keys[j].values) / 50.0;
            }
        }
    }
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{:.3}", gram[i * n + j])).collect();
        eprintln!("key {i:2}: {}", row.join(" "));
    }
}

#[test]
#[ignore]
fn retrieval_confusion() {
    use histaug_core::evalkit::default_key_grid;
    use histaug_core::patchlab::{apply_sequence, TransformSequence};
    use histaug_core::tensorcore::infer::cosine;
    let dir = std::env::var("SCRATCH_DIR").unwrap();
    let enc = load_encoder(Path::new(&format!("{dir}/encoder.lenc"))).unwrap();
    let model = load_generator(Path::new(&format!("{dir}/generator.haug"))).unwrap();
    let aug = ModelAugmenter(&model);
    use histaug_core::evalkit::Augmenter;
    let plan = make_splits(7 ^ 0x53504c49, 2000).unwrap();
    let grid = default_key_grid();
    let n = grid.len();
    let mut conf = vec![0usize; n * n];
    for &id in &plan.holdout_ids[..100] {
        let p = synth_patch(id as u64, patch_class(id), 32);
        let z = enc.encode(&p).unwrap();
        let keys: Vec<_> = grid
            .iter()
            .map(|s| {
                let seq = TransformSequence::new(vec![s.clone()]).unwrap();
                enc.encode(&apply_sequence(&p, &seq).unwrap()).unwrap()
            })
            .collect();
        for (qi, s) in grid.iter().enumerate() {
            let seq = TransformSequence::new(vec![s.clone()]).unwrap();
            let q = aug.augment(&p, &z, &seq);
            let best = keys
                .iter()
                .enumerate()
                .map(|(i, k)| (i, cosine(&q.values, &k.values)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            conf[qi * n + best] += 1;
        }
    }
    for qi in 0..n {
        let row: Vec<String> = (0..n).map(|i| format!("{:3}", conf[qi * n + i])).collect();
        eprintln!("key {qi:2}: {}", row.join(" "));
    }
}

#[test]
#[ignore]
fn train_vs_holdout_recon() {
    let dir = std::env::var("SCRATCH_DIR").unwrap();
    let enc = load_encoder(Path::new(&format!("{dir}/encoder.lenc"))).unwrap();
    let model = load_generator(Path::new(&format!("{dir}/generator.haug"))).unwrap();
    let plan = make_splits(7 ^ 0x53504c49, 2000).unwrap();
    let mut ids = plan.gen_train_ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(7 ^ 0x47454e54);
    ids.shuffle(&mut rng);
    ids.truncate(512);
    let train: Vec<_> = ids[..100]
        .iter()
        .map(|&id| synth_patch(id as u64, patch_class(id), 32))
        .collect();
    let held: Vec<_> = plan.holdout_ids[..100]
        .iter()
        .map(|&id| synth_patch(id as u64, patch_class(id), 32))
        .collect();
    let aug = ModelAugmenter(&model);
    let r_train = reconstruction_eval(&aug, &enc, &train, 4, 99, "x").unwrap();
    let r_held = reconstruction_eval(&aug, &enc, &held, 4, 99, "x").unwrap();
    eprintln!("train recon {} held recon {}", r_train.value, r_held.value);

    // Mean squared reconstruction error on held-out fresh sequences, to compare
    // with the final training loss (pool sequences).
    use histaug_core::evalkit::Augmenter;
    use histaug_core::patchlab::{apply_sequence, sample_sequence};
    let mut rng2 = ChaCha8Rng::seed_from_u64(99);
    let mut mse = 0.0;
    let mut znorm = 0.0;
    for p in &held {
        let z = enc.encode(p).unwrap();
        let seq = sample_sequence(&mut rng2, 4);
        let truth = apply_sequence(p, &seq).unwrap();
        let z_bar = enc.encode(&truth).unwrap();
        let zh = aug.augment(p, &z, &seq);
        mse += zh
            .values
            .iter()
            .zip(&z_bar.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        znorm += z_bar.values.iter().map(|v| v * v).sum::<f64>();
    }
    eprintln!(
        "held-out recon MSE {} mean ||z||^2 {}",
        mse / held.len() as f64,
        znorm / held.len() as f64
    );

    // Per-kind single-step reconstruction vs invariance.
    use histaug_core::patchlab::{TransformSequence, ALL_KINDS};
    for kind in ALL_KINDS {
        let mut rc = 0.0;
        let mut inv = 0.0;
        let mut n = 0.0;
        let mut rng3 = ChaCha8Rng::seed_from_u64(5);
        for p in &held {
            let step = histaug_core::patchlab::sample_step(&mut rng3, kind);
            let seq = TransformSequence::new(vec![step]).unwrap();
            let z = enc.encode(p).unwrap();
            let truth = apply_sequence(p, &seq).unwrap();
            let z_bar = enc.encode(&truth).unwrap();
            rc += aug.augment(p, &z, &seq).cosine(&z_bar);
            inv += z.cosine(&z_bar);
            n += 1.0;
        }
        eprintln!("kind {:12} recon {:.4} inv {:.4}", kind.name(), rc / n, inv / n);
    }
}
