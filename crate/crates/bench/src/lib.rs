//! Shared fixtures for the criterion benchmarks: a deterministic generator
//! model plus synthetic embedding batches, so benches measure inference
//! cost and nothing else.

use histaug_core::histaug::{GeneratorConfig, GeneratorModel};
use histaug_core::patchlab::{TransformKind, TransformParam, TransformSequence, TransformStep};
use histaug_core::tensorcore::infer::TrackedBuf;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture_model() -> GeneratorModel {
    GeneratorModel::init(GeneratorConfig::default(), 17).expect("valid default config")
}

pub fn fixture_sequence() -> TransformSequence {
    TransformSequence::new(vec![
        TransformStep::new(TransformKind::Hue, TransformParam::Scalar(0.25)),
        TransformStep::new(TransformKind::Contrast, TransformParam::Scalar(1.3)),
    ])
    .expect("valid sequence")
}

/// `n` rows of unit-scale embeddings, flat row-major.
pub fn fixture_rows_f32(n: usize, d: usize, seed: u64) -> TrackedBuf<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = TrackedBuf::<f32>::zeros(n * d);
    for v in buf.data.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    buf
}

pub fn fixture_rows_f64(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}
