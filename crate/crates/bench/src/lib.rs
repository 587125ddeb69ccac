//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tam_core::metrics::SegmentationMask;
use tam_core::synth::{generate, QualityTier, SequenceSpec};
use tam_core::{Scalar, Tensor};

pub fn uniform<T: Scalar>(seed: u64, shape: &[usize]) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-1.0..1.0)))
}

pub fn frames<T: Scalar>(seed: u64, t: usize, shape: &[usize]) -> Vec<Tensor<T>> {
    (0..t).map(|i| uniform(seed + i as u64, shape)).collect()
}

/// Ground truth of one synthetic frame and a shifted copy standing in for a prediction.
pub fn mask_pair(extents: &[usize]) -> (SegmentationMask, SegmentationMask) {
    let spec = SequenceSpec {
        seed: 9,
        extents: extents.to_vec(),
        frames: 2,
        ..Default::default()
    }
    .with_tier(QualityTier::Good);
    let seq = generate(&spec).expect("valid spec");
    (seq.masks[0].clone(), seq.masks[1].clone())
}
