//! Shared fixtures for the benchmarks in `benches/`.

use jepalab::model::ModelConfig;
use jepalab::objective::{ObjectiveConfig, Variant};
use jepalab::synth::{gen_motion_dataset, VideoClip};
use jepalab::train::TrainState;
use jepalab::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn clips(n_per_class: usize) -> Vec<VideoClip> {
    gen_motion_dataset(n_per_class, 1).expect("motion clips").clips
}

pub fn state(variant: Variant) -> TrainState {
    TrainState::new(ModelConfig::default(), ObjectiveConfig::for_variant(variant), 0.04, 2).expect("train state")
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}
