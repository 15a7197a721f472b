//! Benchmark fixtures.

use gsaflow_core::data::{generate_dataset, StorySequence};
use gsaflow_core::model::{AdapterSet, Model, ModelConfig};
use gsaflow_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Default-size model with a non-zero consistency adapter, as after stage 1.
pub fn trained_model(seed: u64) -> Model<f32> {
    let mut r = rng(seed);
    let mut m = Model::<f32>::new(ModelConfig::default(), &mut r).expect("default config is valid");
    for t in m.adapters.set_mut(AdapterSet::Consistency).iter_mut() {
        *t = Tensor::randn(t.shape().to_vec(), 0.05, &mut r);
    }
    m
}

pub fn dataset() -> Vec<StorySequence> {
    generate_dataset(8, 8, 0).expect("valid counts")
}
