//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wintr_core::autodiff::Tensor;
use wintr_core::dataset::{generate, DomainSet, SyntheticTaskSpec};
use wintr_core::transformer::{ModelConfig, WinTrModel};

pub fn model(config: &ModelConfig) -> WinTrModel {
    WinTrModel::new(config.clone(), &mut ChaCha8Rng::seed_from_u64(7)).expect("valid config")
}

/// Default synthetic task with `n` samples per domain.
pub fn task(n: usize) -> (DomainSet, DomainSet) {
    generate(&SyntheticTaskSpec {
        samples_per_domain: n,
        ..Default::default()
    })
    .expect("valid spec")
}

/// A source batch followed by a target batch, as one training step sees it.
pub fn paired_batch(source: &DomainSet, target: &DomainSet, per_domain: usize) -> Tensor {
    let idx: Vec<usize> = (0..per_domain).collect();
    let mut data = source.batch(&idx).into_data();
    data.extend_from_slice(target.batch(&idx).data());
    Tensor::new(
        vec![2 * per_domain, source.channels, source.height, source.width],
        data,
    )
    .expect("consistent shapes")
}
