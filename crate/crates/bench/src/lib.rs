//! Shared fixtures for the benchmarks.

use cmcl::data::{generate, split_train_val, BatchSampler, DomainDataset};
use cmcl::harness::scenarios;
use cmcl::numerics::Tensor;
use cmcl::rng::Rng;
use cmcl::trainer::{init_state, TrainConfig, TrainState};
use cmcl::DomainBatch;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Training splits of the registered spurious-feature scenario.
pub fn spurious_sources(samples_per_domain: usize) -> (TrainConfig, Vec<DomainDataset>) {
    let mut cfg = scenarios::spurious();
    cfg.scenario.samples_per_domain = samples_per_domain;
    let domains = generate(&cfg.scenario).expect("registered scenario is valid");
    let sources = domains[..cfg.scenario.sources()]
        .iter()
        .map(|d| split_train_val(d, cfg.val_fraction, 0).expect("stratifiable").0)
        .collect();
    (cfg.train, sources)
}

/// Initial state plus one batch per domain.
pub fn stage_fixture(samples_per_domain: usize) -> (TrainConfig, TrainState, Vec<DomainBatch>) {
    let (cfg, sources) = spurious_sources(samples_per_domain);
    let (state, mut sampler): (TrainState, BatchSampler) = init_state(&cfg, &sources).expect("valid config");
    let batches = sampler.sample_batches(cfg.batch_size).expect("non-empty domains");
    (cfg, state, batches)
}
