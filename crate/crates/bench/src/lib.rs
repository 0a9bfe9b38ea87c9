//! Shared fixtures for the benchmarks.

use cfsl::data::{generate_synthetic, Dataset, SynthSpec};
use cfsl::{ModelConfig, ModelState};

/// A reduced dataset that keeps benchmark setup fast.
pub fn bench_dataset() -> Dataset {
    generate_synthetic(&SynthSpec {
        n_known: 8,
        n_novel: 6,
        images_per_class: 20,
        heldout_per_class: 4,
        ..SynthSpec::default()
    })
    .expect("valid bench spec")
}

pub fn bench_model(n_classes: usize) -> ModelState {
    ModelState::init(&ModelConfig { n_classes, ..ModelConfig::default() }).expect("valid bench model")
}
