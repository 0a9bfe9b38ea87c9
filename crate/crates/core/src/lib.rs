//! Compositional few-shot recognition.
//!
//! A cosine-classifier backbone trained on known classes with two
//! self-supervised tasks (tile-order and rotation prediction), an
//! enlarging-reducing loss that concentrates each class on a few feature
//! channels, and a sparseness penalty on classifier columns. Novel classes
//! are recognised episodically by cosine nearest-prototype matching, and the
//! [`analysis`] module measures how much of that decision rests on the top
//! channels.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod episodic;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
pub mod losses;
pub mod model;
pub mod optim;
pub mod permutations;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use losses::LossWeights;
pub use model::{FeatureOutput, ModelConfig, ModelState};
pub use permutations::PermutationSet;
pub use tensor::Tensor;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
