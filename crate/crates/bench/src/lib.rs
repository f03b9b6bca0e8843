//! Fixtures shared by the criterion benches.

use memaudit_core::canary::{synthetic_background, BackgroundSpec};
use memaudit_core::generation::{sample_batch, GeneratedSample, SamplerConfig};
use memaudit_core::ground_truth::Corpus;
use memaudit_core::reference::{train, NgramModel, TrainingConfig};

pub fn corpus(documents: usize) -> Corpus {
    synthetic_background(
        &BackgroundSpec {
            documents,
            ..Default::default()
        },
        1,
    )
    .expect("background spec is valid")
}

pub fn model(corpus: &Corpus, order: usize) -> NgramModel {
    train(&TrainingConfig::new(order, format!("order{order}")), corpus).expect("training succeeds")
}

pub fn samples(model: &NgramModel, count: usize, max_tokens: usize) -> Vec<GeneratedSample> {
    let config = SamplerConfig {
        num_samples: count,
        max_tokens,
        master_seed: 3,
        ..Default::default()
    };
    sample_batch(model, &config, None).expect("sampling succeeds")
}
