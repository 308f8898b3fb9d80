//! Shared fixtures for the benchmarks.

use iada_core::corpus::{self, GeneratorConfig};
use iada_core::{DocumentPair, Model, ModelConfig};

/// A default-size model and one pair from the default synthetic corpus.
pub fn fixture() -> (Model, DocumentPair) {
    let splits = corpus::generate(&GeneratorConfig::default()).expect("default corpus");
    let pair = splits.train.records[0].pair.clone();
    (Model::new(ModelConfig::default()).expect("default model"), pair)
}
