#![allow(dead_code)]

use rtta_core::adaptation::{pretrain_source, PretrainConfig};
use rtta_core::data::{generate_synthetic, make_target_domain, split_dataset, Dataset, SplitSpec};
use rtta_core::exec::Execution;
use rtta_core::nn::{Checkpoint, ModelSpec};

pub const EXTENT: usize = 8;

pub fn spec() -> ModelSpec {
    ModelSpec::cnn(&[3, 4], 4, &[3, EXTENT, EXTENT])
}

/// A small pretrained model plus adaptation and eval splits at severity 2.
pub fn desk() -> (Checkpoint, Dataset, Dataset) {
    let source = generate_synthetic(4, 24, EXTENT, 10).unwrap();
    let cfg = PretrainConfig {
        epochs: 8,
        ..PretrainConfig::default()
    };
    let model = pretrain_source(&spec(), &source, &cfg, 0).unwrap();
    let pool = generate_synthetic(4, 12, EXTENT, 20).unwrap();
    let target = make_target_domain(&pool, 2, 30, Execution::Sequential).unwrap();
    let mut parts = split_dataset(&target, &SplitSpec::adapt_eval(0.5, 0.5, 0)).unwrap().into_iter();
    (model, parts.next().unwrap(), parts.next().unwrap())
}
