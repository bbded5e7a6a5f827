//! Builds datasets and models from a validated config.

use rtta_core::adaptation::{pretrain_source, run_adaptation, AdaptationOutcome, TrainingData};
use rtta_core::data::{generate_synthetic_with, make_target_domain, split_dataset, Dataset};
use rtta_core::evaluation::{evaluate, EvalReport};
use rtta_core::nn::Checkpoint;
use rtta_core::rng::{derive_seed, stream};
use rtta_core::{Error, Result};

use crate::config::ExperimentConfig;

pub fn source_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    generate_synthetic_with(&cfg.style(), d.classes, d.samples_per_class, d.extent, d.source_seed)
}

/// Clean target-domain pool before corruption: same generator, fresh seed.
pub fn target_pool(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    generate_synthetic_with(&cfg.style(), d.classes, d.samples_per_class, d.extent, d.target_seed)
}

/// The corrupted target domain at the configured severity.
pub fn target_domain(cfg: &ExperimentConfig) -> Result<Dataset> {
    make_target_domain(&target_pool(cfg)?, cfg.corruption.severity, cfg.corruption.seed, cfg.execution())
}

/// Adaptation and eval sets: loaded when both paths are given, otherwise
/// generated and split.
pub fn adapt_eval_sets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    if let (Some(a), Some(e)) = (&cfg.paths.adapt_data, &cfg.paths.eval_data) {
        return Ok((Dataset::load(a)?, Dataset::load(e)?));
    }
    let mut parts = split_dataset(&target_domain(cfg)?, &cfg.split_spec())?.into_iter();
    let adapt = parts.next().ok_or(Error::EmptyDataset)?;
    let eval = parts.next().ok_or(Error::EmptyDataset)?;
    let eval = match &cfg.paths.eval_data {
        Some(p) => Dataset::load(p)?,
        None => eval,
    };
    Ok((adapt, eval))
}

pub fn pretrain(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    pretrain_source(&cfg.model_spec(), &source_dataset(cfg)?, &cfg.pretrain_config(), cfg.seed)
}

/// The configured checkpoint, or a freshly pretrained one (`true`).
pub fn pretrained(cfg: &ExperimentConfig) -> Result<(Checkpoint, bool)> {
    match &cfg.paths.checkpoint {
        Some(p) => Ok((Checkpoint::load(p)?, false)),
        None => Ok((pretrain(cfg)?, true)),
    }
}

pub fn adapt(cfg: &ExperimentConfig, pretrained: &Checkpoint, adapt_set: &Dataset, eval_set: &Dataset) -> Result<AdaptationOutcome> {
    let acfg = cfg.adaptation_config();
    run_adaptation(pretrained, TrainingData::for_method(adapt_set, acfg.method.method), eval_set, &acfg)
}

/// Final scoring with the configured attack; seeded like sweep cells.
pub fn score(cfg: &ExperimentConfig, model: &Checkpoint, eval_set: &Dataset) -> Result<EvalReport> {
    let seed = derive_seed(cfg.seed, stream::EVAL_ATTACK);
    evaluate(model, eval_set, &[cfg.eval_attack()], seed, cfg.execution())
}
