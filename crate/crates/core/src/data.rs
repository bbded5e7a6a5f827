//! Seeded synthetic image classification data, target-domain construction,
//! stratified splitting, and the dataset file format.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, BlockKind, Decoder, Encoder};
use crate::corruptions::{corrupt_batch, CorruptionSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Domain {
    Source,
    Target { severity: u8 },
}

/// Labeled images `[N, C, H, W]` in `[0, 1]`.
///
/// Labels are always stored so results can be scored, but unsupervised code
/// paths only ever see an [`UnlabeledView`]. Every call to
/// [`Dataset::labels`] is counted so tests can check that nothing peeked.
#[derive(Debug)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    domain: Domain,
    label_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Self {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            domain: self.domain,
            label_reads: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.inputs == other.inputs
            && self.labels == other.labels
            && self.num_classes == other.num_classes
            && self.domain == other.domain
    }
}

/// Inputs of a dataset with its labels out of reach.
///
/// ```compile_fail
/// # use rtta_core::data::generate_synthetic;
/// let d = generate_synthetic(2, 2, 4, 0).unwrap();
/// let view = d.unlabeled();
/// let _ = view.labels();
/// ```
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a> {
    inputs: &'a Tensor,
}

impl<'a> UnlabeledView<'a> {
    pub fn inputs(&self) -> &'a Tensor {
        self.inputs
    }

    pub fn len(&self) -> usize {
        self.inputs.batch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.inputs.select_rows(indices)
    }
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, domain: Domain) -> Result<Self> {
        if inputs.rank() != 4 {
            return Err(Error::InvalidConfig(format!("dataset inputs must be [N, C, H, W], got {:?}", inputs.shape())));
        }
        if inputs.batch_len() != labels.len() {
            return Err(Error::InvalidConfig(format!(
                "{} inputs but {} labels",
                inputs.batch_len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange { label: bad, num_classes });
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            domain,
            label_reads: AtomicUsize::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        &self.labels
    }

    /// How many times [`Dataset::labels`] has been called on this value.
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// `[C, H, W]` of one sample.
    pub fn image_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView { inputs: &self.inputs }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
            label_reads: AtomicUsize::new(0),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| counts[y] += 1);
        counts
    }

    /// FNV-1a over the raw bytes; used to assert eval-set identity.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.inputs.data().iter().for_each(|v| eat(&v.to_le_bytes()));
        self.labels.iter().for_each(|&y| eat(&(y as u64).to_le_bytes()));
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(BlockKind::Dataset);
        e.usize(self.num_classes);
        match self.domain {
            Domain::Source => {
                e.u8(0);
                e.u8(0);
            }
            Domain::Target { severity } => {
                e.u8(1);
                e.u8(severity);
            }
        }
        e.usizes(&self.labels);
        e.tensor(&self.inputs);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, BlockKind::Dataset)?;
        let num_classes = d.usize()?;
        let domain = match (d.u8()?, d.u8()?) {
            (0, _) => Domain::Source,
            (1, severity) => Domain::Target { severity },
            (t, _) => return Err(Error::Format(format!("unknown domain tag {t}"))),
        };
        let labels = d.usizes()?;
        let inputs = d.tensor()?;
        d.finish()?;
        Self::new(inputs, labels, num_classes, domain).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub const SYNTHETIC_CHANNELS: usize = 3;
pub const MAX_EXTENT: usize = 32;

/// Appearance knobs of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStyle {
    /// Grating amplitude is drawn uniformly from this range per sample.
    pub amplitude: (f64, f64),
    /// Per-pixel texture noise standard deviation.
    pub texture_std: f64,
    /// How strongly each class tints the three channels, in `[0, 1)`.
    pub tint: f64,
    /// Grating cycles across the image.
    pub cycles: f64,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self {
            amplitude: (0.1, 0.18),
            texture_std: 0.1,
            tint: 0.0,
            cycles: 1.5,
        }
    }
}

/// Class template: an oriented sinusoidal grating with a class tint.
struct Template {
    orientation: f64,
    cycles: f64,
    tint: [f64; 3],
}

fn template(k: usize, num_classes: usize, style: &SyntheticStyle) -> Template {
    let hue = 2.0 * PI * k as f64 / num_classes as f64;
    Template {
        orientation: PI * k as f64 / num_classes as f64,
        cycles: style.cycles,
        tint: [0, 1, 2].map(|c| 1.0 - style.tint + style.tint * (hue + 2.0 * PI * c as f64 / 3.0).cos()),
    }
}

/// [`generate_synthetic_with`] in the default style.
pub fn generate_synthetic(num_classes: usize, samples_per_class: usize, extent: usize, seed: u64) -> Result<Dataset> {
    generate_synthetic_with(&SyntheticStyle::default(), num_classes, samples_per_class, extent, seed)
}

/// Class-conditional gratings with random phase, contrast and brightness
/// plus pixel texture noise. Sample `i` has class `i mod num_classes`, so
/// classes are interleaved and exactly balanced.
pub fn generate_synthetic_with(
    style: &SyntheticStyle,
    num_classes: usize,
    samples_per_class: usize,
    extent: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 1 || samples_per_class < 1 {
        return Err(Error::InvalidConfig("synthetic data needs at least one class and one sample per class".into()));
    }
    if !(2..=MAX_EXTENT).contains(&extent) {
        return Err(Error::InvalidConfig(format!("image extent must lie in 2..={MAX_EXTENT}, got {extent}")));
    }
    let (lo, hi) = style.amplitude;
    if !(0.0 <= lo && lo <= hi && hi <= 0.5) || !(style.texture_std >= 0.0) || !(0.0..1.0).contains(&style.tint) || !(style.cycles > 0.0) {
        return Err(Error::InvalidConfig(format!("invalid synthetic style {style:?}")));
    }
    let templates: Vec<Template> = (0..num_classes).map(|k| template(k, num_classes, style)).collect();
    let mut rng = rng_for(seed, 0);
    let texture = Normal::new(0.0, style.texture_std).expect("validated std");
    let n = num_classes * samples_per_class;
    let plane = extent * extent;
    let mut data = Vec::with_capacity(n * SYNTHETIC_CHANNELS * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % num_classes;
        let t = &templates[k];
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let base = rng.random_range(0.4..0.6);
        let (s, c) = t.orientation.sin_cos();
        for tint in t.tint {
            for r in 0..extent {
                for col in 0..extent {
                    let u = (r as f64 * c + col as f64 * s) / extent as f64;
                    let wave = (2.0 * PI * t.cycles * u + phase).sin();
                    let v = base + amp * tint * wave + texture.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(k);
    }
    let inputs = Tensor::new(vec![n, SYNTHETIC_CHANNELS, extent, extent], data)?;
    Dataset::new(inputs, labels, num_classes, Domain::Source)
}

/// Corrupts every image at `severity`; labels carry over unchanged.
pub fn make_target_domain(src: &Dataset, severity: u8, seed: u64, exec: Execution) -> Result<Dataset> {
    let spec = CorruptionSpec::for_severity(severity, seed)?;
    let inputs = corrupt_batch(&src.inputs, &spec, exec)?;
    Ok(Dataset {
        inputs,
        labels: src.labels.clone(),
        num_classes: src.num_classes,
        domain: Domain::Target { severity },
        label_reads: AtomicUsize::new(0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: Vec<f64>,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    /// `[adapt, eval]` plus a discarded remainder when they do not fill the set.
    pub fn adapt_eval(adapt: f64, eval: f64, seed: u64) -> Self {
        let mut fractions = vec![adapt, eval];
        let rest = 1.0 - adapt - eval;
        if rest > 1e-9 {
            fractions.push(rest);
        }
        Self {
            fractions,
            seed,
            stratified: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::InvalidConfig(format!("split fractions must be positive: {:?}", self.fractions)));
        }
        let total: f64 = self.fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Cut points of `n` items at the cumulative fractions.
fn boundaries(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut acc = 0.0;
    let mut cuts = vec![0];
    for (i, f) in fractions.iter().enumerate() {
        acc += f;
        cuts.push(if i + 1 == fractions.len() { n } else { (acc * n as f64).round() as usize });
    }
    cuts
}

/// Disjoint, exhaustive, seed-deterministic split. Each part keeps the
/// original sample order.
pub fn split_dataset(d: &Dataset, spec: &SplitSpec) -> Result<Vec<Dataset>> {
    spec.validate()?;
    let parts = spec.fractions.len();
    let mut rng = rng_for(spec.seed, 0);
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); parts];
    let groups: Vec<Vec<usize>> = if spec.stratified {
        (0..d.num_classes)
            .map(|k| (0..d.len()).filter(|&i| d.labels[i] == k).collect())
            .filter(|g: &Vec<usize>| !g.is_empty())
            .collect()
    } else {
        vec![(0..d.len()).collect()]
    };
    for mut group in groups {
        group.shuffle(&mut rng);
        let cuts = boundaries(group.len(), &spec.fractions);
        for p in 0..parts {
            if spec.stratified && cuts[p + 1] == cuts[p] {
                return Err(Error::InvalidConfig(format!(
                    "split fraction {} leaves a class with no samples",
                    spec.fractions[p]
                )));
            }
            assigned[p].extend_from_slice(&group[cuts[p]..cuts[p + 1]]);
        }
    }
    Ok(assigned
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            d.subset(&idx)
        })
        .collect())
}
