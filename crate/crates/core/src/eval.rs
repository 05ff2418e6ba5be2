//! Controllability evaluation and the downstream-segmenter experiment.

use std::fmt;

use rand::Rng;

use crate::data::{fnv1a, ConditionMap, ConditionedSample, Dataset};
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::metrics;
use crate::par;
use crate::reward::{ConditionKind, Extractor, Segmenter, SegmenterConfig};
use crate::rng::{self, tag};
use crate::schedule::{sample_full, Conditioning, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::HigherBetter => "higher-better",
            Direction::LowerBetter => "lower-better",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub kind: ConditionKind,
    pub metric: &'static str,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub direction: Direction,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "kind,metric,value,n_samples,seed,direction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.12},{},{},{}",
            self.kind.name(),
            self.metric,
            self.value,
            self.n_samples,
            self.seed,
            self.direction
        )
    }

    /// True when `self` is at least as good as `other`.
    pub fn at_least(&self, other: &MetricReport) -> bool {
        match self.direction {
            Direction::HigherBetter => self.value >= other.value,
            Direction::LowerBetter => self.value <= other.value,
        }
    }
}

pub fn metric_for(kind: ConditionKind) -> (&'static str, Direction) {
    match kind {
        ConditionKind::SegMask { .. } => ("miou", Direction::HigherBetter),
        ConditionKind::BinaryEdge => ("f1", Direction::HigherBetter),
        ConditionKind::SoftEdge => ("ssim", Direction::HigherBetter),
        ConditionKind::DepthMap => ("rmse", Direction::LowerBetter),
    }
}

/// Scores one extracted condition against the input condition.
pub fn score(kind: ConditionKind, extracted: &ConditionMap, target: &ConditionMap, height: usize, width: usize) -> Result<f64> {
    score_with(kind, extracted, target, height, width, false)
}

/// Like [`score`]; `edge_tolerance` lets binary edges match within one
/// pixel.
pub fn score_with(
    kind: ConditionKind,
    extracted: &ConditionMap,
    target: &ConditionMap,
    height: usize,
    width: usize,
    edge_tolerance: bool,
) -> Result<f64> {
    let mismatch = || Error::config(format!("condition maps do not fit {}", kind.name()));
    match kind {
        ConditionKind::SegMask { classes } => {
            metrics::miou(extracted.classes().ok_or_else(mismatch)?, target.classes().ok_or_else(mismatch)?, classes)
        }
        ConditionKind::BinaryEdge => {
            let (p, g) = (extracted.dense().ok_or_else(mismatch)?, target.dense().ok_or_else(mismatch)?);
            if edge_tolerance {
                metrics::f1_edge_tolerant(p, g, height, width)
            } else {
                metrics::f1_edge(p, g)
            }
        }
        ConditionKind::SoftEdge => metrics::ssim(
            extracted.dense().ok_or_else(mismatch)?,
            target.dense().ok_or_else(mismatch)?,
            height,
            width,
        ),
        ConditionKind::DepthMap => {
            metrics::rmse(extracted.dense().ok_or_else(mismatch)?, target.dense().ok_or_else(mismatch)?)
        }
    }
}

/// Produces an image for a condition.
pub trait Generator: Sync {
    fn generate(&self, kind: ConditionKind, sample: &ConditionedSample, seed: u64) -> Result<Tensor>;
}

/// Full ancestral sampling from a denoiser.
pub struct DiffusionSampler<'a> {
    pub params: &'a DenoiserParams,
    pub schedule: &'a NoiseSchedule,
}

impl Generator for DiffusionSampler<'_> {
    fn generate(&self, kind: ConditionKind, sample: &ConditionedSample, seed: u64) -> Result<Tensor> {
        let cond = Conditioning {
            hint: sample.hint(kind),
            caption: sample.caption as usize,
        };
        sample_full(self.params, &cond, sample.image.shape(), self.schedule, seed)
    }
}

/// Returns the ground-truth image.
pub struct Replay;

impl Generator for Replay {
    fn generate(&self, _: ConditionKind, sample: &ConditionedSample, _: u64) -> Result<Tensor> {
        Ok(sample.image.clone())
    }
}

/// Sampling seed for a sample, derived from its content so the result does
/// not depend on where the sample sits in the dataset.
pub fn sample_seed(sample: &ConditionedSample, seed: u64) -> u64 {
    let mut bytes: Vec<u8> = sample.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    bytes.extend_from_slice(&sample.caption.to_le_bytes());
    rng::stream(seed, &[tag::EVAL, fnv1a(&bytes)]).random()
}

/// Generates one image per sample for the first `n` samples.
pub fn generate_set(gen: &dyn Generator, data: &Dataset, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    if n > data.len() {
        return Err(Error::config(format!("asked for {n} evaluation samples, dataset has {}", data.len())));
    }
    par::try_map(n, |i| {
        let s = &data.samples[i];
        gen.generate(data.kind, s, sample_seed(s, seed))
    })
}

/// Mean score of hard extractions from `images` against the conditions of
/// the matching samples. Scores are summed in sorted order, so the mean is
/// independent of sample order.
pub fn score_images(extractor: &Extractor, data: &Dataset, images: &[Tensor], seed: u64) -> Result<MetricReport> {
    score_images_with(extractor, data, images, seed, false)
}

pub fn score_images_with(
    extractor: &Extractor,
    data: &Dataset,
    images: &[Tensor],
    seed: u64,
    edge_tolerance: bool,
) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let kind = data.kind;
    if extractor.kind() != kind {
        return Err(Error::config(format!(
            "evaluation extractor reads {} but the data carries {}",
            extractor.kind().name(),
            kind.name()
        )));
    }
    let mut scores = par::try_map(images.len(), |i| {
        let extracted = extractor.extract_hard(&images[i])?;
        score_with(kind, &extracted, &data.samples[i].condition, data.height, data.width, edge_tolerance)
    })?;
    scores.sort_by(f64::total_cmp);
    let (mut metric, direction) = metric_for(kind);
    if edge_tolerance && kind == ConditionKind::BinaryEdge {
        metric = "f1-tol1";
    }
    Ok(MetricReport {
        kind,
        metric,
        value: scores.iter().sum::<f64>() / scores.len() as f64,
        n_samples: scores.len(),
        seed,
        direction,
    })
}

/// Generate, re-extract and score the first `n` samples of `data`.
pub fn evaluate_controllability(
    gen: &dyn Generator,
    data: &Dataset,
    extractor: &Extractor,
    n: usize,
    seed: u64,
) -> Result<MetricReport> {
    let images = generate_set(gen, data, n, seed)?;
    score_images(extractor, data, &images, seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DownstreamScore {
    pub accuracy: f64,
    /// Per-class recall averaged over the classes in the ground truth.
    pub mean_class_accuracy: f64,
    pub miou: f64,
}

/// Trains a fresh segmenter on `(images, masks)` and scores it on real
/// held-out data.
pub fn train_downstream_segmenter(
    images: &[Tensor],
    masks: &[&[u8]],
    classes: usize,
    cfg: &SegmenterConfig,
    test: &Dataset,
) -> Result<DownstreamScore> {
    let model = if cfg.iters == 0 {
        Segmenter::init(classes, &cfg.hidden, cfg.seed)
    } else {
        Segmenter::train(images, masks, classes, cfg)?
    };
    score_segmenter(&model, test)
}

pub fn score_segmenter(model: &Segmenter, test: &Dataset) -> Result<DownstreamScore> {
    if test.is_empty() {
        return Err(Error::Empty("downstream test set"));
    }
    let k = model.classes;
    let per = par::try_map(test.len(), |i| {
        let s = &test.samples[i];
        let gt = s.condition.classes().ok_or(Error::Empty("class map"))?;
        let pred = model.predict(&s.image)?;
        let mut hits = vec![0usize; k];
        let mut counts = vec![0usize; k];
        for (&p, &g) in pred.iter().zip(gt) {
            counts[g as usize] += 1;
            hits[g as usize] += (p == g) as usize;
        }
        Ok((hits, counts, metrics::miou(&pred, gt, k)?))
    })?;
    let mut hits = vec![0usize; k];
    let mut counts = vec![0usize; k];
    for (h, c, _) in &per {
        for j in 0..k {
            hits[j] += h[j];
            counts[j] += c[j];
        }
    }
    let present: Vec<usize> = (0..k).filter(|&j| counts[j] > 0).collect();
    Ok(DownstreamScore {
        accuracy: hits.iter().sum::<usize>() as f64 / counts.iter().sum::<usize>() as f64,
        mean_class_accuracy: present.iter().map(|&j| hits[j] as f64 / counts[j] as f64).sum::<f64>()
            / present.len() as f64,
        miou: per.iter().map(|p| p.2).sum::<f64>() / per.len() as f64,
    })
}
