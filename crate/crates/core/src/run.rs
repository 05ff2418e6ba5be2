//! The commands behind the CLI. Each reads its inputs from and writes its
//! artifacts to one output directory.

use std::fs;
use std::path::Path;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_dataset, split, ConditionMap, Dataset, Manifest, Split};
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::eval::{generate_set, score_images_with, DiffusionSampler, MetricReport};
use crate::output::{csv, hstack, pgm, write_atomic};
use crate::reward::{ConditionKind, Extractor, RewardSpec, Segmenter, SegmenterConfig};
use crate::schedule::ScheduleConfig;
use crate::tensor::Tensor;
use crate::train::{self, linear_fit, TapeRecord, StepReport};

pub const MANIFEST: &str = "manifest.txt";
pub const PRETRAIN_CSV: &str = "pretrain_loss.csv";
pub const FINETUNE_CSV: &str = "finetune_steps.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const TAPE_CSV: &str = "tape.csv";
pub const TAPE_FIT_CSV: &str = "tape_fit.csv";
pub const SAMPLE_DIR: &str = "samples";

fn prepare(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    crate::par::set_workers(cfg.workers);
    fs::create_dir_all(out)?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    prepare(cfg, out)?;
    let d = &cfg.data;
    let (data, mut manifest) = generate_dataset(d.n, d.height, d.width, cfg.kind()?, d.classes, cfg.seed)?;
    let sp = split(data.len(), d.split, cfg.seed)?;
    manifest.push("train", sp.train.len());
    manifest.push("val", sp.val.len());
    manifest.push("test", sp.test.len());
    manifest.push("split_hash", format!("{:016x}", Split::hash(&sp.train) ^ Split::hash(&sp.test).rotate_left(1)));
    write_atomic(&out.join(&cfg.paths.data), &data.to_bytes())?;
    write_atomic(&out.join(MANIFEST), manifest.render().as_bytes())?;
    Ok(manifest)
}

/// The dataset and its split. The file must match the configured data.
pub fn load_data(cfg: &RunConfig, out: &Path) -> Result<(Dataset, Split)> {
    let data = Dataset::from_bytes(&Error::read_file(&out.join(&cfg.paths.data))?)?;
    let d = &cfg.data;
    if data.kind != cfg.kind()? || data.height != d.height || data.width != d.width || data.len() != d.n {
        return Err(Error::config(format!(
            "{} holds {} {}x{} samples of {}, the config asks for data.n={} {}x{} of {}",
            cfg.paths.data,
            data.len(),
            data.height,
            data.width,
            data.kind.name(),
            d.n,
            d.height,
            d.width,
            d.kind
        )));
    }
    let sp = split(data.len(), d.split, cfg.seed)?;
    Ok((data, sp))
}

pub fn load_params(cfg: &RunConfig, path: &Path) -> Result<DenoiserParams> {
    DenoiserParams::from_named(cfg.denoiser(), &checkpoint::from_bytes(&Error::read_file(path)?)?)
}

fn save_params(params: &DenoiserParams, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint::to_bytes(&params.to_named()))
}

pub struct PretrainSummary {
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub validation_loss: f64,
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Result<PretrainSummary> {
    prepare(cfg, out)?;
    let (data, sp) = load_data(cfg, out)?;
    let train_set = data.subset(&sp.train);
    let params = DenoiserParams::init(cfg.denoiser(), cfg.init_seed())?;
    let (params, curve) = train::pretrain(params, &train_set, &cfg.pretrain_config())?;
    save_params(&params, &out.join(&cfg.paths.pretrained))?;
    let rows = curve.iter().enumerate().map(|(i, l)| format!("{i},{l:e}"));
    write_atomic(&out.join(PRETRAIN_CSV), csv("iter,loss", rows).as_bytes())?;
    Ok(PretrainSummary {
        first_loss: curve.first().copied(),
        last_loss: curve.last().copied(),
        validation_loss: validation(cfg, &params, &data, &sp)?,
    })
}

fn validation(cfg: &RunConfig, params: &DenoiserParams, data: &Dataset, sp: &Split) -> Result<f64> {
    let held = if sp.val.is_empty() { &sp.test } else { &sp.val };
    let held = data.subset(held);
    train::validation_loss(params, &held, &cfg.schedule.build()?, held.len().max(1), cfg.validation_seed())
}

fn images_and_masks(data: &Dataset) -> Result<(Vec<Tensor>, Vec<&[u8]>)> {
    let images = data.samples.iter().map(|s| s.image.clone()).collect();
    let masks = data
        .samples
        .iter()
        .map(|s| s.condition.classes().ok_or(Error::Empty("class map")))
        .collect::<Result<_>>()?;
    Ok((images, masks))
}

/// The extractor for `kind`. Segmentation trains a segmenter on `train_set`.
pub fn extractor(cfg: &RunConfig, kind: ConditionKind, train_set: &Dataset, seg: &SegmenterConfig) -> Result<Extractor> {
    Ok(match kind {
        ConditionKind::SoftEdge => Extractor::soft_edge(),
        ConditionKind::BinaryEdge => Extractor::binary_edge(cfg.reward.canny_low, cfg.reward.canny_high)?,
        ConditionKind::DepthMap => Extractor::depth(),
        ConditionKind::SegMask { classes } => {
            let (images, masks) = images_and_masks(train_set)?;
            Extractor::Segmentation(Segmenter::train(&images, &masks, classes, seg)?)
        }
    })
}

pub struct FinetuneSummary {
    pub strategy: String,
    pub steps: usize,
    pub validation_loss: f64,
}

pub fn finetune(cfg: &RunConfig, out: &Path) -> Result<FinetuneSummary> {
    prepare(cfg, out)?;
    let (data, sp) = load_data(cfg, out)?;
    let train_set = data.subset(&sp.train);
    let params = load_params(cfg, &out.join(&cfg.paths.pretrained))?;
    let kind = cfg.kind()?;
    let ex = extractor(cfg, kind, &train_set, &cfg.reward_segmenter())?;
    let spec = RewardSpec::new(ex, cfg.reward.lambda.for_kind(kind))?;
    let tc = cfg.finetune_config();
    let outcome = train::finetune(params, &train_set, &spec, &tc)?;
    save_params(&outcome.params, &out.join(&cfg.paths.finetuned))?;
    let rows = outcome.reports.iter().map(StepReport::csv_row);
    write_atomic(&out.join(FINETUNE_CSV), csv(StepReport::CSV_HEADER, rows).as_bytes())?;
    Ok(FinetuneSummary {
        strategy: tc.strategy.label(),
        steps: outcome.reports.len(),
        validation_loss: validation(cfg, &outcome.params, &data, &sp)?,
    })
}

fn eval_n(n: usize, test: &Dataset) -> Result<usize> {
    if n > test.len() {
        return Err(Error::config(format!("asked for {n} samples, the test split has {}", test.len())));
    }
    Ok(n)
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<MetricReport> {
    prepare(cfg, out)?;
    let (data, sp) = load_data(cfg, out)?;
    let test = data.subset(&sp.test);
    let params = load_params(cfg, &out.join(&cfg.eval.checkpoint))?;
    let ex = extractor(cfg, data.kind, &data.subset(&sp.train), &cfg.eval_segmenter())?;
    let schedule = cfg.schedule.build()?;
    let gen = DiffusionSampler {
        params: &params,
        schedule: &schedule,
    };
    let images = generate_set(&gen, &test, eval_n(cfg.eval.n, &test)?, cfg.eval_seed())?;
    let report = score_images_with(&ex, &test, &images, cfg.eval_seed(), cfg.eval.edge_tolerance)?;
    write_atomic(&out.join(EVAL_CSV), csv(MetricReport::CSV_HEADER, [report.csv_row()]).as_bytes())?;
    Ok(report)
}

/// Condition map as values in `[0, 1]`.
fn condition_image(cond: &ConditionMap, kind: ConditionKind) -> Vec<f64> {
    match cond {
        ConditionMap::Classes(c) => {
            let k = (kind.classes().max(2) - 1) as f64;
            c.iter().map(|&v| v as f64 / k).collect()
        }
        ConditionMap::Dense(d) => d.clone(),
    }
}

/// Writes one PGM per sample: input condition, generated image, extracted
/// condition, left to right.
pub fn sample(cfg: &RunConfig, out: &Path) -> Result<usize> {
    prepare(cfg, out)?;
    let (data, sp) = load_data(cfg, out)?;
    let test = data.subset(&sp.test);
    let n = eval_n(cfg.sample.n, &test)?;
    let params = load_params(cfg, &out.join(&cfg.sample.checkpoint))?;
    let ex = extractor(cfg, data.kind, &data.subset(&sp.train), &cfg.eval_segmenter())?;
    let schedule = cfg.schedule.build()?;
    let gen = DiffusionSampler {
        params: &params,
        schedule: &schedule,
    };
    let images = generate_set(&gen, &test, n, cfg.sample_seed())?;
    let dir = out.join(SAMPLE_DIR);
    fs::create_dir_all(&dir)?;
    let (h, w) = (data.height, data.width);
    for (i, img) in images.iter().enumerate() {
        let cond = condition_image(&test.samples[i].condition, data.kind);
        let pixels: Vec<f64> = img.data().iter().map(|v| (v + 1.0) / 2.0).collect();
        let extracted = condition_image(&ex.extract_hard(img)?, data.kind);
        let strip = hstack(&[&cond, &pixels, &extracted], h, w);
        write_atomic(&dir.join(format!("sample_{i:03}.pgm")), &pgm(&strip, h, 3 * w, 0.0, 1.0)?)?;
    }
    Ok(n)
}

pub struct BenchSummary {
    pub records: Vec<TapeRecord>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub ratio: f64,
}

/// Tape cost per strategy. Node counts depend on shapes only, so freshly
/// initialised parameters are used.
pub fn bench_tape(cfg: &RunConfig, out: &Path) -> Result<BenchSummary> {
    prepare(cfg, out)?;
    let (data, sp) = load_data(cfg, out)?;
    let train_set = data.subset(&sp.train);
    let params = DenoiserParams::init(cfg.denoiser(), cfg.init_seed())?;
    let kind = cfg.kind()?;
    let ex = extractor(cfg, kind, &train_set, &cfg.reward_segmenter())?;
    let spec = RewardSpec::new(ex, cfg.reward.lambda.for_kind(kind))?;
    let schedules: Vec<ScheduleConfig> = cfg.bench.schedules.iter().map(|&t| ScheduleConfig::rescaled(t)).collect();
    let records = train::bench_tape(&params, &train_set, &spec, &schedules, &cfg.bench.t_samples)?;
    let full: Vec<&TapeRecord> = records.iter().filter(|r| r.strategy.starts_with("full-sampling")).collect();
    let xs: Vec<f64> = full.iter().map(|r| r.sampling_steps as f64).collect();
    let ys: Vec<f64> = full.iter().map(|r| r.tape_nodes as f64).collect();
    let fit = linear_fit(&xs, &ys)?;
    let ratio = fit.at(cfg.bench.extrapolate_to as f64) / fit.at(1.0);
    let rows = records.iter().map(|r| r.csv_row(false));
    write_atomic(&out.join(TAPE_CSV), csv(TapeRecord::CSV_HEADER, rows).as_bytes())?;
    let fit_row = format!(
        "{:e},{:e},{:.12},{},{:.6}",
        fit.slope, fit.intercept, fit.r2, cfg.bench.extrapolate_to, ratio
    );
    write_atomic(&out.join(TAPE_FIT_CSV), csv("slope,intercept,r2,extrapolate_to,ratio", [fit_row]).as_bytes())?;
    Ok(BenchSummary {
        records,
        slope: fit.slope,
        intercept: fit.intercept,
        r2: fit.r2,
        ratio,
    })
}
