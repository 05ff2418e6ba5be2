//! Pretraining, reward fine-tuning strategies and tape-cost measurement.
//!
//! All strategies share one sampling plan: the timestep of step `i` and the
//! image index and noise of batch slot `j` come from counter-based streams
//! keyed by `(seed, i, j)`. Two runs that differ only in strategy therefore
//! see identical data, which is what makes the gate and `λ = 0` checks
//! bit-exact. Each batch slot runs on its own tape; gradients are summed
//! in slot order.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ConditionedSample, Dataset};
use crate::denoiser::DenoiserParams;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::reward::{self, consistency_loss, RewardSpec};
use crate::rng::{self, tag};
use crate::schedule::{ddpm_step_var, forward_diffuse, predict_x0, Conditioning, NoiseSchedule, ScheduleConfig};
use crate::tape::{Tape, TapeStats};
use crate::tensor::Tensor;

/// Longest sampling chain the full-sampling baseline will record.
pub const MAX_FULL_SAMPLING_STEPS: usize = 10;

const CHAIN: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Strategy {
    /// Diffusion loss plus the gated single-step reward.
    Efficient,
    /// Diffusion loss plus the reward of a `t_sample`-step sampling chain.
    FullSampling { t_sample: usize },
    /// Gated single-step reward alone.
    RewardOnly,
    DiffusionOnly,
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::Efficient => "efficient".into(),
            Strategy::FullSampling { t_sample } => format!("full-sampling-{t_sample}"),
            Strategy::RewardOnly => "reward-only".into(),
            Strategy::DiffusionOnly => "diffusion-only".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub t_thre: usize,
    /// Overrides the reward spec's weight when set.
    pub lambda: Option<f64>,
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            t_thre: 20,
            lambda: None,
            lr: 1e-3,
            batch: 16,
            iters: 2000,
            seed: 0,
            strategy: Strategy::Efficient,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let steps = self.schedule.steps;
        if self.t_thre == 0 || self.t_thre > steps {
            return Err(Error::config(format!("t_thre {} outside 1..={steps}", self.t_thre)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        if let Strategy::FullSampling { t_sample } = self.strategy {
            if t_sample == 0 || t_sample > MAX_FULL_SAMPLING_STEPS {
                return Err(Error::config(format!(
                    "full sampling with {t_sample} steps refused: the recorded tape grows \
                     linearly with the chain, so it is capped at {MAX_FULL_SAMPLING_STEPS} steps"
                )));
            }
            if t_sample > steps {
                return Err(Error::config(format!("t_sample {t_sample} exceeds T = {steps}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iter: usize,
    pub t: usize,
    pub l_train: f64,
    /// Absent when the reward is gated off.
    pub l_reward: Option<f64>,
    pub l_total: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "iter,t,l_train,l_reward,l_total";

    pub fn csv_row(&self) -> String {
        let reward = self.l_reward.map(|v| format!("{v:e}")).unwrap_or_default();
        format!("{},{},{:e},{},{:e}", self.iter, self.t, self.l_train, reward, self.l_total)
    }
}

/// Gradient-tape cost of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct TapeRecord {
    pub strategy: String,
    pub schedule_steps: usize,
    pub sampling_steps: usize,
    pub tape_nodes: usize,
    pub saved_elements: usize,
    pub wall_time: f64,
}

impl TapeRecord {
    pub const CSV_HEADER: &'static str = "strategy,schedule_steps,sampling_steps,tape_nodes,saved_elements,wall_time";

    pub fn csv_row(&self, with_time: bool) -> String {
        let time = if with_time { format!("{:.6}", self.wall_time) } else { String::new() };
        format!(
            "{},{},{},{},{},{}",
            self.strategy, self.schedule_steps, self.sampling_steps, self.tape_nodes, self.saved_elements, time
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: DenoiserParams,
    pub reports: Vec<StepReport>,
    /// Training samples drawn, `batch × iters` on a completed run.
    pub samples_seen: usize,
    /// Tape cost of the first batch slot of the first step.
    pub tape: Option<TapeRecord>,
}

/// Timestep shared by every slot of step `iter`.
pub fn step_timestep(seed: u64, iter: usize, steps: usize) -> usize {
    rng::stream(seed, &[tag::TRAIN_STEP, iter as u64]).random_range(1..=steps)
}

/// Image index and noise for batch slot `slot` of step `iter`.
pub fn slot_draw(seed: u64, iter: usize, slot: usize, n: usize, shape: &[usize]) -> (usize, Tensor) {
    let mut r = rng::stream(seed, &[tag::TRAIN_STEP, iter as u64, slot as u64]);
    let idx = r.random_range(0..n);
    (idx, rng::normal_tensor(shape, &mut r))
}

fn conditioning(data: &Dataset, sample: &ConditionedSample) -> Conditioning {
    Conditioning {
        hint: sample.hint(data.kind),
        caption: sample.caption as usize,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Combined,
    RewardOnly,
    DiffusionOnly,
}

struct SlotOut {
    grads: Vec<Tensor>,
    l_train: f64,
    l_reward: Option<f64>,
    stats: TapeStats,
}

struct Step<'a> {
    params: &'a DenoiserParams,
    data: &'a Dataset,
    spec: Option<&'a RewardSpec>,
    lambda: f64,
    schedule: &'a NoiseSchedule,
    t_thre: usize,
}

impl Step<'_> {
    fn zero_grads(&self) -> Vec<Tensor> {
        self.params
            .trainable_tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect()
    }

    /// Single-step slot: diffusion loss, and the reward on the model's own
    /// `x0` estimate when `t <= t_thre`.
    fn single(&self, mode: Mode, idx: usize, t: usize, eps: Tensor) -> Result<SlotOut> {
        let sample = &self.data.samples[idx];
        let cond = conditioning(self.data, sample);
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x_t = tape.constant(forward_diffuse(&sample.image, t, &eps, self.schedule)?);
        let eps_hat = bound.forward(&tape, &x_t, t, &cond)?;
        let l_train = tape.mse(&eps_hat, &tape.constant(eps))?;
        let spec = self.spec.filter(|_| mode != Mode::DiffusionOnly && t <= self.t_thre);

        let mut l_reward = None;
        let loss = match spec {
            Some(spec) if self.lambda > 0.0 => {
                let x0 = predict_x0(&tape, &x_t, &eps_hat, t, self.schedule)?;
                let c_hat = spec.extractor.apply(&tape, &x0)?;
                let lr = consistency_loss(&tape, spec, &sample.condition, &c_hat)?;
                l_reward = Some(lr.item());
                let weighted = tape.scale(&lr, self.lambda)?;
                match mode {
                    Mode::RewardOnly => Some(weighted),
                    _ => Some(tape.add(&l_train, &weighted)?),
                }
            }
            Some(spec) => {
                // Zero weight: report the reward without touching the graph.
                let side = Tape::new();
                let x0 = predict_x0(
                    &side,
                    &side.constant(x_t.value().clone()),
                    &side.constant(eps_hat.value().clone()),
                    t,
                    self.schedule,
                )?;
                let c_hat = spec.extractor.apply(&side, &x0)?;
                l_reward = Some(consistency_loss(&side, spec, &sample.condition, &c_hat)?.item());
                (mode != Mode::RewardOnly).then(|| l_train.clone())
            }
            None => (mode != Mode::RewardOnly).then(|| l_train.clone()),
        };
        let stats = tape.stats();
        let grads = match loss {
            Some(loss) => {
                let g = tape.backward(&loss)?;
                bound.trainable_vars().iter().map(|v| g.get(v).unwrap().clone()).collect()
            }
            None => self.zero_grads(),
        };
        Ok(SlotOut {
            grads,
            l_train: l_train.item(),
            l_reward,
            stats,
        })
    }

    /// Full-sampling slot: the diffusion loss on its own tape, plus the
    /// reward of an image generated by a recorded `t_sample`-step chain.
    fn full(&self, idx: usize, t: usize, eps: Tensor, t_sample: usize, chain_seed: [u64; 4]) -> Result<SlotOut> {
        let spec = self.spec.ok_or(Error::Empty("reward spec for full sampling"))?;
        let train = self.single(Mode::DiffusionOnly, idx, t, eps)?;
        let sample = &self.data.samples[idx];
        let cond = conditioning(self.data, sample);
        let (respaced, tau) = self.schedule.respaced(t_sample)?;
        let shape = sample.image.shape();

        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let [seed, iter, slot, _] = chain_seed;
        let mut x = tape.constant(rng::normal_tensor(
            shape,
            &mut rng::stream(seed, &[tag::TRAIN_STEP, iter, slot, CHAIN]),
        ));
        for k in (1..=t_sample).rev() {
            let eps_hat = bound.forward(&tape, &x, tau[k - 1], &cond)?;
            let z = if k > 1 {
                rng::normal_tensor(shape, &mut rng::stream(seed, &[tag::TRAIN_STEP, iter, slot, CHAIN, k as u64]))
            } else {
                Tensor::zeros(shape)
            };
            x = ddpm_step_var(&tape, &x, &eps_hat, k, &z, &respaced)?;
        }
        let x0 = tape.clamp(&x, -1.0, 1.0)?;
        let c_hat = spec.extractor.apply(&tape, &x0)?;
        let lr = consistency_loss(&tape, spec, &sample.condition, &c_hat)?;
        let weighted = tape.scale(&lr, self.lambda)?;
        let stats = tape.stats();
        let g = tape.backward(&weighted)?;
        let grads = bound
            .trainable_vars()
            .iter()
            .zip(train.grads)
            .map(|(v, a)| a.zip_map(g.get(v).unwrap(), |x, y| x + y))
            .collect::<Result<Vec<_>>>()?;
        Ok(SlotOut {
            grads,
            l_train: train.l_train,
            l_reward: Some(lr.item()),
            stats,
        })
    }
}

fn effective_lambda(cfg: &TrainConfig, spec: Option<&RewardSpec>) -> f64 {
    cfg.lambda.or(spec.map(|s| s.lambda)).unwrap_or(0.0)
}

fn run(
    mut params: DenoiserParams,
    data: &Dataset,
    spec: Option<&RewardSpec>,
    cfg: &TrainConfig,
    strategy: Strategy,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(spec) = spec {
        if spec.kind != data.kind {
            return Err(Error::config(format!(
                "reward extracts {} but the data carries {}",
                spec.kind.name(),
                data.kind.name()
            )));
        }
    }
    let schedule = cfg.schedule.build()?;
    let steps = schedule.steps();
    let lambda = effective_lambda(cfg, spec);
    let mode = match strategy {
        Strategy::Efficient => Mode::Combined,
        Strategy::RewardOnly => Mode::RewardOnly,
        Strategy::DiffusionOnly | Strategy::FullSampling { .. } => Mode::DiffusionOnly,
    };
    let shape = [1, data.height, data.width];
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        params.trainable_sizes(),
    );
    let mut reports = Vec::with_capacity(cfg.iters);
    let mut tape = None;
    let mut samples_seen = 0;
    let started = Instant::now();
    for iter in 0..cfg.iters {
        let t = step_timestep(cfg.seed, iter, steps);
        let step = Step {
            params: &params,
            data,
            spec,
            lambda,
            schedule: &schedule,
            t_thre: cfg.t_thre,
        };
        let outs = par::try_map(cfg.batch, |j| {
            let (idx, eps) = slot_draw(cfg.seed, iter, j, data.len(), &shape);
            match strategy {
                Strategy::FullSampling { t_sample } => {
                    step.full(idx, t, eps, t_sample, [cfg.seed, iter as u64, j as u64, 0])
                }
                _ => step.single(mode, idx, t, eps),
            }
        })?;
        samples_seen += outs.len();
        if iter == 0 {
            let s = outs[0].stats;
            tape = Some(TapeRecord {
                strategy: strategy.label(),
                schedule_steps: steps,
                sampling_steps: match strategy {
                    Strategy::FullSampling { t_sample } => t_sample,
                    _ => 1,
                },
                tape_nodes: s.nodes,
                saved_elements: s.saved_elements,
                wall_time: 0.0,
            });
        }
        let scale = 1.0 / cfg.batch as f64;
        let l_train = outs.iter().map(|o| o.l_train).sum::<f64>() * scale;
        let l_reward = outs
            .iter()
            .map(|o| o.l_reward)
            .sum::<Option<f64>>()
            .map(|v| v * scale);
        let l_total = match strategy {
            Strategy::RewardOnly => l_reward.map_or(0.0, |r| lambda * r),
            Strategy::DiffusionOnly => l_train,
            _ => l_reward.map_or(l_train, |r| l_train + lambda * r),
        };
        if !l_total.is_finite() || !l_train.is_finite() {
            return Err(Error::Divergence {
                iter,
                value: if l_total.is_finite() { l_train } else { l_total },
            });
        }
        let grads = reward::sum_grads(outs.into_iter().map(|o| o.grads).collect(), scale);
        opt.step(&mut params.trainable_mut(), &grads);
        reports.push(StepReport {
            iter,
            t,
            l_train,
            l_reward,
            l_total,
        });
    }
    if let Some(rec) = tape.as_mut() {
        rec.wall_time = started.elapsed().as_secs_f64() / cfg.iters.max(1) as f64;
    }
    Ok(TrainOutcome {
        params,
        reports,
        samples_seen,
        tape,
    })
}

/// Trains every parameter on the diffusion loss. Returns the parameters
/// and the per-step loss.
pub fn pretrain(params: DenoiserParams, data: &Dataset, cfg: &TrainConfig) -> Result<(DenoiserParams, Vec<f64>)> {
    let out = run(params.unfreeze_base(), data, None, cfg, Strategy::DiffusionOnly)?;
    let curve = out.reports.iter().map(|r| r.l_train).collect();
    Ok((out.params, curve))
}

/// Fine-tunes the control branch with the strategy named in `cfg`.
pub fn finetune(params: DenoiserParams, data: &Dataset, spec: &RewardSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(params.freeze_base(), data, Some(spec), cfg, cfg.strategy)
}

pub fn reward_finetune_efficient(
    params: DenoiserParams,
    data: &Dataset,
    spec: &RewardSpec,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    run(params.freeze_base(), data, Some(spec), cfg, Strategy::Efficient)
}

pub fn reward_finetune_full_sampling(
    params: DenoiserParams,
    data: &Dataset,
    spec: &RewardSpec,
    cfg: &TrainConfig,
    t_sample: usize,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        strategy: Strategy::FullSampling { t_sample },
        ..cfg.clone()
    };
    run(params.freeze_base(), data, Some(spec), &cfg, cfg.strategy)
}

pub fn reward_only(params: DenoiserParams, data: &Dataset, spec: &RewardSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(params.freeze_base(), data, Some(spec), cfg, Strategy::RewardOnly)
}

/// Fine-tunes the control branch on the diffusion loss alone.
pub fn diffusion_finetune(params: DenoiserParams, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(params.freeze_base(), data, None, cfg, Strategy::DiffusionOnly)
}

/// Mean diffusion loss over `n` samples with fixed timesteps and noise.
pub fn validation_loss(params: &DenoiserParams, data: &Dataset, schedule: &NoiseSchedule, n: usize, seed: u64) -> Result<f64> {
    if n == 0 || data.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let shape = [1, data.height, data.width];
    let losses = par::try_map(n, |i| {
        let mut r = rng::stream(seed, &[tag::VALIDATION, i as u64]);
        let sample = &data.samples[i % data.len()];
        let t = r.random_range(1..=schedule.steps());
        let eps = rng::normal_tensor(&shape, &mut r);
        let tape = Tape::new();
        let x_t = tape.constant(forward_diffuse(&sample.image, t, &eps, schedule)?);
        let eps_hat = params.bind_constant(&tape).forward(&tape, &x_t, t, &conditioning(data, sample))?;
        Ok(tape.mse(&eps_hat, &tape.constant(eps))?.item())
    })?;
    Ok(losses.iter().sum::<f64>() / n as f64)
}

/// Tape cost of one slot of one step of `strategy`. The timestep is forced
/// to 1 so the single-step strategies record their reward branch.
pub fn measure_tape(
    params: &DenoiserParams,
    data: &Dataset,
    spec: &RewardSpec,
    strategy: Strategy,
    schedule: &ScheduleConfig,
) -> Result<TapeRecord> {
    let s = schedule.build()?;
    let params = params.clone().freeze_base();
    let step = Step {
        params: &params,
        data,
        spec: Some(spec),
        lambda: spec.lambda.max(f64::MIN_POSITIVE),
        schedule: &s,
        t_thre: s.steps(),
    };
    let shape = [1, data.height, data.width];
    let (idx, eps) = slot_draw(0, 0, 0, data.len(), &shape);
    let started = Instant::now();
    let (out, sampling_steps) = match strategy {
        Strategy::FullSampling { t_sample } => {
            if t_sample == 0 || t_sample > MAX_FULL_SAMPLING_STEPS {
                return Err(Error::config(format!("t_sample {t_sample} outside 1..={MAX_FULL_SAMPLING_STEPS}")));
            }
            (step.full(idx, 1, eps, t_sample, [0; 4])?, t_sample)
        }
        Strategy::Efficient => (step.single(Mode::Combined, idx, 1, eps)?, 1),
        Strategy::RewardOnly => (step.single(Mode::RewardOnly, idx, 1, eps)?, 1),
        Strategy::DiffusionOnly => (step.single(Mode::DiffusionOnly, idx, 1, eps)?, 1),
    };
    Ok(TapeRecord {
        strategy: strategy.label(),
        schedule_steps: s.steps(),
        sampling_steps,
        tape_nodes: out.stats.nodes,
        saved_elements: out.stats.saved_elements,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Nodes recorded by the extractor and loss alone, on a leaf image.
pub fn extractor_nodes(spec: &RewardSpec, sample: &ConditionedSample) -> Result<usize> {
    let tape = Tape::new();
    let img = tape.leaf(sample.image.clone());
    let c_hat = spec.extractor.apply(&tape, &img)?;
    consistency_loss(&tape, spec, &sample.condition, &c_hat)?;
    Ok(tape.stats().nodes)
}

/// Efficient strategy on every schedule, then full sampling for each chain
/// length on the first schedule.
pub fn bench_tape(
    params: &DenoiserParams,
    data: &Dataset,
    spec: &RewardSpec,
    schedules: &[ScheduleConfig],
    t_samples: &[usize],
) -> Result<Vec<TapeRecord>> {
    let mut out = Vec::new();
    for s in schedules {
        out.push(measure_tape(params, data, spec, Strategy::Efficient, s)?);
    }
    let base = schedules.first().ok_or(Error::Empty("bench schedules"))?;
    for &k in t_samples {
        out.push(measure_tape(params, data, spec, Strategy::FullSampling { t_sample: k }, base)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

impl LineFit {
    pub fn at(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }
}

/// Ordinary least squares.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Empty("line fit needs two or more points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DivisionByZero(sxx));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(LineFit { slope, intercept, r2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_fit_recovers_exact_line() {
        let xs: Vec<f64> = (1..=8).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 2.0).collect();
        let f = linear_fit(&xs, &ys).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12 && (f.intercept + 2.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { t_thre: 101, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { t_thre: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        let full = |k| TrainConfig {
            strategy: Strategy::FullSampling { t_sample: k },
            ..ok.clone()
        };
        assert!(full(10).validate().is_ok());
        let err = full(11).validate().unwrap_err().to_string();
        assert!(err.contains("linearly"), "{err}");
    }

    #[test]
    fn timestep_draws_cover_range() {
        let ts: Vec<usize> = (0..2000).map(|i| step_timestep(1, i, 100)).collect();
        assert!(ts.iter().all(|&t| (1..=100).contains(&t)));
        assert!(ts.contains(&1) && ts.contains(&100));
    }
}
