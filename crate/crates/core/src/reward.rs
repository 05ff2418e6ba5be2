//! Frozen differentiable condition extractors and the consistency loss.
//!
//! Every extractor maps an image in `[-1, 1]` back to a condition. Their
//! parameters are always bound as tape constants, so no training strategy
//! can ever move them.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Named};
use crate::data::ConditionMap;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::par;
use crate::rng::{self, tag};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditionKind {
    SoftEdge,
    BinaryEdge,
    SegMask { classes: usize },
    DepthMap,
}

impl ConditionKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConditionKind::SoftEdge => "soft-edge",
            ConditionKind::BinaryEdge => "binary-edge",
            ConditionKind::SegMask { .. } => "seg-mask",
            ConditionKind::DepthMap => "depth-map",
        }
    }

    /// Parses a kind name; `classes` is only used for `seg-mask`.
    pub fn parse(name: &str, classes: usize) -> Result<Self> {
        let kind = match name {
            "soft-edge" => ConditionKind::SoftEdge,
            "binary-edge" => ConditionKind::BinaryEdge,
            "seg-mask" => ConditionKind::SegMask { classes },
            "depth-map" => ConditionKind::DepthMap,
            other => return Err(Error::config(format!("unknown condition kind `{other}`"))),
        };
        if classes < 2 {
            return Err(Error::config(format!("need K >= 2 classes, got {classes}")));
        }
        Ok(kind)
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            ConditionKind::SoftEdge => 0,
            ConditionKind::BinaryEdge => 1,
            ConditionKind::SegMask { .. } => 2,
            ConditionKind::DepthMap => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8, classes: usize) -> Option<Self> {
        match tag {
            0 => Some(ConditionKind::SoftEdge),
            1 => Some(ConditionKind::BinaryEdge),
            2 if classes >= 2 => Some(ConditionKind::SegMask { classes }),
            3 => Some(ConditionKind::DepthMap),
            _ => None,
        }
    }

    /// Class count for segmentation, 0 otherwise.
    pub fn classes(&self) -> usize {
        match self {
            ConditionKind::SegMask { classes } => *classes,
            _ => 0,
        }
    }

    /// Channels of the condition as fed to the denoiser.
    pub fn hint_channels(&self) -> usize {
        match self {
            ConditionKind::SegMask { classes } => *classes,
            _ => 1,
        }
    }

    pub fn loss_form(&self) -> LossForm {
        match self {
            ConditionKind::SegMask { .. } => LossForm::CrossEntropy,
            _ => LossForm::Mse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossForm {
    Mse,
    CrossEntropy,
}

/// Default reward weights per condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaDefaults {
    pub seg_mask: f64,
    pub depth_map: f64,
    pub soft_edge: f64,
    pub binary_edge: f64,
    /// The thin line-drawing flavour of soft edges.
    pub line_art: f64,
}

impl Default for LambdaDefaults {
    fn default() -> Self {
        Self {
            seg_mask: 0.5,
            depth_map: 0.5,
            soft_edge: 1.0,
            binary_edge: 1.0,
            line_art: 10.0,
        }
    }
}

impl LambdaDefaults {
    pub fn for_kind(&self, kind: ConditionKind) -> f64 {
        match kind {
            ConditionKind::SegMask { .. } => self.seg_mask,
            ConditionKind::DepthMap => self.depth_map,
            ConditionKind::SoftEdge => self.soft_edge,
            ConditionKind::BinaryEdge => self.binary_edge,
        }
    }
}

pub const SOFT_EDGE_GAIN: f64 = 4.0;
pub const CANNY_LOW: f64 = 0.1;
pub const CANNY_HIGH: f64 = 0.2;
pub const DEPTH_SIGMA: f64 = 0.4;
const EDGE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum Extractor {
    /// Blur, Sobel magnitude, then `2·sigmoid(gain·m) − 1`.
    SoftEdge { gain: f64 },
    /// Sobel magnitude through a smoothstep between two thresholds.
    BinaryEdge { low: f64, high: f64 },
    Segmentation(Segmenter),
    /// Gaussian-smoothed luminance.
    Depth { sigma: f64 },
}

impl Extractor {
    pub fn soft_edge() -> Self {
        Extractor::SoftEdge { gain: SOFT_EDGE_GAIN }
    }

    pub fn binary_edge(low: f64, high: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&low) || !(low < high && high <= 1.0) {
            return Err(Error::Domain {
                op: "binary_edge thresholds",
                value: high - low,
            });
        }
        Ok(Extractor::BinaryEdge { low, high })
    }

    pub fn depth() -> Self {
        Extractor::Depth { sigma: DEPTH_SIGMA }
    }

    pub fn kind(&self) -> ConditionKind {
        match self {
            Extractor::SoftEdge { .. } => ConditionKind::SoftEdge,
            Extractor::BinaryEdge { .. } => ConditionKind::BinaryEdge,
            Extractor::Segmentation(s) => ConditionKind::SegMask { classes: s.classes },
            Extractor::Depth { .. } => ConditionKind::DepthMap,
        }
    }

    /// Differentiable extraction from a `1×H×W` image.
    pub fn apply(&self, tape: &Tape, img: &Var) -> Result<Var> {
        match self {
            Extractor::SoftEdge { gain } => extract_soft_edge(tape, img, *gain),
            Extractor::BinaryEdge { low, high } => extract_binary_edge_soft(tape, img, *low, *high),
            Extractor::Segmentation(s) => s.logits(tape, img),
            Extractor::Depth { sigma } => extract_depth(tape, img, *sigma),
        }
    }

    /// Hard condition for evaluation: argmax classes, binarized edges, or
    /// the dense map as is.
    pub fn extract_hard(&self, img: &Tensor) -> Result<ConditionMap> {
        let tape = Tape::new();
        let out = self.apply(&tape, &tape.constant(img.clone()))?.into_value();
        Ok(match self {
            Extractor::Segmentation(s) => ConditionMap::Classes(argmax_channels(&out, s.classes)),
            Extractor::BinaryEdge { .. } => {
                ConditionMap::Dense(out.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect())
            }
            _ => ConditionMap::Dense(out.to_vec()),
        })
    }
}

pub fn argmax_channels(logits: &Tensor, classes: usize) -> Vec<u8> {
    let hw = logits.len() / classes;
    let d = logits.data();
    (0..hw)
        .map(|p| {
            (0..classes)
                .max_by(|&a, &b| d[a * hw + p].total_cmp(&d[b * hw + p]).then(b.cmp(&a)))
                .unwrap() as u8
        })
        .collect()
}

/// Normalized 3×3 Gaussian as a `1×1×3×3` kernel.
pub fn gaussian_kernel(sigma: f64) -> Tensor {
    let w1 = [(-0.5 / (sigma * sigma)).exp(), 1.0, (-0.5 / (sigma * sigma)).exp()];
    let total: f64 = w1.iter().sum::<f64>().powi(2);
    Tensor::from_fn(&[1, 1, 3, 3], |i| w1[i / 3] * w1[i % 3] / total)
}

/// Horizontal and vertical Sobel kernels scaled by 1/4, so a unit step
/// between neighbours has magnitude 1 on both sides of the step.
pub fn sobel_kernel() -> Tensor {
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let data = gx.iter().chain(&gy).map(|v| v / 4.0).collect();
    Tensor::from_parts(vec![2, 1, 3, 3], data)
}

fn check_image(img: &Var) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape("extractor input", s, &[1, 0, 0]));
    }
    Ok(())
}

fn to_unit(tape: &Tape, img: &Var) -> Result<Var> {
    tape.affine(img, 0.5, 0.5)
}

/// Replicate-padded 3×3 convolution.
fn conv_replicate(tape: &Tape, x: &Var, kernel: &Tensor, bias: Option<&Var>) -> Result<Var> {
    let k = tape.constant(kernel.clone());
    let padded = tape.pad_replicate(x)?;
    let y = tape.conv2d3x3(&padded, &k, bias)?;
    tape.crop(&y)
}

fn sobel_magnitude(tape: &Tape, u: &Var) -> Result<Var> {
    let g = conv_replicate(tape, u, &sobel_kernel(), None)?;
    let sq = tape.mul(&g, &g)?;
    let ones = tape.constant(Tensor::full(&[1, 2], 1.0));
    let total = tape.conv1x1(&sq, &ones, None)?;
    let m = tape.sqrt(&tape.affine(&total, 1.0, EDGE_EPS)?)?;
    tape.affine(&m, 1.0, -EDGE_EPS.sqrt())
}

pub fn extract_soft_edge(tape: &Tape, img: &Var, gain: f64) -> Result<Var> {
    check_image(img)?;
    let u = to_unit(tape, img)?;
    let blurred = conv_replicate(tape, &u, &gaussian_kernel(0.5), None)?;
    let m = sobel_magnitude(tape, &blurred)?;
    let s = tape.sigmoid(&tape.scale(&m, gain)?)?;
    tape.affine(&s, 2.0, -1.0)
}

pub fn extract_binary_edge_soft(tape: &Tape, img: &Var, low: f64, high: f64) -> Result<Var> {
    check_image(img)?;
    if !(low < high) {
        return Err(Error::Domain {
            op: "binary_edge thresholds",
            value: high - low,
        });
    }
    let u = to_unit(tape, img)?;
    let m = sobel_magnitude(tape, &u)?;
    let s = tape.affine(&m, 1.0 / (high - low), -low / (high - low))?;
    let s = tape.clamp(&s, 0.0, 1.0)?;
    // smoothstep: s²(3 − 2s)
    let s2 = tape.mul(&s, &s)?;
    tape.mul(&s2, &tape.affine(&s, -2.0, 3.0)?)
}

pub fn extract_depth(tape: &Tape, img: &Var, sigma: f64) -> Result<Var> {
    check_image(img)?;
    let u = to_unit(tape, img)?;
    conv_replicate(tape, &u, &gaussian_kernel(sigma), None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardSpec {
    pub kind: ConditionKind,
    pub loss_form: LossForm,
    pub lambda: f64,
    pub extractor: Extractor,
}

impl RewardSpec {
    pub fn new(extractor: Extractor, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        let kind = extractor.kind();
        Ok(Self {
            kind,
            loss_form: kind.loss_form(),
            lambda,
            extractor,
        })
    }
}

/// `ℒ(c_v, ĉ_v)`: mean squared error for dense maps, per-pixel cross
/// entropy for class maps.
pub fn consistency_loss(tape: &Tape, spec: &RewardSpec, target: &ConditionMap, predicted: &Var) -> Result<Var> {
    match (spec.loss_form, target) {
        (LossForm::CrossEntropy, ConditionMap::Classes(c)) => tape.cross_entropy(predicted, c),
        (LossForm::Mse, ConditionMap::Dense(d)) => {
            let t = Tensor::new(predicted.shape(), d.clone())?;
            tape.mse(predicted, &tape.constant(t))
        }
        _ => Err(Error::config(format!(
            "{:?} loss does not fit this condition map",
            spec.loss_form
        ))),
    }
}

/// Per-pixel convolutional classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    pub classes: usize,
    /// `(kernel C_out×C_in×3×3, bias C_out)` per layer; relu between layers.
    pub layers: Vec<(Tensor, Tensor)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    /// Hidden widths; empty gives a single conv layer.
    pub hidden: Vec<usize>,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Std of Gaussian noise added to training images.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            hidden: vec![8],
            iters: 300,
            batch: 8,
            lr: 0.02,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl Segmenter {
    pub fn init(classes: usize, hidden: &[usize], seed: u64) -> Self {
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(classes);
        let last = widths.len() - 2;
        // The head starts at zero, so an untrained model predicts class 0
        // everywhere.
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mut r = rng::stream(seed, &[tag::PARAM_INIT, 1000 + i as u64]);
                let std = if i == last { 0.0 } else { (2.0 / (9 * w[0]) as f64).sqrt() };
                let k = rng::normal_tensor(&[w[1], w[0], 3, 3], &mut r).map(|v| v * std);
                (k, Tensor::zeros(&[w[1]]))
            })
            .collect();
        Self { classes, layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn forward(&self, tape: &Tape, img: &Var, params: &[(Var, Var)]) -> Result<Var> {
        check_image(img)?;
        let mut h = img.clone();
        for (i, (k, b)) in params.iter().enumerate() {
            h = tape.conv2d3x3(&h, k, Some(b))?;
            if i + 1 < params.len() {
                h = tape.relu(&h)?;
            }
        }
        Ok(h)
    }

    /// Class logits `K×H×W`.
    pub fn logits(&self, tape: &Tape, img: &Var) -> Result<Var> {
        let params: Vec<(Var, Var)> = self
            .layers
            .iter()
            .map(|(k, b)| (tape.constant(k.clone()), tape.constant(b.clone())))
            .collect();
        self.forward(tape, img, &params)
    }

    pub fn predict(&self, img: &Tensor) -> Result<Vec<u8>> {
        let tape = Tape::new();
        let out = self.logits(&tape, &tape.constant(img.clone()))?;
        Ok(argmax_channels(out.value(), self.classes))
    }

    /// Pixel accuracy over a set of images.
    pub fn accuracy(&self, images: &[Tensor], masks: &[&[u8]]) -> Result<f64> {
        let hits = par::try_map(images.len(), |i| {
            let pred = self.predict(&images[i])?;
            Ok(pred.iter().zip(masks[i]).filter(|(a, b)| a == b).count())
        })?;
        let total: usize = masks.iter().map(|m| m.len()).sum();
        Ok(hits.iter().sum::<usize>() as f64 / total as f64)
    }

    pub fn train(images: &[Tensor], masks: &[&[u8]], classes: usize, cfg: &SegmenterConfig) -> Result<Self> {
        if images.is_empty() || images.len() != masks.len() {
            return Err(Error::Empty("segmenter training set"));
        }
        let mut model = Self::init(classes, &cfg.hidden, cfg.seed);
        let mut opt = Adam::new(
            AdamConfig {
                lr: cfg.lr,
                ..Default::default()
            },
            model.layers.iter().flat_map(|(k, b)| [k.len(), b.len()]),
        );
        for iter in 0..cfg.iters {
            let grads = par::try_map(cfg.batch, |j| {
                let mut r = rng::stream(cfg.seed, &[tag::TRAIN_STEP, iter as u64, j as u64]);
                let idx = rand::Rng::random_range(&mut r, 0..images.len());
                let noise = rng::normal_tensor(images[idx].shape(), &mut r);
                let x = images[idx].zip_map(&noise, |a, n| a + cfg.noise_std * n)?;
                let tape = Tape::new();
                let params: Vec<(Var, Var)> = model
                    .layers
                    .iter()
                    .map(|(k, b)| (tape.leaf(k.clone()), tape.leaf(b.clone())))
                    .collect();
                let logits = model.forward(&tape, &tape.constant(x), &params)?;
                let loss = tape.cross_entropy(&logits, masks[idx])?;
                let g = tape.backward(&loss)?;
                Ok(params
                    .iter()
                    .flat_map(|(k, b)| [g.get(k).unwrap().clone(), g.get(b).unwrap().clone()])
                    .collect::<Vec<_>>())
            })?;
            let summed = sum_grads(grads, 1.0 / cfg.batch as f64);
            let mut refs: Vec<&mut Tensor> = model.layers.iter_mut().flat_map(|(k, b)| [k, b]).collect();
            opt.step(&mut refs, &summed);
        }
        Ok(model)
    }

    pub fn to_named(&self) -> Named {
        let mut out = vec![("classes".to_string(), Tensor::scalar(self.classes as f64))];
        for (i, (k, b)) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), k.clone()));
            out.push((format!("layer{i}.bias"), b.clone()));
        }
        out
    }

    pub fn from_named(named: &[(String, Tensor)]) -> Result<Self> {
        let classes = checkpoint::take_tensor(named, "classes", &[])?.item() as usize;
        let mut layers = Vec::new();
        while let Some((_, k)) = named.iter().find(|(n, _)| *n == format!("layer{}.weight", layers.len())) {
            let b = checkpoint::take_tensor(named, &format!("layer{}.bias", layers.len()), &[k.shape()[0]])?;
            layers.push((k.clone(), b));
        }
        if layers.is_empty() || layers.last().unwrap().0.shape()[0] != classes {
            return Err(Error::Format {
                what: "segmenter checkpoint",
                detail: "layers do not end in the class count".into(),
            });
        }
        Ok(Self { classes, layers })
    }
}

/// Sums per-sample gradient lists in index order, then scales.
pub(crate) fn sum_grads(per_sample: Vec<Vec<Tensor>>, scale: f64) -> Vec<Tensor> {
    let mut iter = per_sample.into_iter();
    let Some(first) = iter.next() else { return Vec::new() };
    let mut acc: Vec<Vec<f64>> = first.iter().map(Tensor::to_vec).collect();
    for g in iter {
        for (a, t) in acc.iter_mut().zip(&g) {
            for (x, y) in a.iter_mut().zip(t.data()) {
                *x += y;
            }
        }
    }
    acc.into_iter()
        .zip(first.iter().map(|t| t.shape().to_vec()))
        .map(|(a, shape)| Tensor::from_parts(shape, a.into_iter().map(|v| v * scale).collect()))
        .collect()
}
