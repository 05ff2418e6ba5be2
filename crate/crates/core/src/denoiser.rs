//! Conditional noise predictor with a frozen trunk and a zero-gated
//! control branch.
//!
//! The trunk is three 3×3 conv blocks plus an output conv: full
//! resolution, half resolution after average pooling, then back up with a
//! skip from the first block. Each block is shifted per channel by
//! projections of the timestep and caption embeddings. The control branch
//! reads the noisy image and the condition, mirrors the first two blocks,
//! and enters the trunk's second block through a 1×1 projection that
//! starts at exactly zero.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Named};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::schedule::{Conditioning, NoisePredictor};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TIME_DIM: usize = 16;
pub const CAPTION_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    /// Channel widths of the three trunk blocks. The first and last must
    /// match for the skip connection.
    pub widths: [usize; 3],
    pub hint_channels: usize,
    pub vocab: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            widths: [16, 32, 16],
            hint_channels: 1,
            vocab: crate::data::CAPTION_VOCAB,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let [w1, w2, w3] = self.widths;
        if w1 == 0 || w2 == 0 || w3 != w1 {
            return Err(Error::config(format!(
                "denoiser widths {:?}: need nonzero widths with first == last",
                self.widths
            )));
        }
        if self.hint_channels == 0 || self.vocab == 0 {
            return Err(Error::config("hint channels and vocabulary must be nonzero"));
        }
        Ok(())
    }

    /// Parameter names and shapes in checkpoint order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let [w1, w2, w3] = self.widths;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut conv = |name: &str, c_out: usize, c_in: usize, bias: bool| {
            out.push((format!("{name}.weight"), vec![c_out, c_in, 3, 3]));
            if bias {
                out.push((format!("{name}.bias"), vec![c_out]));
            }
        };
        conv("base.conv1", w1, 1, true);
        conv("base.conv2", w2, w1, true);
        conv("base.conv3", w3, w2, true);
        conv("base.out", 1, w3, true);
        conv("control.conv_x", w1, 1, true);
        conv("control.conv_hint", w1, self.hint_channels, false);
        conv("control.conv2", w2, w1, true);
        for (name, w) in [
            ("base.block1", w1),
            ("base.block2", w2),
            ("base.block3", w3),
            ("control.block1", w1),
            ("control.block2", w2),
        ] {
            out.push((format!("{name}.time"), vec![w, TIME_DIM]));
            out.push((format!("{name}.caption"), vec![w, CAPTION_DIM]));
        }
        out.push(("base.caption_table".into(), vec![CAPTION_DIM, self.vocab]));
        out.push(("zero_proj.weight".into(), vec![w2, w2]));
        out.push(("zero_proj.bias".into(), vec![w2]));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Base,
    Control,
    ZeroProj,
}

fn part_of(name: &str) -> Part {
    if name.starts_with("base.") {
        Part::Base
    } else if name.starts_with("zero_proj.") {
        Part::ZeroProj
    } else {
        Part::Control
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    base_frozen: bool,
}

/// Sinusoidal embedding of a timestep as a `TIME_DIM×1` column.
pub fn timestep_embedding(t: usize) -> Tensor {
    let half = TIME_DIM / 2;
    Tensor::from_fn(&[TIME_DIM, 1], |i| {
        let freq = 10_000f64.powf(-((i % half) as f64) / half as f64);
        let angle = t as f64 * freq;
        if i < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl DenoiserParams {
    /// Random trunk and control weights; the zero projection is zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .enumerate()
            .map(|(i, (name, shape))| {
                let mut r = rng::stream(seed, &[tag::PARAM_INIT, i as u64]);
                let t = if name.starts_with("zero_proj.") || name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else if name == "base.caption_table" {
                    rng::normal_tensor(&shape, &mut r)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name == "base.out.weight" { 0.5 } else { 2.0 };
                    let std = (gain / fan_in as f64).sqrt();
                    rng::normal_tensor(&shape, &mut r).map(|v| v * std)
                };
                (name, t)
            })
            .collect();
        Ok(Self::from_tensors(config, tensors, false))
    }

    fn from_tensors(config: DenoiserConfig, tensors: Vec<(String, Tensor)>, base_frozen: bool) -> Self {
        let index = tensors.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Self {
            config,
            tensors,
            index,
            base_frozen,
        }
    }

    /// Marks the trunk as constant; only the control branch and the zero
    /// projection stay trainable.
    pub fn freeze_base(mut self) -> Self {
        self.base_frozen = true;
        self
    }

    pub fn unfreeze_base(mut self) -> Self {
        self.base_frozen = false;
        self
    }

    pub fn is_base_frozen(&self) -> bool {
        self.base_frozen
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn part_tensors(&self, part: Part) -> Vec<(&str, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| part_of(n) == part)
            .map(|(n, t)| (n.as_str(), t))
            .collect()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !(self.base_frozen && part_of(name) == Part::Base)
    }

    /// Indices of the trainable tensors, in checkpoint order.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.tensors.len())
            .filter(|&i| self.is_trainable(&self.tensors[i].0))
            .collect()
    }

    pub fn trainable_tensors(&self) -> Vec<&Tensor> {
        self.trainable().into_iter().map(|i| &self.tensors[i].1).collect()
    }

    pub fn trainable_sizes(&self) -> Vec<usize> {
        self.trainable().iter().map(|&i| self.tensors[i].1.len()).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let frozen = self.base_frozen;
        self.tensors
            .iter_mut()
            .filter(|(n, _)| !(frozen && part_of(n) == Part::Base))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn to_named(&self) -> Named {
        self.tensors.clone()
    }

    pub fn from_named(config: DenoiserConfig, named: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, shape)| Ok((name.clone(), checkpoint::take_tensor(named, &name, &shape)?)))
            .collect::<Result<Vec<_>>>()?;
        if named.len() != tensors.len() {
            return Err(Error::Format {
                what: "denoiser checkpoint",
                detail: format!("expected {} tensors, found {}", tensors.len(), named.len()),
            });
        }
        Ok(Self::from_tensors(config, tensors, false))
    }

    /// Binds every tensor to `tape`: trainable ones as leaves, the rest
    /// as constants.
    pub fn bind(&self, tape: &Tape) -> Bound<'_> {
        self.bind_with(tape, |name| self.is_trainable(name))
    }

    /// Binds every tensor as a constant.
    pub fn bind_constant(&self, tape: &Tape) -> Bound<'_> {
        self.bind_with(tape, |_| false)
    }

    /// Uses `vars`, in checkpoint order, as the parameters.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound<'_>> {
        if vars.len() != self.tensors.len() {
            return Err(Error::config(format!("expected {} parameter vars, got {}", self.tensors.len(), vars.len())));
        }
        for ((_, t), v) in self.tensors.iter().zip(vars) {
            if t.shape() != v.shape() {
                return Err(Error::shape("bind_vars", t.shape(), v.shape()));
            }
        }
        Ok(Bound {
            params: self,
            vars: vars.to_vec(),
        })
    }

    fn bind_with(&self, tape: &Tape, leaf: impl Fn(&str) -> bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| if leaf(n) { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { params: self, vars }
    }
}

/// Parameters bound to one tape.
pub struct Bound<'a> {
    params: &'a DenoiserParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    fn v(&self, name: &str) -> &Var {
        &self.vars[self.params.index[name]]
    }

    /// Variables of the trainable tensors, in [`DenoiserParams::trainable`]
    /// order.
    pub fn trainable_vars(&self) -> Vec<&Var> {
        self.params.trainable().into_iter().map(|i| &self.vars[i]).collect()
    }

    fn conv(&self, tape: &Tape, name: &str, x: &Var) -> Result<Var> {
        let bias = self.params.index.contains_key(&format!("{name}.bias"));
        let b = bias.then(|| self.v(&format!("{name}.bias")));
        tape.conv2d3x3(x, self.v(&format!("{name}.weight")), b)
    }

    fn block_shift(&self, tape: &Tape, name: &str, temb: &Var, cemb: &Var) -> Result<Var> {
        let a = tape.matmul(self.v(&format!("{name}.time")), temb)?;
        let b = tape.matmul(self.v(&format!("{name}.caption")), cemb)?;
        tape.add(&a, &b)
    }

    /// `eps(x_t, t, c_t, c_v)` for a `1×H×W` input.
    pub fn forward(&self, tape: &Tape, x_t: &Var, t: usize, cond: &Conditioning) -> Result<Var> {
        let cfg = &self.params.config;
        let xs = x_t.shape();
        if xs.len() != 3 || xs[0] != 1 || xs[1] % 2 != 0 || xs[2] % 2 != 0 {
            return Err(Error::shape("denoiser input", xs, &[1, 0, 0]));
        }
        let hs = cond.hint.shape();
        if hs.len() != 3 || hs[0] != cfg.hint_channels || hs[1..] != xs[1..] {
            return Err(Error::shape("denoiser condition", hs, &[cfg.hint_channels, xs[1], xs[2]]));
        }
        if cond.caption >= cfg.vocab {
            return Err(Error::ClassOutOfRange {
                index: cond.caption,
                classes: cfg.vocab,
            });
        }
        let temb = tape.constant(timestep_embedding(t));
        let onehot = Tensor::from_fn(&[cfg.vocab, 1], |i| (i == cond.caption) as u8 as f64);
        let cemb = tape.matmul(self.v("base.caption_table"), &tape.constant(onehot))?;

        let shifted = |name: &str, block: &str, x: &Var| -> Result<Var> {
            let y = self.conv(tape, name, x)?;
            tape.add_channel(&y, &self.block_shift(tape, block, &temb, &cemb)?)
        };

        // control branch
        let hint = tape.constant(cond.hint.clone());
        let gx = self.conv(tape, "control.conv_x", x_t)?;
        let gh = self.conv(tape, "control.conv_hint", &hint)?;
        let g1 = tape.add(&gx, &gh)?;
        let g1 = tape.relu(&tape.add_channel(&g1, &self.block_shift(tape, "control.block1", &temb, &cemb)?)?)?;
        let g2 = tape.relu(&shifted("control.conv2", "control.block2", &tape.avg_pool2(&g1)?)?)?;
        let control = tape.conv1x1(&g2, self.v("zero_proj.weight"), Some(self.v("zero_proj.bias")))?;

        // trunk: full resolution, half resolution, back up with a skip
        let h1 = tape.relu(&shifted("base.conv1", "base.block1", x_t)?)?;
        let h2 = shifted("base.conv2", "base.block2", &tape.avg_pool2(&h1)?)?;
        let h2 = tape.relu(&tape.add(&h2, &control)?)?;
        let h3 = tape.relu(&shifted("base.conv3", "base.block3", &tape.upsample2(&h2)?)?)?;
        let h3 = tape.add(&h3, &h1)?;
        self.conv(tape, "base.out", &h3)
    }
}

impl NoisePredictor for DenoiserParams {
    fn predict_noise(&self, tape: &Tape, x_t: &Var, t: usize, cond: &Conditioning) -> Result<Var> {
        self.bind_constant(tape).forward(tape, x_t, t, cond)
    }
}
