//! U-Net flow estimator: two frames in, bidirectional flows and a blend mask out.
//!
//! Layout for `levels = L` and `base_channels = B` (channels at level `l` are
//! `min(B·2^l, 512)`):
//!
//! - level 0: `conv3(6 → c0)`, `conv3(c0 → c0)`
//! - level l > 0: stride-2 `conv3(c_{l-1} → c_l)`, `conv3(c_l → c_l)`
//! - decoder, l = L-2 … 0: bilinear ×2 upsample, concat skip, `conv3(c_{l+1} + c_l → c_l)`, `conv3(c_l → c_l)`
//! - head: `conv3(c0 → 5)`; channels 0-1 flow to frame 1, 2-3 flow to frame 2,
//!   channel 4 passes through a sigmoid to form the mask.
//!
//! Every hidden convolution is followed by a leaky ReLU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{conv2d, resize_bilinear, ConvSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
const MAX_CHANNELS: usize = 512;
const HEAD_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for FlowNetConfig {
    fn default() -> Self {
        FlowNetConfig {
            levels: 5,
            base_channels: 32,
            in_channels: 6,
            out_channels: 5,
        }
    }
}

impl FlowNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 3 {
            return Err(Error::Config(format!(
                "flow net needs levels >= 3, got {}",
                self.levels
            )));
        }
        if self.base_channels < 8 {
            return Err(Error::Config(format!(
                "flow net needs base_channels >= 8, got {}",
                self.base_channels
            )));
        }
        if self.in_channels != 6 || self.out_channels != 5 {
            return Err(Error::Config(
                "flow net takes 6 input channels (two RGB frames) and emits 5".into(),
            ));
        }
        Ok(())
    }

    /// Spatial sizes must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(MAX_CHANNELS)
    }

    /// Every convolution in forward order.
    pub fn plan(&self) -> Vec<(String, ConvSpec)> {
        let mut plan = Vec::new();
        let c0 = self.channels(0);
        plan.push(("enc0.a".into(), ConvSpec::same(self.in_channels, c0, 3)));
        plan.push(("enc0.b".into(), ConvSpec::same(c0, c0, 3)));
        for l in 1..self.levels {
            let (cp, c) = (self.channels(l - 1), self.channels(l));
            plan.push((
                format!("enc{l}.a"),
                ConvSpec {
                    cin: cp,
                    cout: c,
                    k: 3,
                    stride: 2,
                    pad: 1,
                },
            ));
            plan.push((format!("enc{l}.b"), ConvSpec::same(c, c, 3)));
        }
        for l in (0..self.levels - 1).rev() {
            let (cu, c) = (self.channels(l + 1), self.channels(l));
            plan.push((format!("dec{l}.a"), ConvSpec::same(cu + c, c, 3)));
            plan.push((format!("dec{l}.b"), ConvSpec::same(c, c, 3)));
        }
        plan.push(("head".into(), ConvSpec::same(c0, self.out_channels, 3)));
        plan
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if !h.is_multiple_of(d) || !w.is_multiple_of(d) || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {d} (levels = {})",
                self.levels
            )));
        }
        Ok(())
    }
}

/// Flows and mask produced for one batch, still attached to the tape.
#[derive(Clone, Copy, Debug)]
pub struct FlowEstimate<'t> {
    pub flow_1t: Var<'t>,
    pub flow_2t: Var<'t>,
    pub mask: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowEstimator {
    config: FlowNetConfig,
    params: ParamSet,
}

impl FlowEstimator {
    pub fn new(config: FlowNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let plan = config.plan();
        let last = plan.len() - 1;
        for (i, (name, spec)) in plan.into_iter().enumerate() {
            let gain = if i == last { HEAD_GAIN } else { 1.0 };
            let (w, b) = spec.init(gain, &mut rng);
            params.push(format!("{name}.weight"), w);
            params.push(format!("{name}.bias"), b);
        }
        Ok(FlowEstimator { config, params })
    }

    pub fn config(&self) -> &FlowNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Forward pass with parameters already bound on the tape (see [`ParamSet::bind`]).
    pub fn estimate<'t>(
        &self,
        p: &[Var<'t>],
        i1: &Var<'t>,
        i2: &Var<'t>,
    ) -> Result<FlowEstimate<'t>> {
        let a = i1.value();
        let (n, c, h, w) = a.dims4()?;
        if a.shape() != i2.value().shape() {
            return Err(Error::Shape(format!(
                "frames differ in shape: {:?} vs {:?}",
                a.shape(),
                i2.value().shape()
            )));
        }
        if c != 3 {
            return Err(Error::Shape(format!(
                "flow net expects RGB frames, got {c} channels"
            )));
        }
        self.config.check_input(h, w)?;
        let plan = self.config.plan();
        let mut layer = 0usize;
        let mut conv = |x: &Var<'t>, act: bool| -> Result<Var<'t>> {
            let spec = plan[layer].1;
            let y = conv2d(x, &p[2 * layer], &p[2 * layer + 1], spec.stride, spec.pad)?;
            layer += 1;
            Ok(if act { y.leaky_relu(LEAKY_SLOPE) } else { y })
        };

        let mut x = Var::concat_channels(&[*i1, *i2])?;
        let mut skips = Vec::with_capacity(self.config.levels);
        for _ in 0..self.config.levels {
            x = conv(&x, true)?;
            x = conv(&x, true)?;
            skips.push(x);
        }
        skips.pop();
        while let Some(skip) = skips.pop() {
            let (_, _, sh, sw) = skip.value().dims4()?;
            let up = resize_bilinear(&x, sh, sw)?;
            x = Var::concat_channels(&[up, skip])?;
            x = conv(&x, true)?;
            x = conv(&x, true)?;
        }
        let out = conv(&x, false)?;
        debug_assert_eq!(out.value().shape(), [n, 5, h, w]);
        Ok(FlowEstimate {
            flow_1t: out.slice_channels(0, 2)?,
            flow_2t: out.slice_channels(2, 2)?,
            mask: out.slice_channels(4, 1)?.sigmoid(),
        })
    }

    /// Inference helper returning plain tensors `(flow_1t, flow_2t, mask)`.
    pub fn estimate_values(&self, i1: &Tensor, i2: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let est = self.estimate(&p, &tape.constant(i1.clone()), &tape.constant(i2.clone()))?;
        Ok((
            (*est.flow_1t.value()).clone(),
            (*est.flow_2t.value()).clone(),
            (*est.mask.value()).clone(),
        ))
    }
}
