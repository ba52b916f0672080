use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spectral::{power_iteration, power_iteration_to, sigma_estimate, spectral_norm_var};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::flow_net::LEAKY_SLOPE;
use crate::nn::{conv2d, linear, ConvSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Stride-2 convolution stack (kernel 4) followed by a linear scoring head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub patch_size: usize,
    pub layers: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Power-iteration steps per discriminator update.
    pub power_iters: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            patch_size: 64,
            layers: 5,
            base_channels: 64,
            max_channels: 512,
            power_iters: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.base_channels == 0 || self.power_iters == 0 {
            return Err(Error::Config(
                "discriminator needs layers, channels and power_iters >= 1".into(),
            ));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(1 << self.layers) {
            return Err(Error::Config(format!(
                "patch size {} must be divisible by 2^{}",
                self.patch_size, self.layers
            )));
        }
        Ok(())
    }

    pub fn channels(&self, layer: usize) -> usize {
        (self.base_channels << layer).min(self.max_channels)
    }

    pub fn convs(&self) -> Vec<ConvSpec> {
        (0..self.layers)
            .map(|l| ConvSpec {
                cin: if l == 0 { 3 } else { self.channels(l - 1) },
                cout: self.channels(l),
                k: 4,
                stride: 2,
                pad: 1,
            })
            .collect()
    }

    pub fn head_inputs(&self) -> usize {
        let side = self.patch_size >> self.layers;
        self.channels(self.layers - 1) * side * side
    }
}

/// Warm-up target for the initial singular vector estimates.
const WARMUP_TOL: f64 = 1e-6;
const WARMUP_MAX_ITERS: usize = 10_000;

/// Instance discriminator; every weight is spectrally normalized before use.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    params: ParamSet,
    /// Left singular vector estimate per weight (conv layers, then head).
    u: Vec<Vec<f64>>,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut u = Vec::new();
        for (l, spec) in config.convs().into_iter().enumerate() {
            let (w, b) = spec.init(1.0, &mut rng);
            params.push(format!("conv{l}.weight"), w);
            params.push(format!("conv{l}.bias"), b);
            u.push(unit_vector(spec.cout, &mut rng));
        }
        let fin = config.head_inputs();
        params.push(
            "head.weight",
            Tensor::randn(&[1, fin], (1.0 / fin as f64).sqrt(), &mut rng),
        );
        params.push("head.bias", Tensor::zeros(&[1]));
        u.push(vec![1.0]);
        let mut d = Discriminator { config, params, u };
        for (k, wi) in d.weight_indices().into_iter().enumerate() {
            power_iteration_to(d.params.get(wi), &mut d.u[k], WARMUP_TOL, WARMUP_MAX_ITERS)?;
        }
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn singular_vectors(&self) -> &[Vec<f64>] {
        &self.u
    }

    pub fn set_singular_vectors(&mut self, u: Vec<Vec<f64>>) -> Result<()> {
        if u.len() != self.u.len() || u.iter().zip(&self.u).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Config(
                "singular vector state does not match the discriminator".into(),
            ));
        }
        self.u = u;
        Ok(())
    }

    /// Weight tensors subject to normalization, in `u` order.
    fn weight_indices(&self) -> Vec<usize> {
        (0..=self.config.layers).map(|l| 2 * l).collect()
    }

    /// Advance every layer's power iteration by `iters` steps.
    pub fn power_step(&mut self, iters: usize) -> Result<()> {
        for (k, wi) in self.weight_indices().into_iter().enumerate() {
            power_iteration(self.params.get(wi), &mut self.u[k], iters)?;
        }
        Ok(())
    }

    /// Current estimates `σ` per normalized weight.
    pub fn sigma_estimates(&self) -> Result<Vec<f64>> {
        self.weight_indices()
            .into_iter()
            .zip(&self.u)
            .map(|(wi, u)| Ok(sigma_estimate(self.params.get(wi), u)?.0))
            .collect()
    }

    /// Normalized weight matrices as plain tensors.
    pub fn normalized_weights(&self) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        self.weight_indices()
            .into_iter()
            .enumerate()
            .map(|(k, wi)| {
                let w = spectral_norm_var(&tape.constant(self.params.get(wi).clone()), &self.u[k])?;
                Ok((*w.value()).clone())
            })
            .collect()
    }

    /// One score per patch, `patches: [R, 3, S, S]` → `[R]`.
    pub fn discriminate<'t>(&self, p: &[Var<'t>], patches: &Var<'t>) -> Result<Var<'t>> {
        let (r, c, h, w) = patches.value().dims4()?;
        let s = self.config.patch_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "discriminator expects [R, 3, {s}, {s}] patches, got {:?}",
                patches.value().shape()
            )));
        }
        let mut x = *patches;
        for (l, spec) in self.config.convs().iter().enumerate() {
            let wn = spectral_norm_var(&p[2 * l], &self.u[l])?;
            x = conv2d(&x, &wn, &p[2 * l + 1], spec.stride, spec.pad)?.leaky_relu(LEAKY_SLOPE);
        }
        let flat = x.reshape(&[r, self.config.head_inputs()])?;
        let l = self.config.layers;
        let wn = spectral_norm_var(&p[2 * l], &self.u[l])?;
        linear(&flat, &wn, &p[2 * l + 1])?.reshape(&[r])
    }

    /// Scores as plain numbers (no parameter gradients).
    pub fn scores(&self, patches: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.discriminate(&p, &tape.constant(patches.clone()))?;
        let v = out.value().data().to_vec();
        Ok(v)
    }
}

fn unit_vector(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = Tensor::randn(&[n], 1.0, rng);
    let norm = t.dot(&t).sqrt();
    t.data().iter().map(|v| v / norm).collect()
}
