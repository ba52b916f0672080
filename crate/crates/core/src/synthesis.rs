//! Feature extraction, two-stream warping of images and features, and the
//! 9×9 residual refinement head.

use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::flow_net::{FlowEstimate, FlowEstimator, FlowNetConfig, LEAKY_SLOPE};
use crate::nn::{conv2d, max_pool2, resize_bilinear, ConvSpec};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::warping::{blend_warp_var, warp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    /// Early convolution stages of a VGG-16 style classifier loaded from a weights archive.
    PretrainedClassifier,
    /// Frozen random convolution stack; needs no external weights.
    FixedRandomConv,
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained-classifier" | "pretrained-classifier-early-layers" => {
                Ok(FeatureSource::PretrainedClassifier)
            }
            "fixed-random-conv" => Ok(FeatureSource::FixedRandomConv),
            other => Err(Error::Config(format!("unknown feature source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureExtractorConfig {
    pub source: FeatureSource,
    pub out_channels: usize,
    /// Number of convolution layers applied (VGG conv index for the pretrained source).
    pub layers: usize,
    pub seed: u64,
    /// Weights archive for the pretrained source, using torchvision `features.{i}` names.
    pub weights: Option<PathBuf>,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            source: FeatureSource::FixedRandomConv,
            out_channels: 8,
            layers: 2,
            seed: 0x5eed,
            weights: None,
        }
    }
}

/// VGG-16 feature stack: output channels per conv, `0` marks a 2×2 max pool.
const VGG16: [usize; 17] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512,
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug, PartialEq)]
enum Stage {
    Conv { weight: usize, bias: usize },
    Pool,
}

/// Frozen feature map `Φ`; gradients pass through to the input only.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    config: FeatureExtractorConfig,
    params: ParamSet,
    stages: Vec<Stage>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureExtractorConfig) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config(
                "feature extractor needs at least one layer".into(),
            ));
        }
        let mut params = ParamSet::new();
        let mut stages = Vec::new();
        match config.source {
            FeatureSource::FixedRandomConv => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let mut cin = 3;
                for l in 0..config.layers {
                    let spec = ConvSpec::same(cin, config.out_channels, 3);
                    let (w, b) = spec.init(1.0, &mut rng);
                    let weight = params.push(format!("conv{l}.weight"), w);
                    let bias = params.push(format!("conv{l}.bias"), b);
                    stages.push(Stage::Conv { weight, bias });
                    cin = config.out_channels;
                }
            }
            FeatureSource::PretrainedClassifier => {
                let path = config.weights.clone().ok_or_else(|| {
                    Error::Config("pretrained-classifier features need a `weights` archive".into())
                })?;
                let archive = Archive::load(&path)?;
                let mut convs = 0;
                let mut cout = 0;
                for (idx, &c) in VGG16.iter().enumerate() {
                    if convs == config.layers {
                        break;
                    }
                    if c == 0 {
                        stages.push(Stage::Pool);
                        continue;
                    }
                    // torchvision numbering interleaves ReLU modules
                    let tv = torchvision_index(idx);
                    let get = |suffix: &str| {
                        let name = format!("features.{tv}.{suffix}");
                        archive
                            .get(&name)
                            .cloned()
                            .ok_or_else(|| Error::format(&path, format!("missing `{name}`")))
                    };
                    let weight = params.push(format!("features.{tv}.weight"), get("weight")?);
                    let bias = params.push(format!("features.{tv}.bias"), get("bias")?);
                    stages.push(Stage::Conv { weight, bias });
                    convs += 1;
                    cout = c;
                }
                if convs < config.layers {
                    return Err(Error::Config(format!(
                        "classifier has only {convs} conv layers, {} requested",
                        config.layers
                    )));
                }
                if cout != config.out_channels {
                    return Err(Error::Config(format!(
                        "classifier layer {} has {cout} channels, config says {}",
                        config.layers, config.out_channels
                    )));
                }
            }
        }
        Ok(FeatureExtractor {
            config,
            params,
            stages,
        })
    }

    pub fn config(&self) -> &FeatureExtractorConfig {
        &self.config
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Features at the input resolution.
    pub fn extract<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let (n, c, h, w) = x.value().dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "feature extractor expects RGB, got {c} channels"
            )));
        }
        let p = self.params.bind(tape, false);
        let mut y = *x;
        let pretrained = self.config.source == FeatureSource::PretrainedClassifier;
        if pretrained {
            let mut shift = Tensor::zeros(&[n, 3, h, w]);
            let mut scale = Tensor::zeros(&[n, 3, h, w]);
            for b in 0..n {
                for ch in 0..3 {
                    let base = (b * 3 + ch) * h * w;
                    shift.data_mut()[base..base + h * w]
                        .fill(-IMAGENET_MEAN[ch] / IMAGENET_STD[ch]);
                    scale.data_mut()[base..base + h * w].fill(1.0 / IMAGENET_STD[ch]);
                }
            }
            y = y.mul(&tape.constant(scale))?.add(&tape.constant(shift))?;
        }
        let convs = self
            .stages
            .iter()
            .filter(|s| matches!(s, Stage::Conv { .. }))
            .count();
        let mut seen = 0;
        for stage in &self.stages {
            match *stage {
                Stage::Conv { weight, bias } => {
                    y = conv2d(&y, &p[weight], &p[bias], 1, 1)?;
                    seen += 1;
                    if pretrained {
                        y = y.relu();
                    } else if seen < convs {
                        y = y.leaky_relu(LEAKY_SLOPE);
                    }
                }
                Stage::Pool => y = max_pool2(&y)?,
            }
        }
        resize_bilinear(&y, h, w)
    }
}

fn torchvision_index(vgg_idx: usize) -> usize {
    // conv layers are followed by a ReLU module; pools stand alone
    VGG16[..vgg_idx]
        .iter()
        .map(|&c| if c == 0 { 1 } else { 2 })
        .sum()
}

/// Convenience wrapper: features of a single tensor without a caller-side tape.
pub fn extract_features(config: &FeatureExtractorConfig, image: &Tensor) -> Result<Tensor> {
    let fx = FeatureExtractor::new(config.clone())?;
    let tape = Tape::new();
    let out = fx.extract(&tape.constant(image.clone()))?;
    Ok((*out.value()).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub hidden: [usize; 2],
    pub kernel: usize,
    /// Also feed the two unblended warped frames to the head.
    pub feed_unblended: bool,
    /// Zero the last layer so the head starts as the identity on the warped frame.
    pub zero_init_final: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            hidden: [64, 64],
            kernel: 9,
            feed_unblended: false,
            zero_init_final: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisHead {
    config: SynthesisConfig,
    in_channels: usize,
    params: ParamSet,
}

/// `warped` is the blended flow-warped frame, `refined` the head's output.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisOutput<'t> {
    pub warped: Var<'t>,
    pub refined: Var<'t>,
}

impl SynthesisHead {
    pub fn new(config: SynthesisConfig, feature_channels: usize, seed: u64) -> Result<Self> {
        if config.kernel.is_multiple_of(2) || config.hidden.contains(&0) {
            return Err(Error::Config(
                "synthesis head needs an odd kernel and nonzero widths".into(),
            ));
        }
        let in_channels = 3 + feature_channels + if config.feed_unblended { 6 } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let widths = [in_channels, config.hidden[0], config.hidden[1], 3];
        for l in 0..3 {
            let spec = ConvSpec::same(widths[l], widths[l + 1], config.kernel);
            let (mut w, b) = spec.init(1.0, &mut rng);
            if l == 2 && config.zero_init_final {
                w = Tensor::zeros(w.shape());
            }
            params.push(format!("head{l}.weight"), w);
            params.push(format!("head{l}.bias"), b);
        }
        Ok(SynthesisHead {
            config,
            in_channels,
            params,
        })
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Warp images and features with `est`, then refine residually.
    #[allow(clippy::too_many_arguments)]
    pub fn synthesize<'t>(
        &self,
        p: &[Var<'t>],
        i1: &Var<'t>,
        i2: &Var<'t>,
        f1: &Var<'t>,
        f2: &Var<'t>,
        est: &FlowEstimate<'t>,
    ) -> Result<SynthesisOutput<'t>> {
        let warped = blend_warp_var(i1, i2, &est.flow_1t, &est.flow_2t, &est.mask)?;
        let warped_feat = blend_warp_var(f1, f2, &est.flow_1t, &est.flow_2t, &est.mask)?;
        let mut inputs = vec![warped, warped_feat];
        if self.config.feed_unblended {
            inputs.push(warp(i1, &est.flow_1t)?);
            inputs.push(warp(i2, &est.flow_2t)?);
        }
        let x = Var::concat_channels(&inputs)?;
        let got = x.value().shape()[1];
        if got != self.in_channels {
            return Err(Error::Shape(format!(
                "synthesis head expects {} input channels, got {got}",
                self.in_channels
            )));
        }
        let pad = self.config.kernel / 2;
        let h0 = conv2d(&x, &p[0], &p[1], 1, pad)?.leaky_relu(LEAKY_SLOPE);
        let h1 = conv2d(&h0, &p[2], &p[3], 1, pad)?.leaky_relu(LEAKY_SLOPE);
        let residual = conv2d(&h1, &p[4], &p[5], 1, pad)?;
        let refined = warped.add(&residual)?;
        Ok(SynthesisOutput { warped, refined })
    }
}

/// Flow estimator, synthesis head and frozen feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub flow: FlowEstimator,
    pub head: SynthesisHead,
    pub extractor: FeatureExtractor,
}

/// Generator parameters bound on a tape.
pub struct GeneratorVars<'t> {
    pub flow: Vec<Var<'t>>,
    pub head: Vec<Var<'t>>,
}

impl Generator {
    /// Flow estimator seeded with `seed`, head with `seed + 1`.
    pub fn new(
        flow: FlowNetConfig,
        head: SynthesisConfig,
        features: FeatureExtractorConfig,
        seed: u64,
    ) -> Result<Self> {
        let extractor = FeatureExtractor::new(features)?;
        Ok(Generator {
            flow: FlowEstimator::new(flow, seed)?,
            head: SynthesisHead::new(head, extractor.out_channels(), seed.wrapping_add(1))?,
            extractor,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> GeneratorVars<'t> {
        GeneratorVars {
            flow: self.flow.params().bind(tape, trainable),
            head: self.head.params().bind(tape, trainable),
        }
    }

    pub fn param_count(&self) -> usize {
        self.flow.param_count() + self.head.params().count()
    }

    /// Estimate flows, extract features of both frames and synthesize.
    pub fn forward<'t>(
        &self,
        vars: &GeneratorVars<'t>,
        i1: &Var<'t>,
        i2: &Var<'t>,
    ) -> Result<(FlowEstimate<'t>, SynthesisOutput<'t>)> {
        generator_forward(
            &self.flow,
            &vars.flow,
            &self.head,
            &vars.head,
            &self.extractor,
            i1,
            i2,
        )
    }

    /// Inference: returns `(flow_1t, flow_2t, mask, warped, refined clamped to [0, 1])`.
    pub fn interpolate(&self, i1: &Tensor, i2: &Tensor) -> Result<InterpolationResult> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let (est, out) = self.forward(
            &vars,
            &tape.constant(i1.clone()),
            &tape.constant(i2.clone()),
        )?;
        Ok(InterpolationResult {
            flow_1t: (*est.flow_1t.value()).clone(),
            flow_2t: (*est.flow_2t.value()).clone(),
            mask: (*est.mask.value()).clone(),
            warped: (*out.warped.value()).clone(),
            refined: out.refined.value().clamp(0.0, 1.0),
        })
    }
}

#[derive(Clone, Debug)]
pub struct InterpolationResult {
    pub flow_1t: Tensor,
    pub flow_2t: Tensor,
    pub mask: Tensor,
    pub warped: Tensor,
    pub refined: Tensor,
}

/// Full generator pipeline: estimate → extract features on both frames → synthesize.
pub fn generator_forward<'t>(
    flow_model: &FlowEstimator,
    flow_vars: &[Var<'t>],
    head: &SynthesisHead,
    head_vars: &[Var<'t>],
    extractor: &FeatureExtractor,
    i1: &Var<'t>,
    i2: &Var<'t>,
) -> Result<(FlowEstimate<'t>, SynthesisOutput<'t>)> {
    let est = flow_model.estimate(flow_vars, i1, i2)?;
    let f1 = extractor.extract(i1)?;
    let f2 = extractor.extract(i2)?;
    let out = head.synthesize(head_vars, i1, i2, &f1, &f2, &est)?;
    Ok((est, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_img(seed: u64, h: usize, w: usize) -> Tensor {
        Tensor::uniform(
            &[1, 3, h, w],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    fn small_head(zero: bool) -> SynthesisHead {
        let cfg = SynthesisConfig {
            hidden: [4, 4],
            zero_init_final: zero,
            ..Default::default()
        };
        SynthesisHead::new(cfg, 8, 11).unwrap()
    }

    fn const_estimate<'t>(
        tape: &'t Tape,
        h: usize,
        w: usize,
        flow: f64,
        mask: f64,
    ) -> FlowEstimate<'t> {
        FlowEstimate {
            flow_1t: tape.leaf(Tensor::full(&[1, 2, h, w], flow)),
            flow_2t: tape.leaf(Tensor::full(&[1, 2, h, w], -flow)),
            mask: tape.constant(Tensor::full(&[1, 1, h, w], mask)),
        }
    }

    #[test]
    fn fixed_random_features_are_deterministic_and_shaped() {
        let cfg = FeatureExtractorConfig::default();
        let img = rand_img(1, 10, 12);
        let a = extract_features(&cfg, &img).unwrap();
        let b = extract_features(&cfg, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [1, cfg.out_channels, 10, 12]);
        let c = extract_features(&cfg, &rand_img(2, 10, 12)).unwrap();
        assert!(a.max_abs_diff(&c) > 1e-3);
    }

    #[test]
    fn unknown_source_rejected() {
        assert!("resnet".parse::<FeatureSource>().is_err());
        assert_eq!(
            "fixed-random-conv".parse::<FeatureSource>().unwrap(),
            FeatureSource::FixedRandomConv
        );
        let bad: std::result::Result<FeatureExtractorConfig, _> =
            serde_json::from_str(r#"{"source": "resnet"}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn pretrained_source_needs_weights() {
        let cfg = FeatureExtractorConfig {
            source: FeatureSource::PretrainedClassifier,
            ..Default::default()
        };
        assert!(matches!(FeatureExtractor::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn pretrained_loader_reads_torchvision_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let archive = Archive {
            meta: serde_json::Value::Null,
            tensors: vec![
                (
                    "features.0.weight".into(),
                    Tensor::randn(&[64, 3, 3, 3], 0.1, &mut rng),
                ),
                ("features.0.bias".into(), Tensor::zeros(&[64])),
                (
                    "features.2.weight".into(),
                    Tensor::randn(&[64, 64, 3, 3], 0.1, &mut rng),
                ),
                ("features.2.bias".into(), Tensor::zeros(&[64])),
                (
                    "features.5.weight".into(),
                    Tensor::randn(&[128, 64, 3, 3], 0.1, &mut rng),
                ),
                ("features.5.bias".into(), Tensor::zeros(&[128])),
            ],
        };
        archive.save(&path).unwrap();
        let cfg = FeatureExtractorConfig {
            source: FeatureSource::PretrainedClassifier,
            out_channels: 128,
            layers: 3,
            weights: Some(path),
            ..Default::default()
        };
        let out = extract_features(&cfg, &rand_img(3, 8, 8)).unwrap();
        assert_eq!(out.shape(), [1, 128, 8, 8]);
        assert!(out.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn zero_final_layer_gives_identity_refinement() {
        let head = small_head(true);
        let fx = FeatureExtractor::new(FeatureExtractorConfig::default()).unwrap();
        let tape = Tape::new();
        let p = head.params().bind(&tape, true);
        let (i1, i2) = (
            tape.constant(rand_img(1, 8, 8)),
            tape.constant(rand_img(2, 8, 8)),
        );
        let (f1, f2) = (fx.extract(&i1).unwrap(), fx.extract(&i2).unwrap());
        let est = const_estimate(&tape, 8, 8, 0.3, 0.4);
        let out = head.synthesize(&p, &i1, &i2, &f1, &f2, &est).unwrap();
        assert_eq!(*out.refined.value(), *out.warped.value());
    }

    #[test]
    fn static_identity_through_warp() {
        let head = small_head(true);
        let fx = FeatureExtractor::new(FeatureExtractorConfig::default()).unwrap();
        let tape = Tape::new();
        let p = head.params().bind(&tape, false);
        let img = rand_img(4, 8, 8);
        let i = tape.constant(img.clone());
        let f = fx.extract(&i).unwrap();
        let est = const_estimate(&tape, 8, 8, 0.0, 1.0);
        let out = head.synthesize(&p, &i, &i, &f, &f, &est).unwrap();
        assert_eq!(*out.warped.value(), img);
    }

    #[test]
    fn gradient_reaches_flows_through_both_streams() {
        let head = small_head(false);
        let fx = FeatureExtractor::new(FeatureExtractorConfig::default()).unwrap();
        let tape = Tape::new();
        let p = head.params().bind(&tape, false);
        let (i1, i2) = (
            tape.constant(rand_img(5, 8, 8)),
            tape.constant(rand_img(6, 8, 8)),
        );
        let (f1, f2) = (fx.extract(&i1).unwrap(), fx.extract(&i2).unwrap());
        let est = const_estimate(&tape, 8, 8, 0.37, 0.6);
        let out = head.synthesize(&p, &i1, &i2, &f1, &f2, &est).unwrap();
        let g = tape.backward(out.refined.mean()).unwrap();
        for f in [est.flow_1t, est.flow_2t] {
            let gf = g.get(f).unwrap();
            assert!(gf.data().iter().map(|v| v.abs()).sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn generator_outputs_at_input_resolution() {
        let flow = FlowEstimator::new(
            FlowNetConfig {
                levels: 3,
                base_channels: 8,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let gen = Generator {
            flow,
            head: small_head(true),
            extractor: FeatureExtractor::new(FeatureExtractorConfig::default()).unwrap(),
        };
        let r = gen
            .interpolate(&rand_img(1, 16, 16), &rand_img(2, 16, 16))
            .unwrap();
        assert_eq!(r.flow_1t.shape(), [1, 2, 16, 16]);
        assert_eq!(r.flow_2t.shape(), [1, 2, 16, 16]);
        assert_eq!(r.mask.shape(), [1, 1, 16, 16]);
        assert_eq!(r.warped.shape(), [1, 3, 16, 16]);
        assert_eq!(r.refined.shape(), [1, 3, 16, 16]);
        let again = gen
            .interpolate(&rand_img(1, 16, 16), &rand_img(2, 16, 16))
            .unwrap();
        assert_eq!(r.refined, again.refined);
    }
}
