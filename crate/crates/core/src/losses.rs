//! Training objectives.
//!
//! The interpolation loss combines a Charbonnier photometric term (values and
//! first-order image gradients), an L1 perceptual term on frozen features and
//! a total-variation smoothness term on flows and mask. The adversarial part
//! is a hinge loss: the discriminator pushes real scores above `+1` and fake
//! scores below `-1`, the generator raises fake scores.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::flow_net::FlowEstimate;
use crate::synthesis::FeatureExtractor;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub charbonnier_eps: f64,
    pub charbonnier_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 1.0,
            lambda1: 1.0,
            lambda2: 0.01,
            lambda3: 0.1,
            lambda4: 0.01,
            charbonnier_eps: 1e-3,
            charbonnier_alpha: 0.45,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            self.lambda0,
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
        ];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        if !(self.charbonnier_eps > 0.0) {
            return Err(Error::Config("charbonnier_eps must be positive".into()));
        }
        if !(self.charbonnier_alpha > 0.0 && self.charbonnier_alpha <= 1.0) {
            return Err(Error::Config("charbonnier_alpha must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// `ρ(0) = (ε²)^α`, the floor every Charbonnier term sits on.
    pub fn charbonnier_floor(&self) -> f64 {
        (self.charbonnier_eps * self.charbonnier_eps).powf(self.charbonnier_alpha)
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ph: f64,
    pub pe: f64,
    pub s: f64,
    pub d: f64,
    pub g: f64,
    pub synth: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.ph, self.pe, self.s, self.d, self.g, self.synth, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `mean((x² + ε²)^α)`.
pub fn charbonnier<'t>(x: &Var<'t>, eps: f64, alpha: f64) -> Var<'t> {
    let xv = x.value();
    let n = xv.numel() as f64;
    let e2 = eps * eps;
    let value = xv
        .data()
        .iter()
        .map(|v| (v * v + e2).powf(alpha))
        .sum::<f64>()
        / n;
    x.tape().op(Tensor::scalar(value), &[*x], move |g| {
        let s = g.data()[0] / n;
        vec![xv.map(|v| s * alpha * (v * v + e2).powf(alpha - 1.0) * 2.0 * v)]
    })
}

/// Charbonnier mean of a plain array.
pub fn charbonnier_value(x: &[f64], eps: f64, alpha: f64) -> f64 {
    let e2 = eps * eps;
    x.iter().map(|v| (v * v + e2).powf(alpha)).sum::<f64>() / x.len() as f64
}

/// Forward difference along an axis of a rank-4 tensor, cropped to the valid region.
fn forward_diff<'t>(x: &Var<'t>, along_x: bool) -> Result<Var<'t>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let (oh, ow) = if along_x {
        (h, w.saturating_sub(1))
    } else {
        (h.saturating_sub(1), w)
    };
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("image gradient of a {h}x{w} map")));
    }
    let (dy, dx) = if along_x { (0, 1) } else { (1, 0) };
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &xv.data()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                out[(p * oh + y) * ow + xx] = src[(y + dy) * w + xx + dx] - src[y * w + xx];
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
    Ok(x.tape().op(value, &[*x], move |g| {
        let mut gi = vec![0.0; n * c * h * w];
        for p in 0..n * c {
            let dst = &mut gi[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let gv = g.data()[(p * oh + y) * ow + xx];
                    dst[(y + dy) * w + xx + dx] += gv;
                    dst[y * w + xx] -= gv;
                }
            }
        }
        vec![Tensor::from_vec(&[n, c, h, w], gi).expect("shape")]
    }))
}

pub fn diff_x<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    forward_diff(x, true)
}

pub fn diff_y<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    forward_diff(x, false)
}

/// `ρ(pred − gt) + ρ(∂ₓpred − ∂ₓgt) + ρ(∂ᵧpred − ∂ᵧgt)`.
pub fn photometric_loss<'t>(pred: &Var<'t>, gt: &Var<'t>, eps: f64, alpha: f64) -> Result<Var<'t>> {
    pred.value()
        .expect_same_shape(&gt.value(), "photometric loss")?;
    let value = charbonnier(&pred.sub(gt)?, eps, alpha);
    let gx = charbonnier(&diff_x(pred)?.sub(&diff_x(gt)?)?, eps, alpha);
    let gy = charbonnier(&diff_y(pred)?.sub(&diff_y(gt)?)?, eps, alpha);
    value.add(&gx)?.add(&gy)
}

/// `mean |Φ(pred) − Φ(gt)|`; the target features are treated as constants.
pub fn perceptual_loss<'t>(
    pred: &Var<'t>,
    gt: &Var<'t>,
    phi: &FeatureExtractor,
) -> Result<Var<'t>> {
    pred.value()
        .expect_same_shape(&gt.value(), "perceptual loss")?;
    let fp = phi.extract(pred)?;
    let fg = phi.extract(&gt.detach())?.detach();
    Ok(fp.sub(&fg)?.abs_mean())
}

/// Total variation of one field, summed over channels: `Σ_c mean|∂ₓ| + mean|∂ᵧ|`.
pub fn total_variation<'t>(field: &Var<'t>) -> Result<Var<'t>> {
    let (_, c, _, _) = field.value().dims4()?;
    let mut acc: Option<Var<'t>> = None;
    for ch in 0..c {
        let plane = field.slice_channels(ch, 1)?;
        let tv = diff_x(&plane)?
            .abs_mean()
            .add(&diff_y(&plane)?.abs_mean())?;
        acc = Some(match acc {
            Some(a) => a.add(&tv)?,
            None => tv,
        });
    }
    Ok(acc.expect("at least one channel"))
}

/// Smoothness over both flows and the blend mask.
pub fn smoothness_loss<'t>(est: &FlowEstimate<'t>) -> Result<Var<'t>> {
    total_variation(&est.flow_1t)?
        .add(&total_variation(&est.flow_2t)?)?
        .add(&total_variation(&est.mask)?)
}

/// Interpolation loss terms, still on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SynthLoss<'t> {
    pub ph: Var<'t>,
    pub pe: Var<'t>,
    pub s: Var<'t>,
    pub synth: Var<'t>,
}

/// Photometric and perceptual terms on both the warped and the refined frame,
/// plus smoothness: `λ₀·ph + λ₁·pe + λ₂·s`.
pub fn interpolation_loss<'t>(
    warped: &Var<'t>,
    refined: &Var<'t>,
    gt: &Var<'t>,
    est: &FlowEstimate<'t>,
    weights: &LossWeights,
    phi: &FeatureExtractor,
) -> Result<SynthLoss<'t>> {
    let (eps, alpha) = (weights.charbonnier_eps, weights.charbonnier_alpha);
    let ph = photometric_loss(warped, gt, eps, alpha)?
        .add(&photometric_loss(refined, gt, eps, alpha)?)?;
    let pe = if weights.lambda1 > 0.0 {
        perceptual_loss(warped, gt, phi)?.add(&perceptual_loss(refined, gt, phi)?)?
    } else {
        warped.tape().constant(Tensor::scalar(0.0))
    };
    let s = smoothness_loss(est)?;
    let synth = ph
        .scale(weights.lambda0)
        .add(&pe.scale(weights.lambda1))?
        .add(&s.scale(weights.lambda2))?;
    Ok(SynthLoss { ph, pe, s, synth })
}

fn expect_scores(v: &Var<'_>, what: &str) -> Result<()> {
    if v.value().numel() == 0 {
        return Err(Error::Contract(format!("{what}: empty score list")));
    }
    Ok(())
}

/// `mean(max(0, 1 − D(real))) + mean(max(0, 1 + D(fake)))`.
pub fn hinge_d_loss<'t>(scores_real: &Var<'t>, scores_fake: &Var<'t>) -> Result<Var<'t>> {
    expect_scores(scores_real, "hinge_d_loss real")?;
    expect_scores(scores_fake, "hinge_d_loss fake")?;
    let real = scores_real.scale(-1.0).add_scalar(1.0).relu().mean();
    let fake = scores_fake.add_scalar(1.0).relu().mean();
    real.add(&fake)
}

/// `−mean(D(fake))`.
pub fn hinge_g_loss<'t>(scores_fake: &Var<'t>) -> Result<Var<'t>> {
    expect_scores(scores_fake, "hinge_g_loss")?;
    Ok(scores_fake.mean().scale(-1.0))
}

/// [`hinge_d_loss`] on plain score lists.
pub fn hinge_d_value(scores_real: &[f64], scores_fake: &[f64]) -> Result<f64> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::Contract("hinge_d_loss: empty score list".into()));
    }
    let r = scores_real.iter().map(|s| (1.0 - s).max(0.0)).sum::<f64>() / scores_real.len() as f64;
    let f = scores_fake.iter().map(|s| (1.0 + s).max(0.0)).sum::<f64>() / scores_fake.len() as f64;
    Ok(r + f)
}

/// [`hinge_g_loss`] on a plain score list.
pub fn hinge_g_value(scores_fake: &[f64]) -> Result<f64> {
    if scores_fake.is_empty() {
        return Err(Error::Contract("hinge_g_loss: empty score list".into()));
    }
    Ok(-scores_fake.iter().sum::<f64>() / scores_fake.len() as f64)
}
