//! Adversarial training loop.
//!
//! Each step runs one generator forward pass, then `d_steps_per_g`
//! discriminator updates on detached fake patches, then one generator update
//! whose adversarial term goes through the discriminator with its parameters
//! bound as constants. Randomness is derived from `(seed, epoch)` for the
//! shuffle and `(seed, step)` for augmentation and noise, so a checkpoint only
//! needs the step counter to resume the exact trajectory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Archive;
use crate::config::RunConfig;
use crate::data::{index_sources, load_triplet, FrameTriplet, TripletEntry};
use crate::error::{Error, Result};
use crate::evaluator;
use crate::losses::{hinge_d_loss, hinge_g_loss, interpolation_loss, LossBreakdown, LossWeights};
use crate::params::Adam;
use crate::roi::{
    make_patch_pairs, BatchRoi, Discriminator, FrameHints, RoI, RoiProvider, RoiProviderConfig,
};
use crate::synthesis::Generator;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Interpolation loss only.
    Baseline,
    /// One whole-image RoI per frame.
    Gan,
    /// Proposed RoIs zoomed to the patch size.
    Roigan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lr_floor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Square crop side; 0 trains on full frames.
    pub crop: usize,
    pub flip: bool,
    pub rois_per_image: usize,
    pub d_steps_per_g: usize,
    /// Bilinear samples per RoI bin side.
    pub roi_samples: usize,
    pub noise_sigma0: f64,
    /// Defaults to half of `epochs`.
    pub noise_decay_epochs: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Evaluate the held-out split every this many epochs; 0 disables.
    pub eval_every: usize,
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Roigan,
            lr0: 1e-4,
            lr_decay: 0.1,
            lr_decay_every: 10,
            lr_floor: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            crop: 256,
            flip: true,
            rois_per_image: 16,
            d_steps_per_g: 2,
            roi_samples: 1,
            noise_sigma0: 0.1,
            noise_decay_epochs: None,
            epochs: 100,
            batch_size: 8,
            max_steps: None,
            seed: 0,
            checkpoint_every: 1,
            eval_every: 0,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.lr_floor && self.lr_floor > 0.0) {
            return Err(Error::Config("need lr0 > lr_floor > 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "lr_decay must lie in (0, 1] with lr_decay_every >= 1".into(),
            ));
        }
        if self.batch_size == 0
            || self.rois_per_image == 0
            || self.roi_samples == 0
            || self.checkpoint_every == 0
        {
            return Err(Error::Config(
                "batch_size, rois_per_image, roi_samples and checkpoint_every must be >= 1".into(),
            ));
        }
        if !(self.noise_sigma0 >= 0.0) {
            return Err(Error::Config("noise_sigma0 must be >= 0".into()));
        }
        Ok(())
    }

    pub fn noise(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma0: self.noise_sigma0,
            decay_epochs: self.noise_decay_epochs.unwrap_or(self.epochs / 2),
        }
    }
}

/// Round to 12 significant digits so decayed rates land on their decimal values.
fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.11e}").parse().expect("formatted float parses")
}

/// `max(lr0 · decay^⌊epoch / every⌋, floor)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.lr_decay_every).min(i32::MAX as usize) as i32;
    round_sig(cfg.lr0 * cfg.lr_decay.powi(k)).max(cfg.lr_floor)
}

/// Linearly decaying Gaussian noise for real patches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub sigma0: f64,
    pub decay_epochs: usize,
}

impl NoiseSchedule {
    pub fn sigma(&self, epoch: usize) -> f64 {
        if self.decay_epochs == 0 {
            return 0.0;
        }
        self.sigma0 * (1.0 - epoch as f64 / self.decay_epochs as f64).max(0.0)
    }
}

pub fn real_noise<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    epoch: usize,
    patch: &Tensor,
    rng: &mut R,
) -> Tensor {
    let sigma = schedule.sigma(epoch);
    if sigma == 0.0 {
        return patch.clone();
    }
    let mut out = patch.clone();
    for v in out.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
    out
}

/// `[N, C, h, w]` window at `(y, x)`.
pub fn crop_image(t: &Tensor, y: usize, x: usize, h: usize, w: usize) -> Result<Tensor> {
    let (n, c, th, tw) = t.dims4()?;
    if y + h > th || x + w > tw {
        return Err(Error::Shape(format!(
            "crop {h}x{w} at ({y}, {x}) exceeds {th}x{tw}"
        )));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for yy in y..y + h {
            let row = (plane * th + yy) * tw;
            out.extend_from_slice(&t.data()[row + x..row + x + w]);
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

pub fn flip_horizontal(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w).take(n * c * h) {
        row.reverse();
    }
    Ok(out)
}

/// Random crop and horizontal flip, identical for all frames of the triplet.
/// The high-resolution frame is cropped at factor-scaled coordinates and boxes
/// follow the frames.
pub fn augment<R: Rng + ?Sized>(
    t: &FrameTriplet,
    crop: usize,
    flip: bool,
    rng: &mut R,
) -> Result<FrameTriplet> {
    let (_, _, h, w) = t.it.dims4()?;
    let (ch, cw) = if crop == 0 { (h, w) } else { (crop, crop) };
    if ch > h || cw > w {
        return Err(Error::Contract(format!(
            "triplet {} is {h}x{w}, smaller than the {crop} crop",
            t.id
        )));
    }
    let y = rng.random_range(0..=h - ch);
    let x = rng.random_range(0..=w - cw);
    let flipped = flip && rng.random_bool(0.5);
    let f = t.factor()?;
    let apply = |img: &Tensor, s: usize| -> Result<Tensor> {
        let c = crop_image(img, y * s, x * s, ch * s, cw * s)?;
        if flipped {
            flip_horizontal(&c)
        } else {
            Ok(c)
        }
    };
    let rois = t.rois.as_ref().map(|rs| {
        rs.iter()
            .map(|r| {
                let (x1, x2) = (r.x1 - x as f64, r.x2 - x as f64);
                let (x1, x2) = if flipped {
                    (cw as f64 - x2, cw as f64 - x1)
                } else {
                    (x1, x2)
                };
                RoI::new(x1, r.y1 - y as f64, x2, r.y2 - y as f64, r.score)
            })
            .collect()
    });
    Ok(FrameTriplet {
        id: t.id.clone(),
        i1: apply(&t.i1, 1)?,
        it: apply(&t.it, 1)?,
        i2: apply(&t.i2, 1)?,
        it_hires: t.it_hires.as_ref().map(|hi| apply(hi, f)).transpose()?,
        rois,
    })
}

/// Stacked frames plus the RoIs selected for this step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub i1: Tensor,
    pub it: Tensor,
    pub i2: Tensor,
    /// Highest-resolution ground truth shared by the whole batch.
    pub real: Tensor,
    pub rois: Vec<BatchRoi>,
}

impl Batch {
    /// `items` carry their (already augmented) candidate boxes in `rois`.
    pub fn assemble(
        items: &[FrameTriplet],
        mode: Mode,
        provider: Option<&RoiProvider>,
    ) -> Result<Batch> {
        let stack = |f: fn(&FrameTriplet) -> &Tensor| {
            Tensor::stack(&items.iter().map(|t| f(t).clone()).collect::<Vec<_>>())
        };
        let it = stack(|t| &t.it)?;
        let (_, _, h, w) = it.dims4()?;
        let factors: Vec<Option<usize>> = items
            .iter()
            .map(|t| t.it_hires.as_ref().and(t.factor().ok()))
            .collect();
        let real = if factors.iter().all(|f| f.is_some() && *f == factors[0]) {
            Tensor::stack(
                &items
                    .iter()
                    .map(|t| t.it_hires.clone().unwrap())
                    .collect::<Vec<_>>(),
            )?
        } else {
            if factors.iter().any(Option::is_some) {
                log::debug!("mixed resolution factors in batch, using low-resolution ground truth");
            }
            it.clone()
        };
        let mut rois = Vec::new();
        for (b, t) in items.iter().enumerate() {
            let picked = match mode {
                Mode::Baseline => Vec::new(),
                Mode::Gan => vec![RoI::full_image(w, h)],
                Mode::Roigan => {
                    let p = provider
                        .ok_or_else(|| Error::Config("roigan mode needs a RoI provider".into()))?;
                    p.select(&t.id, t.rois.clone().unwrap_or_default(), w, h)
                }
            };
            rois.extend(picked.into_iter().map(|roi| BatchRoi { batch: b, roi }));
        }
        Ok(Batch {
            ids: items.iter().map(|t| t.id.clone()).collect(),
            i1: stack(|t| &t.i1)?,
            it,
            i2: stack(|t| &t.i2)?,
            real,
            rois,
        })
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_flow: Adam,
    pub opt_head: Adam,
    pub opt_disc: Adam,
}

const STATE_KIND: &str = "roiterp-train-state";

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let seed = cfg.train.seed;
        let generator = Generator::new(
            cfg.flow.clone(),
            cfg.synthesis.clone(),
            cfg.features.clone(),
            seed,
        )?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), seed.wrapping_add(2))?;
        let (b1, b2) = (cfg.train.adam_beta1, cfg.train.adam_beta2);
        Ok(TrainState {
            step: 0,
            opt_flow: Adam::new(generator.flow.params(), b1, b2),
            opt_head: Adam::new(generator.head.params(), b1, b2),
            opt_disc: Adam::new(discriminator.params(), b1, b2),
            generator,
            discriminator,
        })
    }

    pub fn to_archive(&self, cfg: &RunConfig) -> Archive {
        let mut tensors = Vec::new();
        tensors.extend(self.generator.flow.params().export("gen.flow."));
        tensors.extend(self.generator.head.params().export("gen.head."));
        tensors.extend(self.discriminator.params().export("disc."));
        for (k, u) in self.discriminator.singular_vectors().iter().enumerate() {
            tensors.push((
                format!("disc.u.{k}"),
                Tensor::from_vec(&[u.len()], u.clone()).expect("sized"),
            ));
        }
        tensors.extend(self.opt_flow.export("opt.flow."));
        tensors.extend(self.opt_head.export("opt.head."));
        tensors.extend(self.opt_disc.export("opt.disc."));
        Archive {
            meta: serde_json::json!({
                "kind": STATE_KIND,
                "step": self.step,
                "adam_t": [self.opt_flow.t, self.opt_head.t, self.opt_disc.t],
                "config": cfg,
            }),
            tensors,
        }
    }

    /// Rebuild from an archive; model shapes come from `cfg`.
    pub fn from_archive(a: &Archive, cfg: &RunConfig, path: &Path) -> Result<Self> {
        if a.meta.get("kind").and_then(|k| k.as_str()) != Some(STATE_KIND) {
            return Err(Error::format(path, "not a training checkpoint"));
        }
        let step = a.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::format(path, "checkpoint lacks a step counter"))?;
        let ts: Vec<u64> = serde_json::from_value(a.meta["adam_t"].clone())
            .map_err(|e| Error::format(path, format!("adam_t: {e}")))?;
        if ts.len() != 3 {
            return Err(Error::format(path, "adam_t must hold three counters"));
        }
        let mut s = TrainState::new(cfg)?;
        s.step = step;
        s.generator
            .flow
            .params_mut()
            .load_from(&a.tensors, "gen.flow.")?;
        s.generator
            .head
            .params_mut()
            .load_from(&a.tensors, "gen.head.")?;
        s.discriminator
            .params_mut()
            .load_from(&a.tensors, "disc.")?;
        let u = (0..s.discriminator.singular_vectors().len())
            .map(|k| {
                a.get(&format!("disc.u.{k}"))
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::format(path, format!("missing disc.u.{k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        s.discriminator.set_singular_vectors(u)?;
        s.opt_flow.load_from(&a.tensors, "opt.flow.", ts[0])?;
        s.opt_head.load_from(&a.tensors, "opt.head.", ts[1])?;
        s.opt_disc.load_from(&a.tensors, "opt.disc.", ts[2])?;
        Ok(s)
    }

    pub fn save(&self, path: &Path, cfg: &RunConfig) -> Result<()> {
        self.to_archive(cfg).save(path)
    }

    pub fn load(path: &Path, cfg: &RunConfig) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?, cfg, path)
    }
}

/// Generator and run configuration stored in a training checkpoint.
pub fn load_generator(path: &Path) -> Result<(Generator, RunConfig)> {
    let a = Archive::load(path)?;
    if a.meta.get("kind").and_then(|k| k.as_str()) != Some(STATE_KIND) {
        return Err(Error::format(path, "not a training checkpoint"));
    }
    let cfg: RunConfig = serde_json::from_value(a.meta["config"].clone())
        .map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
    let mut g = Generator::new(
        cfg.flow.clone(),
        cfg.synthesis.clone(),
        cfg.features.clone(),
        cfg.train.seed,
    )?;
    g.flow.params_mut().load_from(&a.tensors, "gen.flow.")?;
    g.head.params_mut().load_from(&a.tensors, "gen.head.")?;
    Ok((g, cfg))
}

fn non_finite(step: u64, batch: &Batch, what: &str, v: f64) -> Error {
    let ids = batch.ids.join(",");
    log::error!("non-finite {what} ({v}) at step {step}, batch [{ids}]");
    Error::NonFiniteLoss {
        step,
        batch: ids,
        detail: format!("{what} = {v}"),
    }
}

/// One hinge update of the discriminator on fixed patches; returns `L_d`
/// before the update.
pub fn discriminator_update(
    disc: &mut Discriminator,
    opt: &mut Adam,
    real: &Tensor,
    fake: &Tensor,
    weights: &LossWeights,
    lr: f64,
) -> Result<f64> {
    disc.power_step(disc.config().power_iters)?;
    let tape = Tape::new();
    let p = disc.params().bind(&tape, true);
    let sr = disc.discriminate(&p, &tape.constant(real.clone()))?;
    let sf = disc.discriminate(&p, &tape.constant(fake.clone()))?;
    let ld = hinge_d_loss(&sr, &sf)?;
    let value = ld.scalar_value();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(ld.scale(weights.lambda3))?;
    let g = disc.params().collect_grads(&p, &grads);
    opt.step(disc.params_mut(), &g, lr);
    Ok(value)
}

/// One training step at `epoch`; `rng` supplies the real-patch noise.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &RunConfig,
    epoch: usize,
    rng: &mut R,
) -> Result<LossBreakdown> {
    let tc = &cfg.train;
    let w = &cfg.losses;
    let lr = lr_schedule(epoch, tc);
    let step = state.step;

    let tape = Tape::new();
    let gv = state.generator.bind(&tape, true);
    let i1 = tape.constant(batch.i1.clone());
    let i2 = tape.constant(batch.i2.clone());
    let gt = tape.constant(batch.it.clone());
    let (est, out) = state.generator.forward(&gv, &i1, &i2)?;
    let sl = interpolation_loss(
        &out.warped,
        &out.refined,
        &gt,
        &est,
        w,
        &state.generator.extractor,
    )?;
    let mut bd = LossBreakdown {
        ph: sl.ph.scalar_value(),
        pe: sl.pe.scalar_value(),
        s: sl.s.scalar_value(),
        synth: sl.synth.scalar_value(),
        ..Default::default()
    };
    if !bd.synth.is_finite() {
        return Err(non_finite(step, batch, "interpolation loss", bd.synth));
    }

    let mut objective = sl.synth;
    if tc.mode != Mode::Baseline {
        if batch.rois.is_empty() {
            return Err(Error::Contract("adversarial step without RoIs".into()));
        }
        let patch = cfg.discriminator.patch_size;
        let pairs = make_patch_pairs(
            &out.refined,
            &batch.real,
            &batch.rois,
            patch,
            tc.roi_samples,
        )?;
        let fake = pairs.fake.value();
        let real = real_noise(&tc.noise(), epoch, &pairs.real, rng);
        for _ in 0..tc.d_steps_per_g {
            bd.d = discriminator_update(
                &mut state.discriminator,
                &mut state.opt_disc,
                &real,
                &fake,
                w,
                lr,
            )?;
            if !bd.d.is_finite() {
                return Err(non_finite(step, batch, "discriminator loss", bd.d));
            }
        }
        if tc.d_steps_per_g == 0 {
            let s = state.discriminator.scores(&real)?;
            let f = state.discriminator.scores(&fake)?;
            bd.d = crate::losses::hinge_d_value(&s, &f)?;
        }
        let dp = state.discriminator.params().bind(&tape, false);
        let sf = state.discriminator.discriminate(&dp, &pairs.fake)?;
        let lg = hinge_g_loss(&sf)?;
        bd.g = lg.scalar_value();
        objective = objective.add(&lg.scale(w.lambda4))?;
    }
    bd.total = bd.synth + w.lambda3 * bd.d + w.lambda4 * bd.g;
    if !bd.is_finite() {
        return Err(non_finite(step, batch, "total loss", bd.total));
    }

    let grads = tape.backward(objective)?;
    let gf = state
        .generator
        .flow
        .params()
        .collect_grads(&gv.flow, &grads);
    let gh = state
        .generator
        .head
        .params()
        .collect_grads(&gv.head, &grads);
    if gf.iter().chain(&gh).any(|g| !g.is_finite()) {
        return Err(non_finite(step, batch, "generator gradient", f64::NAN));
    }
    state
        .opt_flow
        .step(state.generator.flow.params_mut(), &gf, lr);
    state
        .opt_head
        .step(state.generator.head.params_mut(), &gh, lr);
    state.step += 1;
    Ok(bd)
}

const SHUFFLE_DOMAIN: u64 = 0;
const STEP_DOMAIN: u64 = 1;

fn derived_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(2).wrapping_add(domain));
    rng
}

/// Triplet order for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, SHUFFLE_DOMAIN, epoch as u64));
    order
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub ie: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub loss_log: PathBuf,
}

/// Mean IE / PSNR / SSIM of the generator's refined output on `entries`.
pub fn evaluate_generator(g: &Generator, entries: &[TripletEntry]) -> Result<(f64, f64, f64)> {
    if entries.is_empty() {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    let (mut ie, mut psnr, mut ssim) = (0.0, 0.0, 0.0);
    for e in entries {
        let t = load_triplet(e)?;
        let out = g.interpolate(&t.i1, &t.i2)?;
        ie += evaluator::interpolation_error(&out.refined, &t.it, None)?;
        psnr += evaluator::psnr(&out.refined, &t.it, None)?;
        ssim += evaluator::ssim(&out.refined, &t.it, None)?;
    }
    let n = entries.len() as f64;
    Ok((ie / n, psnr / n, ssim / n))
}

fn load_batch_items(
    entries: &[&TripletEntry],
    cfg: &RunConfig,
    provider: Option<&RoiProvider>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FrameTriplet>> {
    entries
        .iter()
        .map(|e| {
            let mut t = load_triplet(e)?;
            if let Some(p) = provider {
                let cands = p.candidates(
                    &t.id,
                    FrameHints {
                        gt_boxes: t.rois.as_deref(),
                        frames: Some((&t.i1, &t.i2)),
                    },
                )?;
                t.rois = Some(cands);
            }
            augment(&t, cfg.train.crop, cfg.train.flip, rng)
        })
        .collect()
}

fn write_line<T: Serialize>(f: &mut fs::File, path: &Path, rec: &T) -> Result<()> {
    let line = serde_json::to_string(rec).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Open the loss log, keeping only records before `step` when resuming.
fn open_loss_log(path: &Path, step: u64) -> Result<fs::File> {
    let kept: Vec<String> = if step > 0 && path.is_file() {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut kept = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let rec: LossRecord =
                serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?;
            if rec.step < step {
                kept.push(line);
            }
        }
        kept
    } else {
        Vec::new()
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Full training run as configured; writes `config.toml`, `losses.jsonl`,
/// `eval.jsonl` and `checkpoints/` under the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut entries = index_sources(&cfg.data.sources())?;
    let holdout = entries.split_off(entries.len().saturating_sub(cfg.data.holdout));
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "no training triplets under {}",
            cfg.data.root.display()
        )));
    }
    let provider = match tc.mode {
        Mode::Roigan => Some(RoiProvider::new(
            RoiProviderConfig {
                count: tc.rois_per_image,
                ..cfg.roi.clone()
            },
            Some(&cfg.data.root),
        )?),
        _ => None,
    };
    let mut state = match &tc.resume {
        Some(p) => TrainState::load(p, cfg)?,
        None => TrainState::new(cfg)?,
    };

    let out = &cfg.output_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let resolved = cfg.to_toml();
    log::info!("resolved config:\n{resolved}");
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, &resolved).map_err(|e| Error::io(&cfg_path, e))?;
    let loss_log = out.join("losses.jsonl");
    let mut log_file = open_loss_log(&loss_log, state.step)?;
    let eval_log = out.join("eval.jsonl");

    let n = entries.len();
    let bs = tc.batch_size.min(n);
    let per_epoch = n.div_ceil(bs) as u64;
    let mut total = per_epoch * tc.epochs as u64;
    if let Some(m) = tc.max_steps {
        total = total.min(m);
    }
    log::info!(
        "training {} triplets ({} held out), {per_epoch} steps per epoch, {total} steps, {} generator parameters",
        n,
        holdout.len(),
        state.generator.param_count()
    );
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    while state.step < total {
        let step = state.step;
        let epoch = (step / per_epoch) as usize;
        let k = (step % per_epoch) as usize;
        let order = epoch_order(n, tc.seed, epoch);
        let picked: Vec<&TripletEntry> = order[k * bs..((k + 1) * bs).min(n)]
            .iter()
            .map(|&i| &entries[i])
            .collect();
        let mut rng = derived_rng(tc.seed, STEP_DOMAIN, step);
        let items = load_batch_items(&picked, cfg, provider.as_ref(), &mut rng)?;
        let batch = Batch::assemble(&items, tc.mode, provider.as_ref())?;
        let loss = train_step(&mut state, &batch, cfg, epoch, &mut rng)?;
        let rec = LossRecord {
            step,
            epoch,
            lr: lr_schedule(epoch, tc),
            loss,
        };
        write_line(&mut log_file, &loss_log, &rec)?;
        log::debug!(
            "step {step} epoch {epoch}: total {:.6} synth {:.6}",
            loss.total,
            loss.synth
        );
        records.push(rec);

        if state.step % per_epoch == 0 {
            let done = epoch + 1;
            if done.is_multiple_of(tc.checkpoint_every) || state.step == total {
                let p = ckpt_dir.join(format!("epoch_{done:04}.ckpt"));
                state.save(&p, cfg)?;
                checkpoints.push(p);
            }
            if tc.eval_every > 0 && done.is_multiple_of(tc.eval_every) && !holdout.is_empty() {
                let (ie, psnr, ssim) = evaluate_generator(&state.generator, &holdout)?;
                log::info!("epoch {done}: held-out IE {ie:.3} PSNR {psnr:.3} SSIM {ssim:.4}");
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&eval_log)
                    .map_err(|e| Error::io(&eval_log, e))?;
                write_line(
                    &mut f,
                    &eval_log,
                    &EvalRecord {
                        epoch: done,
                        step: state.step,
                        ie,
                        psnr,
                        ssim,
                    },
                )?;
            }
        }
    }
    if state.step % per_epoch != 0 {
        let p = ckpt_dir.join(format!("step_{:06}.ckpt", state.step));
        state.save(&p, cfg)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        state,
        records,
        checkpoints,
        loss_log,
    })
}
