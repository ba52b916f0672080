//! Regions of interest: RoIAlign zoom-in, high-/low-resolution patch pairing,
//! proposal providers and the spectrally normalized instance discriminator.
//!
//! RoI coordinates use pixel *edges*: pixel `i` covers `[i, i + 1)`, so a box
//! `(0, 0, W, H)` spans a whole `W×H` image and scaling a box by the
//! resolution ratio maps it onto exactly the same physical region of the
//! high-resolution frame. Bin centers are converted to the sampling grid
//! (pixel `i` at coordinate `i`) by subtracting one half.

mod discriminator;
mod provider;
mod spectral;

pub use discriminator::{Discriminator, DiscriminatorConfig};
pub use provider::{
    read_boxes_sidecar, write_boxes_sidecar, BoxesRecord, FrameHints, RoiMode, RoiProvider,
    RoiProviderConfig, Selection,
};
pub use spectral::{
    power_iteration, power_iteration_to, sigma_estimate, spectral_norm_var, spectral_normalize,
    SIGMA_FLOOR,
};

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warping::axis_taps;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoI {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
}

impl RoI {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Self {
        RoI {
            x1,
            y1,
            x2,
            y2,
            score,
        }
    }

    /// Box covering a whole `w×h` map.
    pub fn full_image(w: usize, h: usize) -> Self {
        RoI::new(0.0, 0.0, w as f64, h as f64, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Intersection with `[0, w] × [0, h]`.
    pub fn clipped(&self, w: usize, h: usize) -> RoI {
        RoI {
            x1: self.x1.clamp(0.0, w as f64),
            y1: self.y1.clamp(0.0, h as f64),
            x2: self.x2.clamp(0.0, w as f64),
            y2: self.y2.clamp(0.0, h as f64),
            score: self.score,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }
}

/// An RoI attached to a batch element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRoi {
    pub batch: usize,
    pub roi: RoI,
}

/// Multiply every coordinate by `factor` (low-res boxes into the high-res frame).
pub fn scale_rois(rois: &[RoI], factor: f64) -> Result<Vec<RoI>> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Contract(format!(
            "RoI scale factor must be positive, got {factor}"
        )));
    }
    Ok(rois
        .iter()
        .map(|r| RoI {
            x1: r.x1 * factor,
            y1: r.y1 * factor,
            x2: r.x2 * factor,
            y2: r.y2 * factor,
            score: r.score,
        })
        .collect())
}

/// Sampling taps of one RoI: per output cell, a list of `(flat index, weight)`.
struct RoiTaps {
    batch: usize,
    // (ys, xs) per axis: sample coordinate taps
    ys: Vec<Vec<(usize, usize, f64)>>,
    xs: Vec<Vec<(usize, usize, f64)>>,
}

fn roi_taps(
    index: usize,
    br: &BatchRoi,
    n: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    samples: usize,
) -> Result<RoiTaps> {
    if br.batch >= n {
        return Err(Error::DegenerateRoi {
            index,
            reason: format!("batch index {} out of range {n}", br.batch),
        });
    }
    let r = br.roi.clipped(w, h);
    if !r.is_valid() {
        return Err(Error::DegenerateRoi {
            index,
            reason: format!("{:?} is empty after clipping to {w}x{h}", br.roi),
        });
    }
    let axis = |lo: f64, extent: f64, bins: usize, len: usize| -> Vec<Vec<(usize, usize, f64)>> {
        let bin = extent / bins as f64;
        (0..bins)
            .map(|i| {
                (0..samples)
                    .map(|s| {
                        let c = lo + (i as f64 + (s as f64 + 0.5) / samples as f64) * bin - 0.5;
                        let (i0, i1, f, _) = axis_taps(c, len);
                        (i0, i1, f)
                    })
                    .collect()
            })
            .collect()
    };
    Ok(RoiTaps {
        batch: br.batch,
        ys: axis(r.y1, r.height(), out_h, h),
        xs: axis(r.x1, r.width(), out_w, w),
    })
}

/// RoIAlign with `samples × samples` bilinear samples per bin, averaged.
/// Returns `[R, C, out_h, out_w]`.
pub fn roi_align_with(
    map: &Tensor,
    rois: &[BatchRoi],
    out_h: usize,
    out_w: usize,
    samples: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = map.dims4()?;
    if out_h == 0 || out_w == 0 || samples == 0 {
        return Err(Error::Contract(
            "RoIAlign output size and sampling must be >= 1".into(),
        ));
    }
    let norm = 1.0 / (samples * samples) as f64;
    let plane = h * w;
    let mut out = vec![0.0; rois.len() * c * out_h * out_w];
    for (ri, br) in rois.iter().enumerate() {
        let taps = roi_taps(ri, br, n, h, w, out_h, out_w, samples)?;
        for ch in 0..c {
            let src = &map.data()[(taps.batch * c + ch) * plane..(taps.batch * c + ch + 1) * plane];
            let dst = &mut out[(ri * c + ch) * out_h * out_w..(ri * c + ch + 1) * out_h * out_w];
            for (oy, ty) in taps.ys.iter().enumerate() {
                for (ox, tx) in taps.xs.iter().enumerate() {
                    let mut acc = 0.0;
                    for &(y0, y1, fy) in ty {
                        for &(x0, x1, fx) in tx {
                            acc += (1.0 - fy)
                                * ((1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1])
                                + fy * ((1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                        }
                    }
                    dst[oy * out_w + ox] = acc * norm;
                }
            }
        }
    }
    Tensor::from_vec(&[rois.len(), c, out_h, out_w], out)
}

/// RoIAlign sampling each bin once at its center.
pub fn roi_align(map: &Tensor, rois: &[BatchRoi], out_h: usize, out_w: usize) -> Result<Tensor> {
    roi_align_with(map, rois, out_h, out_w, 1)
}

/// Gradient of [`roi_align_with`] with respect to the map.
pub fn roi_align_backward(
    map_shape: &[usize],
    rois: &[BatchRoi],
    out_h: usize,
    out_w: usize,
    samples: usize,
    grad_out: &Tensor,
) -> Result<Tensor> {
    let (n, c, h, w) = (map_shape[0], map_shape[1], map_shape[2], map_shape[3]);
    let norm = 1.0 / (samples * samples) as f64;
    let plane = h * w;
    let mut gmap = vec![0.0; n * c * plane];
    for (ri, br) in rois.iter().enumerate() {
        let taps = roi_taps(ri, br, n, h, w, out_h, out_w, samples)?;
        for ch in 0..c {
            let g =
                &grad_out.data()[(ri * c + ch) * out_h * out_w..(ri * c + ch + 1) * out_h * out_w];
            let dst = &mut gmap[(taps.batch * c + ch) * plane..(taps.batch * c + ch + 1) * plane];
            for (oy, ty) in taps.ys.iter().enumerate() {
                for (ox, tx) in taps.xs.iter().enumerate() {
                    let gv = g[oy * out_w + ox] * norm;
                    if gv == 0.0 {
                        continue;
                    }
                    for &(y0, y1, fy) in ty {
                        for &(x0, x1, fx) in tx {
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(map_shape, gmap)
}

/// Differentiable RoIAlign; box coordinates are constants.
pub fn roi_align_var<'t>(
    map: &Var<'t>,
    rois: &[BatchRoi],
    out_h: usize,
    out_w: usize,
    samples: usize,
) -> Result<Var<'t>> {
    let mv = map.value();
    let value = roi_align_with(&mv, rois, out_h, out_w, samples)?;
    let shape = mv.shape().to_vec();
    let rois = rois.to_vec();
    Ok(map.tape().op(value, &[*map], move |g| {
        vec![roi_align_backward(&shape, &rois, out_h, out_w, samples, g)
            .expect("validated in forward")]
    }))
}

/// Aligned synthesized/real patches: `fake` stays on the tape, `real` is detached.
#[derive(Clone, Debug)]
pub struct PatchPairs<'t> {
    pub fake: Var<'t>,
    pub real: Tensor,
}

impl PatchPairs<'_> {
    pub fn len(&self) -> usize {
        self.real.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Integer resolution ratio between a high-res map and its low-res counterpart.
pub fn resolution_factor(low: &Tensor, high: &Tensor) -> Result<usize> {
    let (_, _, lh, lw) = low.dims4()?;
    let (_, _, hh, hw) = high.dims4()?;
    if hh % lh != 0 || hw % lw != 0 || hh / lh != hw / lw || hh < lh {
        return Err(Error::Shape(format!(
            "high-resolution frame {hh}x{hw} is not an integer multiple of {lh}x{lw}"
        )));
    }
    Ok(hh / lh)
}

/// Pool fake patches from `fake` with the original boxes and real patches from
/// `real` (the highest-resolution ground truth available) with the boxes scaled
/// by the inferred resolution factor.
pub fn make_patch_pairs<'t>(
    fake: &Var<'t>,
    real: &Tensor,
    rois: &[BatchRoi],
    out_size: usize,
    samples: usize,
) -> Result<PatchPairs<'t>> {
    let factor = resolution_factor(&fake.value(), real)? as f64;
    let scaled: Vec<BatchRoi> = rois
        .iter()
        .map(|br| {
            Ok(BatchRoi {
                batch: br.batch,
                roi: scale_rois(&[br.roi], factor)?[0],
            })
        })
        .collect::<Result<_>>()?;
    let fake_patches = roi_align_var(fake, rois, out_size, out_size, samples)?;
    let real_patches = roi_align_with(real, &scaled, out_size, out_size, samples)?;
    Ok(PatchPairs {
        fake: fake_patches,
        real: real_patches,
    })
}
