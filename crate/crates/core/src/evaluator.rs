//! Image quality metrics (IE, PSNR, SSIM), trimap bands and directory-level
//! evaluation.
//!
//! Masks are per-pixel `H×W` booleans applied to every channel. IE is the RMS
//! difference on the 0–255 scale; PSNR uses peak 1 on `[0, 1]` data, which is
//! the same number as peak 255 on 8-bit data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{load_image, load_mask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<(usize, usize, usize)> {
    a.expect_same_shape(b, "metric inputs")?;
    let (n, c, h, w) = a.dims4()?;
    if n != 1 {
        return Err(Error::Shape("metrics take single images".into()));
    }
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::Shape(format!(
                "mask has {} pixels, image {h}x{w}",
                m.len()
            )));
        }
        if !m.iter().any(|&v| v) {
            return Err(Error::Contract("empty evaluation mask".into()));
        }
    }
    Ok((c, h, w))
}

/// Mean squared difference over masked pixels and all channels.
fn masked_mse(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<(f64, usize)> {
    let (c, h, w) = check_pair(a, b, mask)?;
    let plane = h * w;
    let (mut s, mut n) = (0.0, 0usize);
    for ch in 0..c {
        for p in 0..plane {
            if mask.is_none_or(|m| m[p]) {
                let d = a.data()[ch * plane + p] - b.data()[ch * plane + p];
                s += d * d;
                n += 1;
            }
        }
    }
    Ok((s / n as f64, n / c))
}

/// `10·log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    let (mse, _) = masked_mse(a, b, mask)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// RMS of `255·(a − b)` over masked pixels.
pub fn interpolation_error(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    let (mse, _) = masked_mse(a, b, mask)?;
    Ok(255.0 * mse.sqrt())
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Valid-region separable filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let src = &x[y * w + ox..y * w + ox + k];
            rows[y * ow + ox] = src.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| rows[(oy + i) * ow + ox] * g[i]).sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ 1.5), per channel then averaged.
/// Only windows fully inside the image count; with a mask, only windows whose
/// center pixel is masked.
pub fn ssim(a: &Tensor, b: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    let (c, h, w) = check_pair(a, b, mask)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Shape(format!(
            "SSIM needs at least {k}x{k} images, got {h}x{w}"
        )));
    }
    let (oh, ow, r) = (h - k + 1, w - k + 1, k / 2);
    let centers: Vec<usize> = (0..oh * ow)
        .filter(|&i| mask.is_none_or(|m| m[(i / ow + r) * w + i % ow + r]))
        .collect();
    if centers.is_empty() {
        return Err(Error::Contract(
            "no SSIM window is centered inside the mask".into(),
        ));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let mu_a = filter_valid(pa, h, w, &g);
        let mu_b = filter_valid(pb, h, w, &g);
        let e_aa = filter_valid(&prod(&|x, _| x * x), h, w, &g);
        let e_bb = filter_valid(&prod(&|_, y| y * y), h, w, &g);
        let e_ab = filter_valid(&prod(&|x, y| x * y), h, w, &g);
        let mut s = 0.0;
        for &i in &centers {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / centers.len() as f64;
    }
    Ok(total / c as f64)
}

/// Object mask dilated by a square structuring element of radius `width`,
/// united with the mask itself.
#[derive(Clone, Debug, PartialEq)]
pub struct Trimap {
    pub band: Vec<bool>,
    pub width: usize,
}

pub fn make_trimap(mask: &[bool], h: usize, w: usize, width: usize) -> Result<Trimap> {
    if mask.len() != h * w {
        return Err(Error::Shape(format!(
            "mask has {} pixels, expected {h}x{w}",
            mask.len()
        )));
    }
    let r = width as i64;
    let dilate_rows = |src: &[bool]| -> Vec<bool> {
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = (x as i64 - r).max(0) as usize;
                let hi = ((x as i64 + r) as usize).min(w - 1);
                out[y * w + x] = src[y * w + lo..=y * w + hi].iter().any(|&v| v);
            }
        }
        out
    };
    let rows = dilate_rows(mask);
    let mut band = vec![false; h * w];
    for y in 0..h {
        let lo = (y as i64 - r).max(0) as usize;
        let hi = ((y as i64 + r) as usize).min(h - 1);
        for x in 0..w {
            band[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]) || mask[y * w + x];
        }
    }
    Ok(Trimap { band, width })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub frame: String,
    /// `None` for the full image (or the motion mask in motion-mask mode).
    pub width: Option<usize>,
    pub ie: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub n_pixels: usize,
    pub psnr_capped: bool,
}

pub fn metrics(
    frame: &str,
    width: Option<usize>,
    a: &Tensor,
    b: &Tensor,
    mask: Option<&[bool]>,
) -> Result<MetricsRecord> {
    let (_, n_pixels) = masked_mse(a, b, mask)?;
    let p = psnr(a, b, mask)?;
    Ok(MetricsRecord {
        frame: frame.to_string(),
        width,
        ie: interpolation_error(a, b, mask)?,
        psnr: p,
        ssim: ssim(a, b, mask)?,
        n_pixels,
        psnr_capped: p >= PSNR_CAP,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalRequest {
    pub pred_dir: PathBuf,
    pub gt_dir: PathBuf,
    /// Object masks `masks_dir/<frame id>.png`, nonzero = object.
    pub masks_dir: Option<PathBuf>,
    pub trimap_widths: Vec<usize>,
    /// Restrict the full-image row to the mask.
    pub motion_mask: bool,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    /// Per-frame rows followed by `mean` rows, one per width.
    pub rows: Vec<MetricsRecord>,
    /// Ground-truth frames without a prediction.
    pub missing: Vec<String>,
}

fn collect_pngs(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_pngs(root, &p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let rel = p.strip_prefix(root).expect("under root").with_extension("");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Frame ids (relative paths without extension) of every PNG under `dir`.
pub fn frame_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ));
    }
    let mut out = Vec::new();
    collect_pngs(dir, dir, &mut out)?;
    Ok(out)
}

pub fn evaluate(req: &EvalRequest) -> Result<EvalReport> {
    if (!req.trimap_widths.is_empty() || req.motion_mask) && req.masks_dir.is_none() {
        return Err(Error::Config(
            "trimap and motion-mask evaluation need a mask directory".into(),
        ));
    }
    let mut report = EvalReport::default();
    let mut widths: Vec<Option<usize>> = vec![None];
    widths.extend(req.trimap_widths.iter().map(|&w| Some(w)));
    for id in frame_ids(&req.gt_dir)? {
        let pred_path = req.pred_dir.join(format!("{id}.png"));
        if !pred_path.is_file() {
            report.missing.push(id);
            continue;
        }
        let gt = load_image(&req.gt_dir.join(format!("{id}.png")))?;
        let pred = load_image(&pred_path)?;
        let (_, _, h, w) = gt.dims4()?;
        let mask = match &req.masks_dir {
            Some(d) => Some(load_mask(&d.join(format!("{id}.png")))?),
            None => None,
        };
        for &width in &widths {
            let region = match (width, &mask) {
                (None, Some(m)) if req.motion_mask => Some(m.clone()),
                (None, _) => None,
                (Some(wd), Some(m)) => Some(make_trimap(m, h, w, wd)?.band),
                (Some(_), None) => unreachable!("checked above"),
            };
            if region.as_ref().is_some_and(|r| !r.iter().any(|&v| v)) {
                log::warn!("frame `{id}`: empty mask, skipping width {width:?}");
                continue;
            }
            report
                .rows
                .push(metrics(&id, width, &pred, &gt, region.as_deref())?);
        }
    }
    for &width in &widths {
        let rows: Vec<&MetricsRecord> = report.rows.iter().filter(|r| r.width == width).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&MetricsRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        report.rows.push(MetricsRecord {
            frame: "mean".into(),
            width,
            ie: mean(|r| r.ie),
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            n_pixels: rows.iter().map(|r| r.n_pixels).sum(),
            psnr_capped: rows.iter().all(|r| r.psnr_capped),
        });
    }
    Ok(report)
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,width,ie,psnr,ssim,n_pixels\n");
        for r in &self.rows {
            let width = r.width.map_or("full".to_string(), |w| w.to_string());
            writeln!(
                s,
                "{},{width},{},{},{},{}",
                r.frame, r.ie, r.psnr, r.ssim, r.n_pixels
            )
            .unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{:>8} {:>10} {:>10} {:>8}\n", "width", "IE", "PSNR", "SSIM");
        for r in self.rows.iter().filter(|r| r.frame == "mean") {
            let width = r.width.map_or("full".to_string(), |w| w.to_string());
            writeln!(
                s,
                "{width:>8} {:>10.4} {:>10.4} {:>8.5}",
                r.ie, r.psnr, r.ssim
            )
            .unwrap();
        }
        if !self.missing.is_empty() {
            writeln!(s, "missing predictions: {}", self.missing.join(", ")).unwrap();
        }
        s
    }
}
