//! Frame triplets on disk: `root/<clip>/<frame>.png`, frames ordered by file
//! name, with an optional parallel high-resolution tree holding the middle
//! frames at an integer multiple of the low-resolution size.

mod synthetic;

pub use synthetic::{
    make_synthetic, write_synthetic, ShapeState, SyntheticClip, SyntheticConfig, Texture,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::{read_boxes_sidecar, RoI};
use crate::tensor::Tensor;

/// Name of the boxes sidecar looked up in a dataset root.
pub const BOXES_FILE: &str = "boxes.jsonl";

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTriplet {
    pub id: String,
    pub i1: Tensor,
    pub it: Tensor,
    pub i2: Tensor,
    pub it_hires: Option<Tensor>,
    pub rois: Option<Vec<RoI>>,
}

impl FrameTriplet {
    pub fn validate(&self) -> Result<()> {
        self.i1.expect_same_shape(&self.it, "triplet frames")?;
        self.i1.expect_same_shape(&self.i2, "triplet frames")?;
        let (_, c, _, _) = self.it.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "triplet {}: expected RGB frames",
                self.id
            )));
        }
        if let Some(hi) = &self.it_hires {
            crate::roi::resolution_factor(&self.it, hi)?;
        }
        Ok(())
    }

    /// High-resolution ratio, 1 without a high-resolution frame.
    pub fn factor(&self) -> Result<usize> {
        match &self.it_hires {
            Some(hi) => crate::roi::resolution_factor(&self.it, hi),
            None => Ok(1),
        }
    }
}

/// One data source: a low-resolution tree plus optional high-resolution twin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub root: PathBuf,
    /// Defaults to a sibling directory named `<root>_hires` when it exists.
    #[serde(default)]
    pub hires_root: Option<PathBuf>,
    /// Window start stride within a clip.
    #[serde(default = "one")]
    pub stride: usize,
    /// At most this many triplets per clip.
    #[serde(default)]
    pub limit_per_clip: Option<usize>,
}

fn one() -> usize {
    1
}

impl DataSource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataSource {
            root: root.into(),
            hires_root: None,
            stride: 1,
            limit_per_clip: None,
        }
    }

    fn resolved_hires_root(&self) -> Option<PathBuf> {
        if let Some(h) = &self.hires_root {
            return Some(h.clone());
        }
        let name = self.root.file_name()?.to_string_lossy().into_owned();
        let sibling = self.root.with_file_name(format!("{name}_hires"));
        sibling.is_dir().then_some(sibling)
    }
}

/// One indexed triplet; images are read lazily by [`load_triplet`].
#[derive(Clone, Debug, PartialEq)]
pub struct TripletEntry {
    /// `<clip>/<middle frame stem>`, also the boxes sidecar key.
    pub id: String,
    pub frames: [PathBuf; 3],
    pub hires: Option<PathBuf>,
    pub factor: usize,
    pub boxes: Option<Vec<RoI>>,
}

fn is_frame_file(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .map(|e| e.eq_ignore_ascii_case("png"))
            .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Sliding-window triplets `(k, k+1, k+2)` over every clip of `source`.
pub fn index_dataset(source: &DataSource) -> Result<Vec<TripletEntry>> {
    if source.stride == 0 {
        return Err(Error::Config("index stride must be >= 1".into()));
    }
    let root = &source.root;
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
        ));
    }
    let hires_root = source.resolved_hires_root();
    let sidecar_path = root.join(BOXES_FILE);
    let boxes: BTreeMap<String, Vec<RoI>> = if sidecar_path.is_file() {
        read_boxes_sidecar(&sidecar_path)?
    } else {
        BTreeMap::new()
    };
    let mut out = Vec::new();
    for clip_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let clip = clip_dir.file_name().unwrap().to_string_lossy().into_owned();
        let frames: Vec<PathBuf> = sorted_entries(&clip_dir)?
            .into_iter()
            .filter(|p| is_frame_file(p))
            .collect();
        if frames.len() < 3 {
            log::warn!("clip `{clip}` has {} frames, skipping", frames.len());
            continue;
        }
        let mut taken = 0;
        for k in (0..frames.len() - 2).step_by(source.stride) {
            if source.limit_per_clip.is_some_and(|l| taken >= l) {
                break;
            }
            let mid = &frames[k + 1];
            let stem = mid.file_stem().unwrap().to_string_lossy().into_owned();
            let id = format!("{clip}/{stem}");
            let (hires, factor) = match &hires_root {
                Some(h) => {
                    let hp = h.join(&clip).join(mid.file_name().unwrap());
                    if !hp.is_file() {
                        return Err(Error::io(
                            &hp,
                            std::io::Error::new(
                                std::io::ErrorKind::NotFound,
                                "high-resolution frame missing",
                            ),
                        ));
                    }
                    let factor = dims_factor(mid, &hp)?;
                    (Some(hp), factor)
                }
                None => (None, 1),
            };
            out.push(TripletEntry {
                boxes: boxes.get(&id).cloned(),
                id,
                frames: [frames[k].clone(), mid.clone(), frames[k + 2].clone()],
                hires,
                factor,
            });
            taken += 1;
        }
    }
    Ok(out)
}

/// Index several sources in order (mixed corpora with per-root factors).
pub fn index_sources(sources: &[DataSource]) -> Result<Vec<TripletEntry>> {
    let mut out = Vec::new();
    for s in sources {
        out.extend(index_dataset(s)?);
    }
    Ok(out)
}

fn dims_factor(low: &Path, high: &Path) -> Result<usize> {
    let (lw, lh) = image::image_dimensions(low).map_err(|e| image_err(low, e))?;
    let (hw, hh) = image::image_dimensions(high).map_err(|e| image_err(high, e))?;
    if hw % lw != 0 || hh % lh != 0 || hw / lw != hh / lh || hw < lw {
        return Err(Error::format(
            high,
            format!("{hw}x{hh} is not an integer multiple of {lw}x{lh}"),
        ));
    }
    Ok((hw / lw) as usize)
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

pub fn load_triplet(entry: &TripletEntry) -> Result<FrameTriplet> {
    let t = FrameTriplet {
        id: entry.id.clone(),
        i1: load_image(&entry.frames[0])?,
        it: load_image(&entry.frames[1])?,
        i2: load_image(&entry.frames[2])?,
        it_hires: entry.hires.as_deref().map(load_image).transpose()?,
        rois: entry.boxes.clone(),
    };
    t.validate()?;
    Ok(t)
}

/// 8-bit RGB image as a `[1, 3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// Quantize to 8 bits, the inverse of [`load_image`] up to rounding.
pub fn to_rgb8(t: &Tensor) -> Result<image::RgbImage> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!(
            "expected a [1, 3, H, W] image, got {:?}",
            t.shape()
        )));
    }
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px =
            |c: usize| (t.at4(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_image(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    to_rgb8(t)?.save(path).map_err(|e| image_err(path, e))
}

/// Round-trip through 8-bit storage.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Binary mask from an image file: nonzero in any channel is object.
pub fn load_mask(path: &Path) -> Result<Vec<bool>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    Ok(img.pixels().map(|p| p.0.iter().any(|&v| v != 0)).collect())
}

/// Area-average reduction by an integer factor.
pub fn downsample(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} image is not divisible by factor {factor}"
        )));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = image.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    let row = (plane * h + oy * factor + dy) * w + ox * factor;
                    s += src[row..row + factor].iter().sum::<f64>();
                }
                dst[(plane * oh + oy) * ow + ox] = s * inv;
            }
        }
    }
    Ok(out)
}
