//! Moving textured rectangles over a static background.
//!
//! Each clip is a single triplet. Shapes move with constant velocity, so with
//! even velocities the middle frame is an exact integer-offset render and the
//! ground-truth flows are `∓v/2` inside each shape. All texel values are
//! multiples of 1/255 so files on disk hold exactly the in-memory frames.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_image, BOXES_FILE};
use crate::error::{Error, Result};
use crate::roi::{write_boxes_sidecar, BoxesRecord, RoI};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Flat,
    Checker,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    /// Number of clips (one triplet each).
    pub count: usize,
    pub n_shapes: usize,
    /// Inclusive side length range of the rectangles.
    pub shape_size: [usize; 2],
    /// Velocity components are drawn from `[-velocity_range, velocity_range]`,
    /// even integers only unless `allow_odd` is set.
    pub velocity_range: usize,
    pub allow_odd: bool,
    pub texture: Texture,
    pub background: Texture,
    /// Cell size of the noise texture: random colors on a grid of this
    /// spacing, bilinearly interpolated. 1 gives independent per-pixel noise.
    pub noise_cell: usize,
    /// Scale of the high-resolution middle frame.
    pub hires_factor: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            height: 64,
            width: 64,
            count: 8,
            n_shapes: 2,
            shape_size: [12, 24],
            velocity_range: 4,
            allow_odd: false,
            texture: Texture::Noise,
            background: Texture::Flat,
            noise_cell: 4,
            hires_factor: 2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.shape_size;
        if self.height == 0 || self.width == 0 || self.hires_factor == 0 || self.noise_cell == 0 {
            return Err(Error::Config(
                "synthetic canvas, hires factor and noise cell must be nonzero".into(),
            ));
        }
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "invalid shape size range {lo}..={hi}"
            )));
        }
        let travel = 2 * self.velocity_range;
        if hi + travel > self.height.min(self.width) {
            return Err(Error::Config(format!(
                "shapes up to {hi} px moving {travel} px would leave the {}x{} canvas",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// One rectangle: frame-1 position, velocity and its texture.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeState {
    pub x: f64,
    pub y: f64,
    pub w: usize,
    pub h: usize,
    pub vx: f64,
    pub vy: f64,
    /// `[3, h, w]` texels.
    texels: Vec<f64>,
}

impl ShapeState {
    /// Position at frame time `k ∈ {0, 0.5, 1}` scaled by two (0, 1, 2 frames).
    pub fn position(&self, k: f64) -> (f64, f64) {
        (self.x + k * self.vx, self.y + k * self.vy)
    }

    pub fn box_at(&self, k: f64) -> RoI {
        let (x, y) = self.position(k);
        RoI::new(x, y, x + self.w as f64, y + self.h as f64, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub id: String,
    pub frames: [Tensor; 3],
    pub hires_mid: Tensor,
    pub shapes: Vec<ShapeState>,
    /// Ground-truth boxes per frame, shape order.
    pub boxes: [Vec<RoI>; 3],
    /// Analytic middle-frame flows `[1, 2, H, W]` towards frame 1 and frame 3.
    pub flow_1t: Tensor,
    pub flow_2t: Tensor,
    /// Middle-frame pixels inside a shape whose frame-1 source shows the same shape.
    pub interior_1t: Vec<bool>,
}

const DETAIL: f64 = 15.0 / 255.0;

fn q(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

fn texture(kind: Texture, cell: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut color = || [0; 3].map(|_| q(rng.random_range(0.15..0.85)));
    match kind {
        Texture::Flat => {
            let c = color();
            (0..3)
                .flat_map(|ch| std::iter::repeat_n(c[ch], h * w))
                .collect()
        }
        Texture::Checker => {
            let (a, b) = (color(), color());
            let mut t = vec![0.0; 3 * h * w];
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        t[(ch * h + y) * w + x] = if (x / 4 + y / 4) % 2 == 0 {
                            a[ch]
                        } else {
                            b[ch]
                        };
                    }
                }
            }
            t
        }
        Texture::Noise => {
            let (gh, gw) = (h / cell + 2, w / cell + 2);
            let grid: Vec<f64> = (0..3 * gh * gw)
                .map(|_| rng.random_range(0.15..0.85))
                .collect();
            let mut t = vec![0.0; 3 * h * w];
            for ch in 0..3 {
                let g = &grid[ch * gh * gw..(ch + 1) * gh * gw];
                for y in 0..h {
                    let (gy, fy) = (y / cell, (y % cell) as f64 / cell as f64);
                    for x in 0..w {
                        let (gx, fx) = (x / cell, (x % cell) as f64 / cell as f64);
                        let v = (1.0 - fy)
                            * ((1.0 - fx) * g[gy * gw + gx] + fx * g[gy * gw + gx + 1])
                            + fy * ((1.0 - fx) * g[(gy + 1) * gw + gx]
                                + fx * g[(gy + 1) * gw + gx + 1]);
                        t[(ch * h + y) * w + x] = q(v);
                    }
                }
            }
            t
        }
    }
}

/// Upsample texels by `f` with zero-mean sub-texel detail, so area averaging
/// returns the original texels.
fn hires_texels(t: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let (hh, hw) = (h * f, w * f);
    let mut out = vec![0.0; 3 * hh * hw];
    for ch in 0..3 {
        for y in 0..hh {
            for x in 0..hw {
                let base = t[(ch * h + y / f) * w + x / f];
                let detail = if f.is_multiple_of(2) {
                    if (x % f + y % f).is_multiple_of(2) {
                        DETAIL
                    } else {
                        -DETAIL
                    }
                } else {
                    0.0
                };
                out[(ch * hh + y) * hw + x] = base + detail;
            }
        }
    }
    out
}

/// Composite layers at real-valued offsets; pixel `i` samples layer
/// coordinate `i − offset` bilinearly, with zero alpha outside the layer.
fn render(
    background: &[f64],
    layers: &[(&[f64], usize, usize, f64, f64)],
    h: usize,
    w: usize,
) -> (Tensor, Vec<Option<usize>>) {
    let mut img = background.to_vec();
    let mut top = vec![None; h * w];
    for (s, &(tex, lh, lw, ox, oy)) in layers.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 - ox, y as f64 - oy);
                let (u0, v0) = (u.floor(), v.floor());
                let (fu, fv) = (u - u0, v - v0);
                let mut alpha = 0.0;
                let mut col = [0.0; 3];
                for (dy, wy) in [(0, 1.0 - fv), (1, fv)] {
                    for (dx, wx) in [(0, 1.0 - fu), (1, fu)] {
                        let wt = wy * wx;
                        let (ty, tx) = (v0 as i64 + dy, u0 as i64 + dx);
                        if wt == 0.0 || ty < 0 || tx < 0 || ty >= lh as i64 || tx >= lw as i64 {
                            continue;
                        }
                        alpha += wt;
                        for (ch, c) in col.iter_mut().enumerate() {
                            *c += wt * tex[(ch * lh + ty as usize) * lw + tx as usize];
                        }
                    }
                }
                if alpha == 0.0 {
                    continue;
                }
                for (ch, c) in col.iter().enumerate() {
                    let i = (ch * h + y) * w + x;
                    img[i] = img[i] * (1.0 - alpha) + c;
                }
                if alpha == 1.0 {
                    top[y * w + x] = Some(s);
                }
            }
        }
    }
    (Tensor::from_vec(&[1, 3, h, w], img).expect("sized"), top)
}

fn velocity(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> f64 {
    let r = cfg.velocity_range as i64;
    if cfg.allow_odd {
        rng.random_range(-r..=r) as f64
    } else {
        let half = r / 2;
        (2 * rng.random_range(-half..=half)) as f64
    }
}

fn make_clip(cfg: &SyntheticConfig, index: usize, rng: &mut ChaCha8Rng) -> SyntheticClip {
    let (h, w, f) = (cfg.height, cfg.width, cfg.hires_factor);
    let bg = texture(cfg.background, cfg.noise_cell, h, w, rng);
    let shapes: Vec<ShapeState> = (0..cfg.n_shapes)
        .map(|_| {
            let sw = rng.random_range(cfg.shape_size[0]..=cfg.shape_size[1]);
            let sh = rng.random_range(cfg.shape_size[0]..=cfg.shape_size[1]);
            let (vx, vy) = (velocity(cfg, rng), velocity(cfg, rng));
            // all three positions stay inside the canvas
            let x_lo = (-2.0 * vx).max(0.0) as usize;
            let x_hi = w - sw - (2.0 * vx).max(0.0) as usize;
            let y_lo = (-2.0 * vy).max(0.0) as usize;
            let y_hi = h - sh - (2.0 * vy).max(0.0) as usize;
            let x = rng.random_range(x_lo..=x_hi) as f64;
            let y = rng.random_range(y_lo..=y_hi) as f64;
            let texels = texture(cfg.texture, cfg.noise_cell, sh, sw, rng);
            ShapeState {
                x,
                y,
                w: sw,
                h: sh,
                vx,
                vy,
                texels,
            }
        })
        .collect();
    let frame = |k: f64| {
        let layers: Vec<_> = shapes
            .iter()
            .map(|s| {
                let (x, y) = s.position(k);
                (s.texels.as_slice(), s.h, s.w, x, y)
            })
            .collect();
        render(&bg, &layers, h, w)
    };
    let (f0, top0) = frame(0.0);
    let (fm, topm) = frame(0.5);
    let (f2, _) = frame(1.0);

    let hi_bg = hires_texels(&bg, h, w, f);
    let hi_tex: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| hires_texels(&s.texels, s.h, s.w, f))
        .collect();
    let hi_layers: Vec<_> = shapes
        .iter()
        .zip(&hi_tex)
        .map(|(s, t)| {
            let (x, y) = s.position(0.5);
            (t.as_slice(), s.h * f, s.w * f, x * f as f64, y * f as f64)
        })
        .collect();
    let (hires_mid, _) = render(&hi_bg, &hi_layers, h * f, w * f);

    let mut flow_1t = Tensor::zeros(&[1, 2, h, w]);
    let mut flow_2t = Tensor::zeros(&[1, 2, h, w]);
    let mut interior_1t = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let Some(s) = topm[y * w + x] else { continue };
            let (vx, vy) = (shapes[s].vx, shapes[s].vy);
            let plane = h * w;
            flow_1t.data_mut()[y * w + x] = -vx / 2.0;
            flow_1t.data_mut()[plane + y * w + x] = -vy / 2.0;
            flow_2t.data_mut()[y * w + x] = vx / 2.0;
            flow_2t.data_mut()[plane + y * w + x] = vy / 2.0;
            let (sx, sy) = (x as f64 - vx / 2.0, y as f64 - vy / 2.0);
            if sx.fract() == 0.0 && sy.fract() == 0.0 && sx >= 0.0 && sy >= 0.0 {
                let (sx, sy) = (sx as usize, sy as usize);
                interior_1t[y * w + x] = sx < w && sy < h && top0[sy * w + sx] == Some(s);
            }
        }
    }
    let boxes = [0.0, 0.5, 1.0].map(|k| shapes.iter().map(|s| s.box_at(k)).collect());
    SyntheticClip {
        id: format!("clip_{index:04}"),
        frames: [f0, fm, f2],
        hires_mid,
        shapes,
        boxes,
        flow_1t,
        flow_2t,
        interior_1t,
    }
}

pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SyntheticClip>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count)
        .map(|i| make_clip(cfg, i, &mut rng))
        .collect())
}

/// Write `out/frames/<clip>/frame_{0,1,2}.png`, `out/frames/boxes.jsonl` and
/// `out/frames_hires/<clip>/frame_1.png`. Returns the dataset root.
pub fn write_synthetic(cfg: &SyntheticConfig, out: &Path) -> Result<std::path::PathBuf> {
    let clips = make_synthetic(cfg)?;
    let root = out.join("frames");
    let hires = out.join("frames_hires");
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut records = Vec::new();
    for clip in &clips {
        for (k, frame) in clip.frames.iter().enumerate() {
            save_image(&root.join(&clip.id).join(format!("frame_{k}.png")), frame)?;
            records.push(BoxesRecord {
                frame: format!("{}/frame_{k}", clip.id),
                boxes: clip.boxes[k]
                    .iter()
                    .map(|r| [r.x1, r.y1, r.x2, r.y2, r.score])
                    .collect(),
            });
        }
        save_image(&hires.join(&clip.id).join("frame_1.png"), &clip.hires_mid)?;
    }
    write_boxes_sidecar(&root.join(BOXES_FILE), &records)?;
    Ok(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{downsample, index_dataset, load_triplet, DataSource};

    fn one_square(vx: f64) -> SyntheticClip {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SyntheticConfig {
            n_shapes: 0,
            ..Default::default()
        };
        let mut clip = make_clip(&cfg, 0, &mut rng);
        clip.shapes.push(ShapeState {
            x: 10.0,
            y: 20.0,
            w: 8,
            h: 8,
            vx,
            vy: 0.0,
            texels: vec![0.5; 3 * 64],
        });
        clip
    }

    #[test]
    fn mid_box_is_arithmetic_midpoint() {
        let s = &one_square(2.0).shapes[0];
        assert_eq!(s.box_at(0.0).x1, 10.0);
        assert_eq!(s.box_at(0.5).x1, 11.0);
        assert_eq!(s.box_at(1.0).x1, 12.0);
    }

    #[test]
    fn zero_velocity_gives_identical_frames() {
        let cfg = SyntheticConfig {
            velocity_range: 0,
            count: 2,
            ..Default::default()
        };
        for c in make_synthetic(&cfg).unwrap() {
            assert_eq!(c.frames[0], c.frames[1]);
            assert_eq!(c.frames[1], c.frames[2]);
        }
    }

    #[test]
    fn flows_are_half_velocity_inside_shapes() {
        let cfg = SyntheticConfig {
            n_shapes: 1,
            count: 4,
            ..Default::default()
        };
        for c in make_synthetic(&cfg).unwrap() {
            let s = &c.shapes[0];
            let b = s.box_at(0.5);
            let (y, x) = ((b.y1 + 1.0) as usize, (b.x1 + 1.0) as usize);
            assert_eq!(c.flow_1t.at4(0, 0, y, x), -s.vx / 2.0);
            assert_eq!(c.flow_2t.at4(0, 1, y, x), s.vy / 2.0);
            assert!(c.interior_1t[y * cfg.width + x]);
        }
    }

    #[test]
    fn shapes_stay_in_frame_and_oversized_config_is_rejected() {
        let cfg = SyntheticConfig {
            count: 20,
            n_shapes: 3,
            ..Default::default()
        };
        for c in make_synthetic(&cfg).unwrap() {
            for b in c.boxes.iter().flatten() {
                assert!(
                    b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0,
                    "{b:?}"
                );
            }
        }
        let bad = SyntheticConfig {
            shape_size: [40, 60],
            ..Default::default()
        };
        assert!(matches!(make_synthetic(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn hires_downsamples_to_mid_frame() {
        for c in make_synthetic(&SyntheticConfig::default()).unwrap() {
            let d = downsample(&c.hires_mid, 2).unwrap();
            assert!(d.max_abs_diff(&c.frames[1]) < 1e-12);
        }
    }

    #[test]
    fn written_tree_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            count: 3,
            n_shapes: 3,
            ..Default::default()
        };
        let root = write_synthetic(&cfg, dir.path()).unwrap();
        let clips = make_synthetic(&cfg).unwrap();
        let idx = index_dataset(&DataSource::new(&root)).unwrap();
        assert_eq!(idx.len(), 3);
        for (e, c) in idx.iter().zip(&clips) {
            assert_eq!(e.factor, 2);
            let t = load_triplet(e).unwrap();
            assert_eq!(t.rois.as_ref().unwrap().len(), 3);
            assert_eq!(t.it, c.frames[1]);
            assert!(t.it_hires.unwrap().max_abs_diff(&c.hires_mid) < 1e-12);
        }
        let bytes = |p: &Path| fs::read(p).unwrap();
        let again = tempfile::tempdir().unwrap();
        write_synthetic(&cfg, again.path()).unwrap();
        let f = "frames/clip_0001/frame_2.png";
        assert_eq!(bytes(&dir.path().join(f)), bytes(&again.path().join(f)));
        assert_eq!(
            bytes(&dir.path().join("frames/boxes.jsonl")),
            bytes(&again.path().join("frames/boxes.jsonl"))
        );
    }
}
