//! Pluggable region proposals.
//!
//! Boxes sidecar format: one JSON object per line,
//! `{"frame": "<clip>/<frame stem>", "boxes": [[x1, y1, x2, y2, score], ...]}`,
//! coordinates in low-resolution pixel-edge units.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RoI;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoiMode {
    BoxesFile,
    GroundTruthBoxes,
    MotionBlob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    TopK,
    ScoreThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiProviderConfig {
    pub mode: RoiMode,
    /// Set by the trainer from `rois_per_image`.
    #[serde(skip)]
    pub count: usize,
    pub selection: Selection,
    pub score_threshold: f64,
    /// Sidecar for `boxes-file` mode; defaults to `<dataset root>/boxes.jsonl`.
    pub boxes_file: Option<PathBuf>,
    /// Per-pixel absolute difference above which a pixel counts as moving.
    pub motion_threshold: f64,
    /// Blobs whose boxes are closer than this many pixels are merged.
    pub merge_gap: f64,
    pub min_blob_area: usize,
}

impl Default for RoiProviderConfig {
    fn default() -> Self {
        RoiProviderConfig {
            mode: RoiMode::GroundTruthBoxes,
            count: 16,
            selection: Selection::TopK,
            score_threshold: 0.5,
            boxes_file: None,
            motion_threshold: 0.02,
            merge_gap: 2.0,
            min_blob_area: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxesRecord {
    pub frame: String,
    pub boxes: Vec<[f64; 5]>,
}

pub fn read_boxes_sidecar(path: &Path) -> Result<BTreeMap<String, Vec<RoI>>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BoxesRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        let rois = rec
            .boxes
            .iter()
            .map(|b| RoI::new(b[0], b[1], b[2], b[3], b[4]))
            .collect();
        out.insert(rec.frame, rois);
    }
    Ok(out)
}

pub fn write_boxes_sidecar(path: &Path, records: &[BoxesRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in records {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Per-frame side information a provider may draw on.
#[derive(Clone, Copy, Default)]
pub struct FrameHints<'a> {
    pub gt_boxes: Option<&'a [RoI]>,
    /// The two input frames, `[1, C, H, W]` each.
    pub frames: Option<(&'a Tensor, &'a Tensor)>,
}

#[derive(Clone, Debug)]
pub struct RoiProvider {
    config: RoiProviderConfig,
    sidecar: BTreeMap<String, Vec<RoI>>,
}

impl RoiProvider {
    /// `dataset_root` locates the default sidecar in `boxes-file` mode.
    pub fn new(config: RoiProviderConfig, dataset_root: Option<&Path>) -> Result<Self> {
        if config.count == 0 {
            return Err(Error::Config("RoI count must be >= 1".into()));
        }
        let sidecar = if config.mode == RoiMode::BoxesFile {
            let path = config
                .boxes_file
                .clone()
                .or_else(|| dataset_root.map(|r| r.join("boxes.jsonl")))
                .ok_or_else(|| Error::Config("boxes-file mode needs a sidecar path".into()))?;
            if !path.exists() {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "boxes sidecar not found"),
                ));
            }
            read_boxes_sidecar(&path)?
        } else {
            BTreeMap::new()
        };
        Ok(RoiProvider { config, sidecar })
    }

    pub fn config(&self) -> &RoiProviderConfig {
        &self.config
    }

    /// Proposals for one frame of size `w×h`. Never empty: when nothing is
    /// available a single full-image box is used.
    pub fn propose(
        &self,
        frame_id: &str,
        w: usize,
        h: usize,
        hints: FrameHints<'_>,
    ) -> Result<Vec<RoI>> {
        let cands = self.candidates(frame_id, hints)?;
        Ok(self.select(frame_id, cands, w, h))
    }

    /// Raw boxes before clipping and selection.
    pub fn candidates(&self, frame_id: &str, hints: FrameHints<'_>) -> Result<Vec<RoI>> {
        Ok(match self.config.mode {
            RoiMode::BoxesFile => self.sidecar.get(frame_id).cloned().unwrap_or_default(),
            RoiMode::GroundTruthBoxes => hints.gt_boxes.map(<[RoI]>::to_vec).unwrap_or_default(),
            RoiMode::MotionBlob => match hints.frames {
                Some((a, b)) => motion_blobs(a, b, &self.config)?,
                None => Vec::new(),
            },
        })
    }

    /// Clip to the frame, drop degenerate boxes, rank by score and apply the
    /// selection rule.
    pub fn select(&self, frame_id: &str, raw: Vec<RoI>, w: usize, h: usize) -> Vec<RoI> {
        let mut cands: Vec<RoI> = raw
            .into_iter()
            .map(|r| r.clipped(w, h))
            .filter(RoI::is_valid)
            .collect();
        // stable sort keeps file order among equal scores
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        if self.config.selection == Selection::ScoreThreshold {
            cands.retain(|r| r.score >= self.config.score_threshold);
        }
        if cands.is_empty() {
            log::warn!("no proposals for frame `{frame_id}`, using the full image");
            cands.push(RoI::full_image(w, h));
        }
        match self.config.selection {
            Selection::TopK => cands
                .iter()
                .cycle()
                .take(self.config.count)
                .copied()
                .collect(),
            Selection::ScoreThreshold => cands,
        }
    }
}

/// Bounding boxes of connected regions where the two frames differ, with
/// nearby regions merged. Score is the region's pixel count.
pub fn motion_blobs(a: &Tensor, b: &Tensor, cfg: &RoiProviderConfig) -> Result<Vec<RoI>> {
    a.expect_same_shape(b, "motion blobs")?;
    let (_, c, h, w) = a.dims4()?;
    let plane = h * w;
    let moving: Vec<bool> = (0..plane)
        .map(|p| {
            (0..c).any(|ch| {
                (a.data()[ch * plane + p] - b.data()[ch * plane + p]).abs() > cfg.motion_threshold
            })
        })
        .collect();
    let mut label = vec![usize::MAX; plane];
    let mut blobs: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
    for start in 0..plane {
        if !moving[start] || label[start] != usize::MAX {
            continue;
        }
        let id = blobs.len();
        let (mut x0, mut y0, mut x1, mut y1, mut count) = (w, h, 0, 0, 0);
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            count += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if moving[q] && label[q] == usize::MAX {
                        label[q] = id;
                        queue.push_back(q);
                    }
                }
            }
        }
        blobs.push((x0, y0, x1, y1, count));
    }
    let mut boxes: Vec<RoI> = blobs
        .into_iter()
        .filter(|b| b.4 >= cfg.min_blob_area)
        .map(|(x0, y0, x1, y1, n)| RoI::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64, n as f64))
        .collect();
    // merge until no two boxes are within the gap
    loop {
        let mut merged = false;
        'outer: for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                let (p, q) = (boxes[i], boxes[j]);
                let gap_x = (q.x1 - p.x2).max(p.x1 - q.x2);
                let gap_y = (q.y1 - p.y2).max(p.y1 - q.y2);
                if gap_x <= cfg.merge_gap && gap_y <= cfg.merge_gap {
                    boxes[i] = RoI::new(
                        p.x1.min(q.x1),
                        p.y1.min(q.y1),
                        p.x2.max(q.x2),
                        p.y2.max(q.y2),
                        p.score + q.score,
                    );
                    boxes.remove(j);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    Ok(boxes)
}
