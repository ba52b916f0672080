//! Python bindings. Images travel as flat `float` lists in NCHW order plus a
//! shape tuple, so no array library is required on either side.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use roiterp::config::RunConfig;
use roiterp::data::{load_image, save_image, write_synthetic, SyntheticConfig};
use roiterp::evaluator::{self, EvalRequest};
use roiterp::roi::{BatchRoi, RoI};
use roiterp::synthesis::Generator;
use roiterp::trainer::{self, TrainConfig};
use roiterp::{Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => {
            PyIOError::new_err(e.to_string())
        }
        Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::from_vec(&shape, data).map_err(to_py)
}

fn image(data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Tensor> {
    tensor(data, vec![1, shape.0, shape.1, shape.2])
}

/// Backward-warp an NCHW image by a `[N, 2, H, W]` flow.
#[pyfunction]
pub fn bilinear_sample(image: Vec<f64>, flow: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
    if shape.len() != 4 {
        return Err(PyValueError::new_err("shape must be (N, C, H, W)"));
    }
    let flow_shape = vec![shape[0], 2, shape[2], shape[3]];
    let out = roiterp::warping::bilinear_sample(&tensor(image, shape)?, &tensor(flow, flow_shape)?)
        .map_err(to_py)?;
    Ok(out.into_data())
}

/// Pool `(batch, x1, y1, x2, y2)` boxes into `out_h × out_w` grids.
/// Returns the flat `[R, C, out_h, out_w]` result.
#[pyfunction]
#[pyo3(signature = (feature_map, shape, boxes, out_h, out_w, samples = 1))]
pub fn roi_align(
    feature_map: Vec<f64>,
    shape: Vec<usize>,
    boxes: Vec<(usize, f64, f64, f64, f64)>,
    out_h: usize,
    out_w: usize,
    samples: usize,
) -> PyResult<Vec<f64>> {
    let rois: Vec<BatchRoi> = boxes
        .into_iter()
        .map(|(batch, x1, y1, x2, y2)| BatchRoi {
            batch,
            roi: RoI::new(x1, y1, x2, y2, 1.0),
        })
        .collect();
    let out =
        roiterp::roi::roi_align_with(&tensor(feature_map, shape)?, &rois, out_h, out_w, samples)
            .map_err(to_py)?;
    Ok(out.into_data())
}

/// `(ie, psnr, ssim)` of two `(C, H, W)` images, optionally on a mask of `H·W` booleans.
#[pyfunction]
#[pyo3(signature = (a, b, shape, mask = None))]
pub fn metrics(
    a: Vec<f64>,
    b: Vec<f64>,
    shape: (usize, usize, usize),
    mask: Option<Vec<bool>>,
) -> PyResult<(f64, f64, f64)> {
    let (a, b) = (image(a, shape)?, image(b, shape)?);
    let m = mask.as_deref();
    Ok((
        evaluator::interpolation_error(&a, &b, m).map_err(to_py)?,
        evaluator::psnr(&a, &b, m).map_err(to_py)?,
        evaluator::ssim(&a, &b, m).map_err(to_py)?,
    ))
}

/// Learning rate at `epoch` under the default step-decay schedule.
#[pyfunction]
#[pyo3(signature = (epoch, lr0 = 1e-4, decay = 0.1, every = 10, floor = 1e-8))]
pub fn lr_schedule(epoch: usize, lr0: f64, decay: f64, every: usize, floor: f64) -> f64 {
    let cfg = TrainConfig {
        lr0,
        lr_decay: decay,
        lr_decay_every: every,
        lr_floor: floor,
        ..Default::default()
    };
    trainer::lr_schedule(epoch, &cfg)
}

/// Write a synthetic dataset under `out`; returns the frame root.
#[pyfunction]
#[pyo3(signature = (out, count = 8, height = 64, width = 64, seed = 0))]
pub fn make_synthetic(
    out: PathBuf,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> PyResult<PathBuf> {
    let cfg = SyntheticConfig {
        count,
        height,
        width,
        seed,
        ..Default::default()
    };
    cfg.validate().map_err(to_py)?;
    write_synthetic(&cfg, &out).map_err(to_py)
}

/// Train from a TOML config (or defaults) with `key=value` overrides.
/// Returns `(steps, checkpoint paths, loss log path)`.
#[pyfunction]
#[pyo3(signature = (config = None, overrides = Vec::new()))]
pub fn train(
    config: Option<PathBuf>,
    overrides: Vec<String>,
) -> PyResult<(u64, Vec<PathBuf>, PathBuf)> {
    let base = match config {
        Some(p) => RunConfig::load(&p).map_err(to_py)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(&overrides).map_err(to_py)?;
    let out = trainer::train(&cfg).map_err(to_py)?;
    Ok((out.state.step, out.checkpoints, out.loss_log))
}

/// Score predicted PNG frames against ground truth; returns the metrics table as CSV.
#[pyfunction]
#[pyo3(signature = (pred, gt, masks = None, trimap_widths = Vec::new(), motion_mask = false))]
pub fn evaluate(
    pred: PathBuf,
    gt: PathBuf,
    masks: Option<PathBuf>,
    trimap_widths: Vec<usize>,
    motion_mask: bool,
) -> PyResult<String> {
    let report = evaluator::evaluate(&EvalRequest {
        pred_dir: pred,
        gt_dir: gt,
        masks_dir: masks,
        trimap_widths,
        motion_mask,
    })
    .map_err(to_py)?;
    if !report.missing.is_empty() {
        return Err(PyIOError::new_err(format!(
            "missing predictions: {}",
            report.missing.join(", ")
        )));
    }
    Ok(report.to_csv())
}

/// A trained generator loaded from a checkpoint.
#[pyclass]
struct Interpolator {
    generator: Generator,
}

#[pymethods]
impl Interpolator {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        let (generator, _) = trainer::load_generator(&checkpoint).map_err(to_py)?;
        Ok(Interpolator { generator })
    }

    /// Middle frame of two `(3, H, W)` images, flat in `[0, 1]`.
    fn interpolate(
        &self,
        frame1: Vec<f64>,
        frame2: Vec<f64>,
        shape: (usize, usize, usize),
    ) -> PyResult<Vec<f64>> {
        let r = self
            .generator
            .interpolate(&image(frame1, shape)?, &image(frame2, shape)?)
            .map_err(to_py)?;
        Ok(r.refined.into_data())
    }

    /// Read two PNG frames and write the middle frame to `out`.
    fn interpolate_files(&self, frame1: PathBuf, frame2: PathBuf, out: PathBuf) -> PyResult<()> {
        let i1 = load_image(&frame1).map_err(to_py)?;
        let i2 = load_image(&frame2).map_err(to_py)?;
        let r = self.generator.interpolate(&i1, &i2).map_err(to_py)?;
        save_image(&out, &r.refined).map_err(to_py)
    }

    fn param_count(&self) -> usize {
        self.generator.param_count()
    }
}

#[pymodule]
fn roiterp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(bilinear_sample, m)?)?;
    m.add_function(wrap_pyfunction!(roi_align, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Interpolator>()?;
    Ok(())
}
