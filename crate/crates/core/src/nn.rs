//! Convolution, dense and resampling layers on the tape.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on im2col scratch elements; larger outputs are processed in row bands.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn kdim(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Output rows per band so that the column buffer stays under budget.
    fn band_rows(&self) -> usize {
        let (ho, wo) = self.out_hw();
        (COL_BUDGET / (self.kdim() * wo).max(1)).clamp(1, ho)
    }

    /// Fill `cols` (`kdim × rows·wo`) for output rows `[r0, r0 + rows)`.
    fn im2col(&self, x: &[f64], r0: usize, rows: usize, cols: &mut [f64]) {
        let (_, wo) = self.out_hw();
        let pc = rows * wo;
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * pc..(row + 1) * pc];
                    for r in 0..rows {
                        let iy = ((r0 + r) as isize) * s - p + ky as isize;
                        let line = &mut dst[r * wo..(r + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            *v = if ix >= 0 && ix < self.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], r0: usize, rows: usize, dx: &mut [f64]) {
        let (_, wo) = self.out_hw();
        let pc = rows * wo;
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * pc..(row + 1) * pc];
                    for r in 0..rows {
                        let iy = ((r0 + r) as isize) * s - p + ky as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &src[r * wo..(r + 1) * wo];
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C (m×n) = alpha·A (m×k) · B (k×n) + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above and the callers' slicing keep every
    // strided access inside the provided slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Plain 2-D convolution (cross-correlation) with zero padding.
pub fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (geom, n, cout) = conv_geom(x, w, b, stride, pad)?;
    let (ho, wo) = geom.out_hw();
    let kd = geom.kdim();
    let in_len = geom.cin * geom.h * geom.w;
    let out_plane = ho * wo;
    let mut out = vec![0.0; n * cout * out_plane];
    let band = geom.band_rows();
    let mut cols = vec![0.0; kd * band * wo];
    for bi in 0..n {
        let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
        let ys = &mut out[bi * cout * out_plane..(bi + 1) * cout * out_plane];
        for (co, plane) in ys.chunks_mut(out_plane).enumerate() {
            plane.fill(b.data()[co]);
        }
        let mut r0 = 0;
        while r0 < ho {
            let rows = band.min(ho - r0);
            let pc = rows * wo;
            geom.im2col(xs, r0, rows, &mut cols[..kd * pc]);
            gemm(
                cout,
                kd,
                pc,
                w.data(),
                (kd, 1),
                &cols[..kd * pc],
                (pc, 1),
                1.0,
                &mut ys[r0 * wo..],
                (out_plane, 1),
            );
            r0 += rows;
        }
    }
    Tensor::from_vec(&[n, cout, ho, wo], out)
}

/// Gradients `(dx, dw, db)` of a convolution given the output gradient.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Tensor, Tensor, Tensor) {
    let (n, cin, h, wd) = x.dims4().expect("conv input");
    let cout = w.shape()[0];
    let k = w.shape()[2];
    let geom = ConvGeom {
        cin,
        h,
        w: wd,
        k,
        stride,
        pad,
    };
    let (ho, wo) = geom.out_hw();
    let kd = geom.kdim();
    let in_len = cin * h * wd;
    let out_plane = ho * wo;
    let mut dx = vec![0.0; if need_dx { x.numel() } else { 0 }];
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; cout];
    let band = geom.band_rows();
    let mut cols = vec![0.0; kd * band * wo];
    let mut dcols = vec![0.0; if need_dx { kd * band * wo } else { 0 }];
    let mut gband = vec![0.0; cout * band * wo];
    for bi in 0..n {
        let xs = &x.data()[bi * in_len..(bi + 1) * in_len];
        let gs = &grad_out.data()[bi * cout * out_plane..(bi + 1) * cout * out_plane];
        for (co, plane) in gs.chunks(out_plane).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
        let mut r0 = 0;
        while r0 < ho {
            let rows = band.min(ho - r0);
            let pc = rows * wo;
            geom.im2col(xs, r0, rows, &mut cols[..kd * pc]);
            for co in 0..cout {
                gband[co * pc..(co + 1) * pc]
                    .copy_from_slice(&gs[co * out_plane + r0 * wo..co * out_plane + r0 * wo + pc]);
            }
            // dW += G · colsᵀ
            gemm(
                cout,
                pc,
                kd,
                &gband[..cout * pc],
                (pc, 1),
                &cols[..kd * pc],
                (1, pc),
                1.0,
                &mut dw,
                (kd, 1),
            );
            if need_dx {
                // dcols = Wᵀ · G
                gemm(
                    kd,
                    cout,
                    pc,
                    w.data(),
                    (1, kd),
                    &gband[..cout * pc],
                    (pc, 1),
                    0.0,
                    &mut dcols[..kd * pc],
                    (pc, 1),
                );
                geom.col2im(
                    &dcols[..kd * pc],
                    r0,
                    rows,
                    &mut dx[bi * in_len..(bi + 1) * in_len],
                );
            }
            r0 += rows;
        }
    }
    (
        if need_dx {
            Tensor::from_vec(x.shape(), dx).expect("dx")
        } else {
            Tensor::zeros(x.shape())
        },
        Tensor::from_vec(w.shape(), dw).expect("dw"),
        Tensor::from_vec(&[cout], db).expect("db"),
    )
}

fn conv_geom(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(ConvGeom, usize, usize)> {
    let (n, cin, h, wd) = x.dims4()?;
    let [cout, wcin, kh, kw] = w.shape()[..] else {
        return Err(Error::Shape(format!(
            "conv weight must be rank 4, got {:?}",
            w.shape()
        )));
    };
    if wcin != cin || kh != kw {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if b.shape() != [cout] {
        return Err(Error::Shape(format!(
            "conv bias {:?}, expected [{cout}]",
            b.shape()
        )));
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "kernel {kh} stride {stride} pad {pad} does not fit {h}x{wd}"
        )));
    }
    Ok((
        ConvGeom {
            cin,
            h,
            w: wd,
            k: kh,
            stride,
            pad,
        },
        n,
        cout,
    ))
}

pub fn conv2d<'t>(
    x: &Var<'t>,
    w: &Var<'t>,
    b: &Var<'t>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    let xv = x.value();
    let wv = w.value();
    let value = conv2d_forward(&xv, &wv, &b.value(), stride, pad)?;
    let need_dx = x.requires_grad();
    Ok(x.tape().op(value, &[*x, *w, *b], move |g| {
        let (dx, dw, db) = conv2d_backward(&xv, &wv, g, stride, pad, need_dx);
        vec![dx, dw, db]
    }))
}

/// `y = x · Wᵀ + b` for `x: [N, F]`, `W: [O, F]`, `b: [O]`.
pub fn linear<'t>(x: &Var<'t>, w: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let wv = w.value();
    let (n, f) = match xv.shape()[..] {
        [n, f] => (n, f),
        _ => {
            return Err(Error::Shape(format!(
                "linear input must be [N, F], got {:?}",
                xv.shape()
            )))
        }
    };
    let o = wv.shape()[0];
    if wv.shape() != [o, f] || b.value().shape() != [o] {
        return Err(Error::Shape(format!(
            "linear weight {:?} / bias {:?} vs input {:?}",
            wv.shape(),
            b.value().shape(),
            xv.shape()
        )));
    }
    let mut y = vec![0.0; n * o];
    for row in y.chunks_mut(o) {
        row.copy_from_slice(b.value().data());
    }
    gemm(
        n,
        f,
        o,
        xv.data(),
        (f, 1),
        wv.data(),
        (1, f),
        1.0,
        &mut y,
        (o, 1),
    );
    let value = Tensor::from_vec(&[n, o], y)?;
    Ok(x.tape().op(value, &[*x, *w, *b], move |g| {
        let mut dx = vec![0.0; n * f];
        gemm(
            n,
            o,
            f,
            g.data(),
            (o, 1),
            wv.data(),
            (f, 1),
            0.0,
            &mut dx,
            (f, 1),
        );
        let mut dw = vec![0.0; o * f];
        gemm(
            o,
            n,
            f,
            g.data(),
            (1, o),
            xv.data(),
            (f, 1),
            0.0,
            &mut dw,
            (f, 1),
        );
        let mut db = vec![0.0; o];
        for row in g.data().chunks(o) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        vec![
            Tensor::from_vec(&[n, f], dx).expect("dx"),
            Tensor::from_vec(&[o, f], dw).expect("dw"),
            Tensor::from_vec(&[o], db).expect("db"),
        ]
    }))
}

/// Per-axis interpolation taps for half-pixel-aligned resizing.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of the spatial axes (half-pixel centers, edge clamped).
pub fn resize_bilinear<'t>(x: &Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize to an empty size".into()));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(*x);
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    for (p, dst) in out.chunks_mut(out_h * out_w).enumerate() {
        let src = &xv.data()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
    Ok(x.tape().op(value, &[*x], move |g| {
        let mut dx = vec![0.0; n * c * h * w];
        for (p, gsrc) in g.data().chunks(out_h * out_w).enumerate() {
            let dst = &mut dx[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = gsrc[oy * out_w + ox];
                    dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                    dst[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
        vec![Tensor::from_vec(&[n, c, h, w], dx).expect("dx")]
    }))
}

/// Parameters of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            k,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init<R: rand::Rng + ?Sized>(&self, gain: f64, rng: &mut R) -> (Tensor, Tensor) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let std = gain * (2.0 / fan_in).sqrt();
        (
            Tensor::randn(&[self.cout, self.cin, self.k, self.k], std, rng),
            Tensor::zeros(&[self.cout]),
        )
    }
}

/// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
pub fn max_pool2<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let (n, c, h, w) = xv.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::Shape(format!("cannot pool a {h}x{w} map")));
    }
    let mut out = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0usize; out.len()];
    for p in 0..n * c {
        let src = &xv.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (f64::NEG_INFINITY, 0);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > best.0 {
                        best = (src[i], i);
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                out[o] = best.0;
                arg[o] = p * h * w + best.1;
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
    let shape = xv.shape().to_vec();
    Ok(x.tape().op(value, &[*x], move |g| {
        let mut dx = Tensor::zeros(&shape);
        for (gv, &i) in g.data().iter().zip(&arg) {
            dx.data_mut()[i] += gv;
        }
        vec![dx]
    }))
}
