//! Backward bilinear warping and two-stream blending.
//!
//! Output pixel `(x, y)` samples the source at `(x + u, y + v)` where `(u, v)`
//! are the two flow channels. Pixel `(i, j)` sits at continuous coordinate
//! `(i, j)`; sample coordinates outside the image are clamped to the border,
//! and the flow gradient is zero along a clamped axis.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interpolation taps along one axis: `(i0, i1, frac, inside)`.
#[inline]
pub(crate) fn axis_taps(s: f64, len: usize) -> (usize, usize, f64, bool) {
    let max = (len - 1) as f64;
    let inside = (0.0..=max).contains(&s);
    let s = s.clamp(0.0, max);
    if len == 1 {
        return (0, 0, 0.0, false);
    }
    let i0 = (s.floor() as usize).min(len - 2);
    (i0, i0 + 1, s - i0 as f64, inside)
}

fn check_pair(input: &Tensor, flow: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (fn_, fc, fh, fw) = flow.dims4()?;
    if (fn_, fc, fh, fw) != (n, 2, h, w) {
        return Err(Error::Shape(format!(
            "flow {:?} does not match input {:?} (expected [{n}, 2, {h}, {w}])",
            flow.shape(),
            input.shape()
        )));
    }
    flow.expect_finite("flow")?;
    Ok((n, c, h, w))
}

/// `g(I, f)`: sample `input` at every pixel displaced by `flow`.
pub fn bilinear_sample(input: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = check_pair(input, flow)?;
    let plane = h * w;
    let mut out = vec![0.0; input.numel()];
    for b in 0..n {
        let fl = &flow.data()[b * 2 * plane..(b + 1) * 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (x0, x1, fx, _) = axis_taps(x as f64 + fl[p], w);
                let (y0, y1, fy, _) = axis_taps(y as f64 + fl[plane + p], h);
                let (w00, w01) = ((1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx);
                let (w10, w11) = (fy * (1.0 - fx), fy * fx);
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let src = &input.data()[base..base + plane];
                    out[base + p] = w00 * src[y0 * w + x0]
                        + w01 * src[y0 * w + x1]
                        + w10 * src[y1 * w + x0]
                        + w11 * src[y1 * w + x1];
                }
            }
        }
    }
    Tensor::from_vec(input.shape(), out)
}

/// Gradients of `bilinear_sample` with respect to `(input, flow)`.
pub fn bilinear_sample_backward(
    input: &Tensor,
    flow: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let (n, c, h, w) = input.dims4().expect("input");
    let plane = h * w;
    let mut gin = vec![0.0; input.numel()];
    let mut gflow = vec![0.0; flow.numel()];
    for b in 0..n {
        let fl = &flow.data()[b * 2 * plane..(b + 1) * 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (x0, x1, fx, in_x) = axis_taps(x as f64 + fl[p], w);
                let (y0, y1, fy, in_y) = axis_taps(y as f64 + fl[plane + p], h);
                let (mut du, mut dv) = (0.0, 0.0);
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let g = grad_out.data()[base + p];
                    if g == 0.0 {
                        continue;
                    }
                    let src = &input.data()[base..base + plane];
                    let (v00, v01) = (src[y0 * w + x0], src[y0 * w + x1]);
                    let (v10, v11) = (src[y1 * w + x0], src[y1 * w + x1]);
                    let dst = &mut gin[base..base + plane];
                    dst[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dst[y0 * w + x1] += g * (1.0 - fy) * fx;
                    dst[y1 * w + x0] += g * fy * (1.0 - fx);
                    dst[y1 * w + x1] += g * fy * fx;
                    du += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                    dv += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                }
                let gf = &mut gflow[b * 2 * plane..(b + 1) * 2 * plane];
                if in_x {
                    gf[p] = du;
                }
                if in_y {
                    gf[plane + p] = dv;
                }
            }
        }
    }
    (
        Tensor::from_vec(input.shape(), gin).expect("gin"),
        Tensor::from_vec(flow.shape(), gflow).expect("gflow"),
    )
}

fn check_mask(mask: &Tensor, like: &Tensor) -> Result<()> {
    let (n, _, h, w) = like.dims4()?;
    if mask.dims4()? != (n, 1, h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match {:?}",
            mask.shape(),
            like.shape()
        )));
    }
    if mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Contract("blend mask outside [0, 1]".into()));
    }
    Ok(())
}

/// `mask ⊙ a + (1 − mask) ⊙ b`, with a single-channel mask broadcast over channels.
pub fn blend(mask: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_same_shape(b, "blend")?;
    check_mask(mask, a)?;
    let (n, c, h, w) = a.dims4()?;
    let plane = h * w;
    let mut out = vec![0.0; a.numel()];
    for bi in 0..n {
        let m = &mask.data()[bi * plane..(bi + 1) * plane];
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            for p in 0..plane {
                out[base + p] = m[p] * a.data()[base + p] + (1.0 - m[p]) * b.data()[base + p];
            }
        }
    }
    Tensor::from_vec(a.shape(), out)
}

/// Warp both streams to the target time and blend them.
pub fn blend_warp(
    a: &Tensor,
    b: &Tensor,
    flow_a: &Tensor,
    flow_b: &Tensor,
    mask: &Tensor,
) -> Result<Tensor> {
    a.expect_same_shape(b, "blend_warp inputs")?;
    let wa = bilinear_sample(a, flow_a)?;
    let wb = bilinear_sample(b, flow_b)?;
    blend(mask, &wa, &wb)
}

/// Differentiable [`bilinear_sample`].
pub fn warp<'t>(input: &Var<'t>, flow: &Var<'t>) -> Result<Var<'t>> {
    let iv = input.value();
    let fv = flow.value();
    let value = bilinear_sample(&iv, &fv)?;
    Ok(input.tape().op(value, &[*input, *flow], move |g| {
        let (gi, gf) = bilinear_sample_backward(&iv, &fv, g);
        vec![gi, gf]
    }))
}

/// Differentiable [`blend`]. The mask gradient is `Σ_c g ⊙ (a − b)`.
pub fn blend_var<'t>(mask: &Var<'t>, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let (mv, av, bv) = (mask.value(), a.value(), b.value());
    let value = blend(&mv, &av, &bv)?;
    let (n, c, h, w) = av.dims4()?;
    Ok(mask.tape().op(value, &[*mask, *a, *b], move |g| {
        let plane = h * w;
        let mut gm = vec![0.0; n * plane];
        let mut ga = vec![0.0; av.numel()];
        let mut gb = vec![0.0; av.numel()];
        for bi in 0..n {
            let m = &mv.data()[bi * plane..(bi + 1) * plane];
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                for p in 0..plane {
                    let gv = g.data()[base + p];
                    gm[bi * plane + p] += gv * (av.data()[base + p] - bv.data()[base + p]);
                    ga[base + p] = gv * m[p];
                    gb[base + p] = gv * (1.0 - m[p]);
                }
            }
        }
        vec![
            Tensor::from_vec(mv.shape(), gm).expect("gm"),
            Tensor::from_vec(av.shape(), ga).expect("ga"),
            Tensor::from_vec(av.shape(), gb).expect("gb"),
        ]
    }))
}

/// Differentiable [`blend_warp`]; used for both images and feature maps.
pub fn blend_warp_var<'t>(
    a: &Var<'t>,
    b: &Var<'t>,
    flow_a: &Var<'t>,
    flow_b: &Var<'t>,
    mask: &Var<'t>,
) -> Result<Var<'t>> {
    a.value()
        .expect_same_shape(&b.value(), "blend_warp inputs")?;
    let wa = warp(a, flow_a)?;
    let wb = warp(b, flow_b)?;
    blend_var(mask, &wa, &wb)
}
