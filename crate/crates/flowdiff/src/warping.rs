//! Differentiable geometric kernels: backward bilinear warping, flow
//! resizing with value rescaling, and the mask/residual blend.
//!
//! Flow fields store per-pixel displacements in pixels *at the field's own
//! resolution*: channel 0 is the horizontal displacement `u` (positive
//! rightward), channel 1 the vertical displacement `v` (positive
//! downward). `backward_warp` samples the source at `(x + u, y + v)`;
//! coordinates outside the frame clamp to the border.
//!
//! The raw kernels here are shared with the autograd ops, so the gradient
//! path through warping is the same code the public API runs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backward flow from a target frame to a source frame, `[2, h, w]` with
/// displacements in pixels at the field's own resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Tensor,
}

impl FlowField {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 || data.shape()[0] != 2 {
            return Err(Error::invalid(format!(
                "flow field must be [2, h, w], got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::invalid("flow field contains non-finite values"));
        }
        Ok(FlowField { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            data: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn constant(h: usize, w: usize, u: f32, v: f32) -> Self {
        let mut t = Tensor::zeros(&[2, h, w]);
        t.data_mut()[..h * w].fill(u);
        t.data_mut()[h * w..].fill(v);
        FlowField { data: t }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn uv(&self, y: usize, x: usize) -> (f32, f32) {
        let (_, h, w) = self.data.dims3();
        assert!(y < h && x < w);
        (
            self.data.data()[y * w + x],
            self.data.data()[h * w + y * w + x],
        )
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Negated field (the opposite displacement at every pixel).
    pub fn negated(&self) -> Self {
        FlowField {
            data: self.data.scale(-1.0),
        }
    }
}

/// Bilinear backward warp of `src` by `flow`.
///
/// `src` is `[n, c, h, w]` (or `[c, h, w]`, treated as one sample) and
/// `flow` is `[n, 2, h, w]` at the same resolution. Differentiable with
/// respect to both inputs via the autograd op.
pub fn backward_warp(src: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (src4, squeeze) = lift_batch(src)?;
    let (flow4, _) = lift_batch(flow)?;
    let (n, _, h, w) = src4.dims4();
    let (fn_, fc, fh, fw) = flow4.dims4();
    if fc != 2 {
        return Err(Error::invalid(format!(
            "flow must have 2 channels, got {fc}"
        )));
    }
    if fn_ != n || fh != h || fw != w {
        return Err(Error::invalid(format!(
            "flow resolution {fn_}x{fh}x{fw} does not match source {n}x{h}x{w}"
        )));
    }
    let out = warp_forward(&src4, &flow4);
    Ok(if squeeze { drop_batch(out) } else { out })
}

/// Bilinear spatial resampling of a flow field with value rescaling:
/// `u` is scaled by `out_w / in_w` and `v` by `out_h / in_h`, so the field
/// keeps describing the same motion in its own pixel units.
pub fn resize_flow(flow: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_flow target dims must be positive"));
    }
    let (flow4, squeeze) = lift_batch(flow)?;
    let (_, c, h, w) = flow4.dims4();
    if c != 2 {
        return Err(Error::invalid(format!(
            "flow must have 2 channels, got {c}"
        )));
    }
    let mut out = resize_bilinear(&flow4, out_h, out_w);
    let su = out_w as f32 / w as f32;
    let sv = out_h as f32 / h as f32;
    scale_channels_inplace(&mut out, &[su, sv]);
    Ok(if squeeze { drop_batch(out) } else { out })
}

/// `mask ⊙ w0 + (1 − mask) ⊙ w1 + residual`.
///
/// `mask` is `[n, 1, h, w]` broadcast across the color channels of the two
/// warped inputs. No clamping happens here; final images clamp to `[0, 1]`
/// only at emission time so the loss path stays smooth.
pub fn blend(w0: &Tensor, w1: &Tensor, mask: &Tensor, residual: &Tensor) -> Result<Tensor> {
    let (a, squeeze) = lift_batch(w0)?;
    let (b, _) = lift_batch(w1)?;
    let (m, _) = lift_batch(mask)?;
    let (r, _) = lift_batch(residual)?;
    let (n, c, h, w) = a.dims4();
    b.expect_shape(&[n, c, h, w], "blend w1")?;
    r.expect_shape(&[n, c, h, w], "blend residual")?;
    m.expect_shape(&[n, 1, h, w], "blend mask")?;
    let out = blend_forward(&a, &b, &m, &r);
    Ok(if squeeze { drop_batch(out) } else { out })
}

fn lift_batch(t: &Tensor) -> Result<(Tensor, bool)> {
    match t.rank() {
        4 => Ok((t.clone(), false)),
        3 => {
            let (c, h, w) = t.dims3();
            Ok((t.clone().reshaped(&[1, c, h, w]), true))
        }
        r => Err(Error::invalid(format!(
            "expected rank 3 or 4 tensor, got rank {r}"
        ))),
    }
}

fn drop_batch(t: Tensor) -> Tensor {
    let (n, c, h, w) = t.dims4();
    assert_eq!(n, 1);
    t.reshaped(&[c, h, w])
}

// --- raw kernels (shared with autograd ops) ---

pub(crate) fn warp_forward(src: &Tensor, flow: &Tensor) -> Tensor {
    let (n, c, h, w) = src.dims4();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let sd = src.data();
    let fd = flow.data();
    let od = out.data_mut();
    let plane = h * w;
    for ni in 0..n {
        let fbase = ni * 2 * plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let u = fd[fbase + p];
                let v = fd[fbase + plane + p];
                let (x0, x1, fx) = sample_axis(x as f32 + u, w);
                let (y0, y1, fy) = sample_axis(y as f32 + v, h);
                let w00 = (1.0 - fy) * (1.0 - fx);
                let w01 = (1.0 - fy) * fx;
                let w10 = fy * (1.0 - fx);
                let w11 = fy * fx;
                for ci in 0..c {
                    let sb = (ni * c + ci) * plane;
                    od[(ni * c + ci) * plane + p] = w00 * sd[sb + y0 * w + x0]
                        + w01 * sd[sb + y0 * w + x1]
                        + w10 * sd[sb + y1 * w + x0]
                        + w11 * sd[sb + y1 * w + x1];
                }
            }
        }
    }
    out
}

pub(crate) fn warp_backward(
    src: &Tensor,
    flow: &Tensor,
    grad: &Tensor,
    need_src: bool,
    need_flow: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, w) = src.dims4();
    let sd = src.data();
    let fd = flow.data();
    let gd = grad.data();
    let plane = h * w;
    let mut dsrc = need_src.then(|| Tensor::zeros(&[n, c, h, w]));
    let mut dflow = need_flow.then(|| Tensor::zeros(&[n, 2, h, w]));
    for ni in 0..n {
        let fbase = ni * 2 * plane;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let u = fd[fbase + p];
                let v = fd[fbase + plane + p];
                let xs = x as f32 + u;
                let ys = y as f32 + v;
                let (x0, x1, fx) = sample_axis(xs, w);
                let (y0, y1, fy) = sample_axis(ys, h);
                let x_open = xs > 0.0 && xs < (w - 1) as f32;
                let y_open = ys > 0.0 && ys < (h - 1) as f32;
                let mut du = 0.0;
                let mut dv = 0.0;
                for ci in 0..c {
                    let sb = (ni * c + ci) * plane;
                    let g = gd[sb + p];
                    if g == 0.0 {
                        continue;
                    }
                    let s00 = sd[sb + y0 * w + x0];
                    let s01 = sd[sb + y0 * w + x1];
                    let s10 = sd[sb + y1 * w + x0];
                    let s11 = sd[sb + y1 * w + x1];
                    if let Some(ds) = dsrc.as_mut() {
                        let dd = ds.data_mut();
                        dd[sb + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                        dd[sb + y0 * w + x1] += g * (1.0 - fy) * fx;
                        dd[sb + y1 * w + x0] += g * fy * (1.0 - fx);
                        dd[sb + y1 * w + x1] += g * fy * fx;
                    }
                    if x_open {
                        du += g * ((1.0 - fy) * (s01 - s00) + fy * (s11 - s10));
                    }
                    if y_open {
                        dv += g * ((1.0 - fx) * (s10 - s00) + fx * (s11 - s01));
                    }
                }
                if let Some(df) = dflow.as_mut() {
                    let dd = df.data_mut();
                    dd[fbase + p] = du;
                    dd[fbase + plane + p] = dv;
                }
            }
        }
    }
    (dsrc, dflow)
}

/// Clamp a sample coordinate to the frame and split into the two nearest
/// grid columns plus the interpolation fraction.
#[inline]
fn sample_axis(coord: f32, extent: usize) -> (usize, usize, f32) {
    let max = (extent - 1) as f32;
    let c = coord.clamp(0.0, max);
    let i0 = c.floor();
    let frac = c - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, frac)
}

/// Bilinear resize in half-pixel-center convention, border clamped.
pub(crate) fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xd = x.data();
    let od = out.data_mut();
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for oy in 0..oh {
        let (y0, y1, fy) = resize_axis(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = resize_axis(ox, sx, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for nc in 0..n * c {
                let sb = nc * h * w;
                od[nc * oh * ow + oy * ow + ox] = w00 * xd[sb + y0 * w + x0]
                    + w01 * xd[sb + y0 * w + x1]
                    + w10 * xd[sb + y1 * w + x0]
                    + w11 * xd[sb + y1 * w + x1];
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward(
    in_shape: &[usize],
    grad: &Tensor,
) -> Tensor {
    let (n, c, oh, ow) = grad.dims4();
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let gd = grad.data();
    let dd = dx.data_mut();
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for oy in 0..oh {
        let (y0, y1, fy) = resize_axis(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = resize_axis(ox, sx, w);
            let w00 = (1.0 - fy) * (1.0 - fx);
            let w01 = (1.0 - fy) * fx;
            let w10 = fy * (1.0 - fx);
            let w11 = fy * fx;
            for nc in 0..n * c {
                let g = gd[nc * oh * ow + oy * ow + ox];
                let sb = nc * h * w;
                dd[sb + y0 * w + x0] += g * w00;
                dd[sb + y0 * w + x1] += g * w01;
                dd[sb + y1 * w + x0] += g * w10;
                dd[sb + y1 * w + x1] += g * w11;
            }
        }
    }
    dx
}

#[inline]
fn resize_axis(out_i: usize, scale: f32, extent: usize) -> (usize, usize, f32) {
    let coord = (out_i as f32 + 0.5) * scale - 0.5;
    let max = (extent - 1) as f32;
    let c = coord.clamp(0.0, max);
    let i0 = c.floor();
    let frac = c - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, frac)
}

pub(crate) fn scale_channels_inplace(x: &mut Tensor, scales: &[f32]) {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c, scales.len());
    let d = x.data_mut();
    let plane = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let s = scales[ci];
            for v in &mut d[base..base + plane] {
                *v *= s;
            }
        }
    }
}

pub(crate) fn blend_forward(w0: &Tensor, w1: &Tensor, mask: &Tensor, res: &Tensor) -> Tensor {
    let (n, c, h, w) = w0.dims4();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let a = w0.data();
    let b = w1.data();
    let m = mask.data();
    let r = res.data();
    let o = out.data_mut();
    let plane = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mbase = ni * plane;
            for p in 0..plane {
                let mv = m[mbase + p];
                o[base + p] = mv * a[base + p] + (1.0 - mv) * b[base + p] + r[base + p];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_image(c: usize, h: usize, w: usize) -> Tensor {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push((ci * 100 + y * w + x) as f32 * 0.01);
                }
            }
        }
        Tensor::from_vec(&[c, h, w], data)
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = ramp_image(3, 6, 7);
        let flow = Tensor::zeros(&[2, 6, 7]);
        let out = backward_warp(&img, &flow).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn unit_flow_shifts_left_with_clamped_last_column() {
        // u = 1 everywhere: output pixel (y, x) reads src at (y, x + 1),
        // so the image shifts left by one column; the last column clamps.
        let img = ramp_image(1, 4, 5);
        let mut flow = Tensor::zeros(&[2, 4, 5]);
        for p in 0..20 {
            flow.data_mut()[p] = 1.0;
        }
        let out = backward_warp(&img, &flow).unwrap();
        let (_, h, w) = img.dims3();
        for y in 0..h {
            for x in 0..w {
                let sx = (x + 1).min(w - 1);
                let expect = img.data()[y * w + sx];
                assert_eq!(out.data()[y * w + x], expect, "pixel ({y},{x})");
            }
        }
    }

    #[test]
    fn constant_image_survives_any_flow() {
        let img = Tensor::filled(&[3, 8, 8], 0.42);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flow = Tensor::randn(&[2, 8, 8], &mut rng).scale(3.0);
        let out = backward_warp(&img, &flow).unwrap();
        for &v in out.data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_rejects_resolution_mismatch() {
        let img = Tensor::zeros(&[3, 8, 8]);
        let flow = Tensor::zeros(&[2, 4, 4]);
        assert!(backward_warp(&img, &flow).is_err());
    }

    #[test]
    fn warp_is_linear_in_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[2, 6, 6], &mut rng);
        let b = Tensor::randn(&[2, 6, 6], &mut rng);
        let flow = Tensor::randn(&[2, 6, 6], &mut rng).scale(1.7);
        let lhs = backward_warp(&a.scale(0.3).add(&b.scale(-1.2)), &flow).unwrap();
        let rhs = backward_warp(&a, &flow)
            .unwrap()
            .scale(0.3)
            .add(&backward_warp(&b, &flow).unwrap().scale(-1.2));
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn resize_flow_rescales_constant_field() {
        let mut flow = Tensor::zeros(&[2, 8, 8]);
        for p in 0..64 {
            flow.data_mut()[p] = 4.0; // u
            flow.data_mut()[64 + p] = 2.0; // v
        }
        let down = resize_flow(&flow, 4, 4).unwrap();
        for p in 0..16 {
            assert!((down.data()[p] - 2.0).abs() < 1e-6);
            assert!((down.data()[16 + p] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_flow_identity_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flow = Tensor::randn(&[2, 5, 9], &mut rng);
        let same = resize_flow(&flow, 5, 9).unwrap();
        for (a, b) in flow.data().iter().zip(same.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_flow_round_trip_on_smooth_field() {
        // Smooth low-frequency field; up 2x then back down should come
        // close to the original. The 5e-2 bound is the frozen regression
        // tolerance for this construction.
        let h = 16;
        let w = 16;
        let mut data = Vec::with_capacity(2 * h * w);
        for ci in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let fy = y as f32 / h as f32;
                    let fx = x as f32 / w as f32;
                    data.push(
                        (std::f32::consts::TAU * (0.5 * fx + 0.3 * ci as f32)).sin()
                            * (std::f32::consts::TAU * fy * 0.25).cos(),
                    );
                }
            }
        }
        let flow = Tensor::from_vec(&[2, h, w], data);
        let up = resize_flow(&flow, 2 * h, 2 * w).unwrap();
        let back = resize_flow(&up, h, w).unwrap();
        for (a, b) in flow.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 5e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn blend_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w0 = Tensor::randn(&[3, 4, 4], &mut rng);
        let w1 = Tensor::randn(&[3, 4, 4], &mut rng);
        let zero = Tensor::zeros(&[3, 4, 4]);
        let ones = Tensor::filled(&[1, 4, 4], 1.0);
        let zeros_m = Tensor::zeros(&[1, 4, 4]);
        assert_eq!(blend(&w0, &w1, &ones, &zero).unwrap(), w0);
        assert_eq!(blend(&w0, &w1, &zeros_m, &zero).unwrap(), w1);
    }

    #[test]
    fn blend_adds_residual_to_shared_input() {
        let img = Tensor::filled(&[3, 2, 2], 0.25);
        let half = Tensor::filled(&[1, 2, 2], 0.5);
        let c = Tensor::filled(&[3, 2, 2], 0.1);
        let out = blend(&img, &img, &half, &c).unwrap();
        for &v in out.data() {
            assert!((v - 0.35).abs() < 1e-7);
        }
    }

    #[test]
    fn blend_swap_symmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w0 = Tensor::randn(&[3, 5, 5], &mut rng);
        let w1 = Tensor::randn(&[3, 5, 5], &mut rng);
        let res = Tensor::randn(&[3, 5, 5], &mut rng);
        let m = Tensor::rand_uniform(&[1, 5, 5], 0.0, 1.0, &mut rng);
        let flipped = m.map(|v| 1.0 - v);
        let a = blend(&w0, &w1, &m, &res).unwrap();
        let b = blend(&w1, &w0, &flipped, &res).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }
}
