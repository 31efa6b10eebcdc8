//! Operation kernels for the autodiff tape.
//!
//! Each op is a small struct implementing [`OpImpl`]; `Graph` gets one
//! builder method per op so model code reads as ordinary expressions.
//! Convolution and the matrix products go through `matrixmultiply::sgemm`;
//! everything else is plain loops over contiguous slices.

use crate::tensor::Tensor;
use crate::warping;

use super::{Graph, NodeId};

pub trait OpImpl {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;
    /// One gradient per input; `None` where `needs[i]` is false or the op
    /// contributes nothing (e.g. detach).
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

/// Row-major sgemm: `c = alpha * a@b + beta * c`, with optional logical
/// transposes. `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// --- pointwise ---

macro_rules! pointwise_binop {
    ($name:ident, $label:expr, $f:expr, $da:expr, $db:expr) => {
        pub struct $name;
        impl OpImpl for $name {
            fn name(&self) -> &'static str {
                $label
            }
            fn forward(&self, inputs: &[&Tensor]) -> Tensor {
                inputs[0].zip_map(inputs[1], $f)
            }
            fn backward(
                &self,
                inputs: &[&Tensor],
                _out: &Tensor,
                grad: &Tensor,
                needs: &[bool],
            ) -> Vec<Option<Tensor>> {
                let da: fn(f32, f32, f32) -> f32 = $da;
                let db: fn(f32, f32, f32) -> f32 = $db;
                let a = inputs[0];
                let b = inputs[1];
                let ga = needs[0].then(|| {
                    let mut t = grad.clone();
                    for ((g, &x), &y) in t.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *g = da(*g, x, y);
                    }
                    t
                });
                let gb = needs[1].then(|| {
                    let mut t = grad.clone();
                    for ((g, &x), &y) in t.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        *g = db(*g, x, y);
                    }
                    t
                });
                vec![ga, gb]
            }
        }
    };
}

pointwise_binop!(Add, "add", |a, b| a + b, |g, _, _| g, |g, _, _| g);
pointwise_binop!(Sub, "sub", |a, b| a - b, |g, _, _| g, |g, _, _| -g);
pointwise_binop!(Mul, "mul", |a, b| a * b, |g, _, b| g * b, |g, a, _| g * a);

macro_rules! pointwise_unop {
    ($name:ident, $label:expr, $fwd:expr, $bwd:expr) => {
        pub struct $name;
        impl OpImpl for $name {
            fn name(&self) -> &'static str {
                $label
            }
            fn forward(&self, inputs: &[&Tensor]) -> Tensor {
                inputs[0].map($fwd)
            }
            fn backward(
                &self,
                inputs: &[&Tensor],
                out: &Tensor,
                grad: &Tensor,
                needs: &[bool],
            ) -> Vec<Option<Tensor>> {
                // bwd(g, x, y): gradient given upstream g, input x, output y
                let bwd: fn(f32, f32, f32) -> f32 = $bwd;
                vec![needs[0].then(|| {
                    let mut t = grad.clone();
                    for ((g, &x), &y) in t
                        .data_mut()
                        .iter_mut()
                        .zip(inputs[0].data())
                        .zip(out.data())
                    {
                        *g = bwd(*g, x, y);
                    }
                    t
                })]
            }
        }
    };
}

pointwise_unop!(
    Sigmoid,
    "sigmoid",
    |x| 1.0 / (1.0 + (-x).exp()),
    |g, _, y| g * y * (1.0 - y)
);
pointwise_unop!(
    Silu,
    "silu",
    |x| x / (1.0 + (-x).exp()),
    |g, x, _| {
        let s = 1.0 / (1.0 + (-x).exp());
        g * s * (1.0 + x * (1.0 - s))
    }
);
pointwise_unop!(Abs, "abs", f32::abs, |g, x, _| if x > 0.0 {
    g
} else if x < 0.0 {
    -g
} else {
    0.0
});
pointwise_unop!(Square, "square", |x| x * x, |g, x, _| 2.0 * x * g);

pub struct LeakyRelu(pub f32);
impl OpImpl for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky_relu"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let a = self.0;
        inputs[0].map(|x| if x > 0.0 { x } else { a * x })
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let a = self.0;
        vec![needs[0].then(|| {
            grad.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { a * g })
        })]
    }
}

pub struct AddScalar(pub f32);
impl OpImpl for AddScalar {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let c = self.0;
        inputs[0].map(|x| x + c)
    }
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| grad.clone())]
    }
}

pub struct MulScalar(pub f32);
impl OpImpl for MulScalar {
    fn name(&self) -> &'static str {
        "mul_scalar"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let c = self.0;
        inputs[0].map(|x| x * c)
    }
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| grad.scale(self.0))]
    }
}

pub struct Detach;
impl OpImpl for Detach {
    fn name(&self) -> &'static str {
        "detach"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        inputs[0].clone()
    }
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _out: &Tensor,
        _grad: &Tensor,
        _needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![None]
    }
}

// --- reductions ---

pub struct Mean;
impl OpImpl for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        Tensor::from_vec(&[1], vec![inputs[0].mean()])
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let n = inputs[0].len() as f32;
        let g = grad.data()[0] / n;
        vec![needs[0].then(|| Tensor::filled(inputs[0].shape(), g))]
    }
}

// --- channel plumbing ---

pub struct ConcatC;
impl OpImpl for ConcatC {
    fn name(&self) -> &'static str {
        "concat_c"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (n, _, h, w) = inputs[0].dims4();
        let c_total: usize = inputs.iter().map(|t| t.dims4().1).sum();
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        let plane = h * w;
        let od = out.data_mut();
        for ni in 0..n {
            let mut c_off = 0;
            for t in inputs {
                let (tn, tc, th, tw) = t.dims4();
                assert!(tn == n && th == h && tw == w, "concat_c shape mismatch");
                let src = &t.data()[ni * tc * plane..(ni + 1) * tc * plane];
                let dst_base = (ni * c_total + c_off) * plane;
                od[dst_base..dst_base + tc * plane].copy_from_slice(src);
                c_off += tc;
            }
        }
        out
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c_total, h, w) = grad.dims4();
        let plane = h * w;
        let gd = grad.data();
        let mut outs = Vec::with_capacity(inputs.len());
        let mut c_off = 0;
        for (i, t) in inputs.iter().enumerate() {
            let tc = t.dims4().1;
            if needs[i] {
                let mut g = Tensor::zeros(t.shape());
                for ni in 0..n {
                    let src_base = (ni * c_total + c_off) * plane;
                    let dst_base = ni * tc * plane;
                    g.data_mut()[dst_base..dst_base + tc * plane]
                        .copy_from_slice(&gd[src_base..src_base + tc * plane]);
                }
                outs.push(Some(g));
            } else {
                outs.push(None);
            }
            c_off += tc;
        }
        outs
    }
}

pub struct NarrowC {
    pub start: usize,
    pub len: usize,
}
impl OpImpl for NarrowC {
    fn name(&self) -> &'static str {
        "narrow_c"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (n, c, h, w) = inputs[0].dims4();
        assert!(self.start + self.len <= c, "narrow_c out of range");
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, self.len, h, w]);
        let xd = inputs[0].data();
        let od = out.data_mut();
        for ni in 0..n {
            let src = (ni * c + self.start) * plane;
            let dst = ni * self.len * plane;
            od[dst..dst + self.len * plane].copy_from_slice(&xd[src..src + self.len * plane]);
        }
        out
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4();
        let plane = h * w;
        vec![needs[0].then(|| {
            let mut g = Tensor::zeros(&[n, c, h, w]);
            let gd = grad.data();
            for ni in 0..n {
                let dst = (ni * c + self.start) * plane;
                let src = ni * self.len * plane;
                g.data_mut()[dst..dst + self.len * plane]
                    .copy_from_slice(&gd[src..src + self.len * plane]);
            }
            g
        })]
    }
}

/// Per-channel scalar multiply, e.g. flow value rescaling after a resize.
pub struct ScaleChannels(pub Vec<f32>);
impl OpImpl for ScaleChannels {
    fn name(&self) -> &'static str {
        "scale_channels"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let mut out = inputs[0].clone();
        warping::scale_channels_inplace(&mut out, &self.0);
        out
    }
    fn backward(
        &self,
        _inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| {
            let mut g = grad.clone();
            warping::scale_channels_inplace(&mut g, &self.0);
            g
        })]
    }
}

/// Broadcast-add a `[n, c]` vector over the spatial dims of `[n, c, h, w]`
/// (timestep embedding injection).
pub struct AddChanVec;
impl OpImpl for AddChanVec {
    fn name(&self) -> &'static str {
        "add_chan_vec"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (n, c, h, w) = inputs[0].dims4();
        assert_eq!(inputs[1].shape(), &[n, c], "add_chan_vec vector shape");
        let mut out = inputs[0].clone();
        let vd = inputs[1].data();
        let plane = h * w;
        for nc in 0..n * c {
            let base = nc * plane;
            let v = vd[nc];
            for x in &mut out.data_mut()[base..base + plane] {
                *x += v;
            }
        }
        out
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4();
        let plane = h * w;
        let gx = needs[0].then(|| grad.clone());
        let gv = needs[1].then(|| {
            let mut g = Tensor::zeros(&[n, c]);
            let gd = grad.data();
            for nc in 0..n * c {
                let base = nc * plane;
                g.data_mut()[nc] = gd[base..base + plane].iter().sum();
            }
            g
        });
        vec![gx, gv]
    }
}

// --- linear algebra layers ---

/// `y = x @ w^T + b` with `x: [n, i]`, `w: [o, i]`, `b: [o]`.
pub struct Linear;
impl OpImpl for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let n = x.shape()[0];
        let i = x.shape()[1];
        let o = w.shape()[0];
        assert_eq!(w.shape()[1], i, "linear weight shape");
        let mut out = Tensor::zeros(&[n, o]);
        gemm(n, i, o, 1.0, x.data(), false, w.data(), true, 0.0, out.data_mut());
        for ni in 0..n {
            for oi in 0..o {
                out.data_mut()[ni * o + oi] += b.data()[oi];
            }
        }
        out
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let n = x.shape()[0];
        let i = x.shape()[1];
        let o = w.shape()[0];
        let gx = needs[0].then(|| {
            let mut g = Tensor::zeros(&[n, i]);
            gemm(n, o, i, 1.0, grad.data(), false, w.data(), false, 0.0, g.data_mut());
            g
        });
        let gw = needs[1].then(|| {
            let mut g = Tensor::zeros(&[o, i]);
            gemm(o, n, i, 1.0, grad.data(), true, x.data(), false, 0.0, g.data_mut());
            g
        });
        let gb = needs[2].then(|| {
            let mut g = Tensor::zeros(&[o]);
            for ni in 0..n {
                for oi in 0..o {
                    g.data_mut()[oi] += grad.data()[ni * o + oi];
                }
            }
            g
        });
        vec![gx, gw, gb]
    }
}

/// 2-D convolution, zero padding. `x: [n, ci, h, w]`, `w: [co, ci, kh, kw]`,
/// `b: [co]`. Forward and both weight/input gradients go through im2col +
/// sgemm; the column buffer is rebuilt in backward rather than cached.
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    fn out_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    /// col: [ci*kh*kw, oh*ow] for one sample.
    fn im2col(&self, x: &[f32], ci: usize, h: usize, w: usize, kh: usize, kw: usize, col: &mut [f32]) {
        let (oh, ow) = self.out_dims(h, w, kh, kw);
        let ohw = oh * ow;
        col.fill(0.0);
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kh + ky) * kw + kx) * ohw;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = c * h * w + iy as usize * w;
                        let dst_row = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                col[dst_row + ox] = x[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], ci: usize, h: usize, w: usize, kh: usize, kw: usize, x: &mut [f32]) {
        let (oh, ow) = self.out_dims(h, w, kh, kw);
        let ohw = oh * ow;
        for c in 0..ci {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kh + ky) * kw + kx) * ohw;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = c * h * w + iy as usize * w;
                        let src_row = row + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x[dst_row + ix as usize] += col[src_row + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl OpImpl for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (n, ci, h, wd) = x.dims4();
        let (co, wci, kh, kw) = w.dims4();
        assert_eq!(ci, wci, "conv2d channel mismatch");
        let (oh, ow) = self.out_dims(h, wd, kh, kw);
        let ohw = oh * ow;
        let k = ci * kh * kw;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        let mut col = vec![0.0f32; k * ohw];
        for ni in 0..n {
            let xs = &x.data()[ni * ci * h * wd..(ni + 1) * ci * h * wd];
            self.im2col(xs, ci, h, wd, kh, kw, &mut col);
            let os = &mut out.data_mut()[ni * co * ohw..(ni + 1) * co * ohw];
            gemm(co, k, ohw, 1.0, w.data(), false, &col, false, 0.0, os);
            for c in 0..co {
                let bv = b.data()[c];
                for v in &mut os[c * ohw..(c + 1) * ohw] {
                    *v += bv;
                }
            }
        }
        out
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, ci, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let (oh, ow) = self.out_dims(h, wd, kh, kw);
        let ohw = oh * ow;
        let k = ci * kh * kw;

        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gw = needs[1].then(|| Tensor::zeros(w.shape()));
        let gb = needs[2].then(|| {
            let mut g = Tensor::zeros(&[co]);
            for ni in 0..n {
                for c in 0..co {
                    let base = (ni * co + c) * ohw;
                    g.data_mut()[c] += grad.data()[base..base + ohw].iter().sum::<f32>();
                }
            }
            g
        });

        let mut col = vec![0.0f32; k * ohw];
        let mut dcol = vec![0.0f32; k * ohw];
        for ni in 0..n {
            let gs = &grad.data()[ni * co * ohw..(ni + 1) * co * ohw];
            if let Some(gw) = gw.as_mut() {
                let xs = &x.data()[ni * ci * h * wd..(ni + 1) * ci * h * wd];
                self.im2col(xs, ci, h, wd, kh, kw, &mut col);
                gemm(co, ohw, k, 1.0, gs, false, &col, true, 1.0, gw.data_mut());
            }
            if let Some(gx) = gx.as_mut() {
                gemm(k, co, ohw, 1.0, w.data(), true, gs, false, 0.0, &mut dcol);
                let xs = &mut gx.data_mut()[ni * ci * h * wd..(ni + 1) * ci * h * wd];
                self.col2im(&dcol, ci, h, wd, kh, kw, xs);
            }
        }
        vec![gx, gw, gb]
    }
}

/// Group normalization with affine parameters. `x: [n, c, h, w]`,
/// `gamma: [c]`, `beta: [c]`; statistics per (sample, group).
pub struct GroupNorm {
    pub groups: usize,
    pub eps: f32,
}

impl GroupNorm {
    fn stats(&self, x: &Tensor) -> (Vec<f32>, Vec<f32>) {
        let (n, c, h, w) = x.dims4();
        let gsize = c / self.groups * h * w;
        let mut means = vec![0.0f32; n * self.groups];
        let mut inv_stds = vec![0.0f32; n * self.groups];
        for ni in 0..n {
            for g in 0..self.groups {
                let start = (ni * c + g * (c / self.groups)) * h * w;
                let slice = &x.data()[start..start + gsize];
                let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64;
                let var = slice
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / gsize as f64;
                means[ni * self.groups + g] = mean as f32;
                inv_stds[ni * self.groups + g] = 1.0 / ((var as f32 + self.eps).sqrt());
            }
        }
        (means, inv_stds)
    }
}

impl OpImpl for GroupNorm {
    fn name(&self) -> &'static str {
        "group_norm"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
        let (n, c, h, w) = x.dims4();
        assert_eq!(c % self.groups, 0, "channels must divide groups");
        let (means, inv_stds) = self.stats(x);
        let cpg = c / self.groups;
        let plane = h * w;
        let mut out = Tensor::zeros(x.shape());
        for ni in 0..n {
            for ch in 0..c {
                let g = ch / cpg;
                let mu = means[ni * self.groups + g];
                let is = inv_stds[ni * self.groups + g];
                let ga = gamma.data()[ch];
                let be = beta.data()[ch];
                let base = (ni * c + ch) * plane;
                for p in 0..plane {
                    out.data_mut()[base + p] = (x.data()[base + p] - mu) * is * ga + be;
                }
            }
        }
        out
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.dims4();
        let cpg = c / self.groups;
        let plane = h * w;
        let gsize = cpg * plane;
        let (means, inv_stds) = self.stats(x);

        let mut ggamma = Tensor::zeros(&[c]);
        let mut gbeta = Tensor::zeros(&[c]);
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));

        for ni in 0..n {
            for g in 0..self.groups {
                let mu = means[ni * self.groups + g];
                let is = inv_stds[ni * self.groups + g];
                // First pass: per-group sums of gy*gamma and gy*gamma*xhat.
                let mut sum_gyg = 0.0f64;
                let mut sum_gyg_xhat = 0.0f64;
                for cc in 0..cpg {
                    let ch = g * cpg + cc;
                    let base = (ni * c + ch) * plane;
                    let ga = gamma.data()[ch];
                    for p in 0..plane {
                        let gy = grad.data()[base + p];
                        let xhat = (x.data()[base + p] - mu) * is;
                        ggamma.data_mut()[ch] += gy * xhat;
                        gbeta.data_mut()[ch] += gy;
                        sum_gyg += (gy * ga) as f64;
                        sum_gyg_xhat += (gy * ga * xhat) as f64;
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    let m1 = (sum_gyg / gsize as f64) as f32;
                    let m2 = (sum_gyg_xhat / gsize as f64) as f32;
                    for cc in 0..cpg {
                        let ch = g * cpg + cc;
                        let base = (ni * c + ch) * plane;
                        let ga = gamma.data()[ch];
                        for p in 0..plane {
                            let gy = grad.data()[base + p];
                            let xhat = (x.data()[base + p] - mu) * is;
                            gx.data_mut()[base + p] = (gy * ga - m1 - xhat * m2) * is;
                        }
                    }
                }
            }
        }
        vec![
            gx,
            needs[1].then_some(ggamma),
            needs[2].then_some(gbeta),
        ]
    }
}

// --- resampling ---

pub struct NearestUp2;
impl OpImpl for NearestUp2 {
    fn name(&self) -> &'static str {
        "nearest_up2"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (n, c, h, w) = inputs[0].dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let xd = inputs[0].data();
        let od = out.data_mut();
        for nc in 0..n * c {
            let sb = nc * h * w;
            let db = nc * 4 * h * w;
            for y in 0..h {
                for x in 0..w {
                    let v = xd[sb + y * w + x];
                    let d = db + 2 * y * 2 * w + 2 * x;
                    od[d] = v;
                    od[d + 1] = v;
                    od[d + 2 * w] = v;
                    od[d + 2 * w + 1] = v;
                }
            }
        }
        out
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4();
        vec![needs[0].then(|| {
            let mut g = Tensor::zeros(&[n, c, h, w]);
            let gd = grad.data();
            for nc in 0..n * c {
                let db = nc * 4 * h * w;
                let sb = nc * h * w;
                for y in 0..h {
                    for x in 0..w {
                        let d = db + 2 * y * 2 * w + 2 * x;
                        g.data_mut()[sb + y * w + x] =
                            gd[d] + gd[d + 1] + gd[d + 2 * w] + gd[d + 2 * w + 1];
                    }
                }
            }
            g
        })]
    }
}

pub struct ResizeBilinear {
    pub oh: usize,
    pub ow: usize,
}
impl OpImpl for ResizeBilinear {
    fn name(&self) -> &'static str {
        "resize_bilinear"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        warping::resize_bilinear(inputs[0], self.oh, self.ow)
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        vec![needs[0].then(|| warping::resize_bilinear_backward(inputs[0].shape(), grad))]
    }
}

pub struct Warp;
impl OpImpl for Warp {
    fn name(&self) -> &'static str {
        "warp"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        warping::warp_forward(inputs[0], inputs[1])
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (gs, gf) = warping::warp_backward(inputs[0], inputs[1], grad, needs[0], needs[1]);
        vec![gs, gf]
    }
}

/// Channel Gram matrix `A @ A^T / (c*h*w)` with `A = [c, h*w]` per sample.
pub struct Gram;
impl OpImpl for Gram {
    fn name(&self) -> &'static str {
        "gram"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (n, c, h, w) = inputs[0].dims4();
        let hw = h * w;
        let norm = 1.0 / (c * hw) as f32;
        let mut out = Tensor::zeros(&[n, c, c]);
        for ni in 0..n {
            let a = &inputs[0].data()[ni * c * hw..(ni + 1) * c * hw];
            let o = &mut out.data_mut()[ni * c * c..(ni + 1) * c * c];
            gemm(c, hw, c, norm, a, false, a, true, 0.0, o);
        }
        out
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>> {
        let (n, c, h, w) = inputs[0].dims4();
        let hw = h * w;
        let norm = 1.0 / (c * hw) as f32;
        vec![needs[0].then(|| {
            let mut gx = Tensor::zeros(inputs[0].shape());
            // dA = (G' + G'^T) @ A * norm
            let mut sym = vec![0.0f32; c * c];
            for ni in 0..n {
                let gslice = &grad.data()[ni * c * c..(ni + 1) * c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = (gslice[i * c + j] + gslice[j * c + i]) * norm;
                    }
                }
                let a = &inputs[0].data()[ni * c * hw..(ni + 1) * c * hw];
                let o = &mut gx.data_mut()[ni * c * hw..(ni + 1) * c * hw];
                gemm(c, c, hw, 1.0, &sym, false, a, false, 0.0, o);
            }
            gx
        })]
    }
}

// --- graph sugar ---

impl Graph {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.apply(Box::new(Add), &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.apply(Box::new(Sub), &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.apply(Box::new(Mul), &[a, b])
    }
    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        self.apply(Box::new(AddScalar(c)), &[a])
    }
    pub fn mul_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        self.apply(Box::new(MulScalar(c)), &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.apply(Box::new(Sigmoid), &[a])
    }
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        self.apply(Box::new(Silu), &[a])
    }
    pub fn leaky_relu(&mut self, a: NodeId, slope: f32) -> NodeId {
        self.apply(Box::new(LeakyRelu(slope)), &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.apply(Box::new(Abs), &[a])
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.apply(Box::new(Square), &[a])
    }
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        self.apply(Box::new(Detach), &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.apply(Box::new(Mean), &[a])
    }
    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        self.apply(Box::new(ConcatC), parts)
    }
    pub fn narrow_c(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        self.apply(Box::new(NarrowC { start, len }), &[a])
    }
    pub fn scale_channels(&mut self, a: NodeId, scales: Vec<f32>) -> NodeId {
        self.apply(Box::new(ScaleChannels(scales)), &[a])
    }
    pub fn add_chan_vec(&mut self, x: NodeId, v: NodeId) -> NodeId {
        self.apply(Box::new(AddChanVec), &[x, v])
    }
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.apply(Box::new(Linear), &[x, w, b])
    }
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        self.apply(Box::new(Conv2d { stride, pad }), &[x, w, b])
    }
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> NodeId {
        self.apply(Box::new(GroupNorm { groups, eps: 1e-5 }), &[x, gamma, beta])
    }
    pub fn nearest_up2(&mut self, a: NodeId) -> NodeId {
        self.apply(Box::new(NearestUp2), &[a])
    }
    pub fn resize_bilinear(&mut self, a: NodeId, oh: usize, ow: usize) -> NodeId {
        self.apply(Box::new(ResizeBilinear { oh, ow }), &[a])
    }
    pub fn warp(&mut self, src: NodeId, flow: NodeId) -> NodeId {
        self.apply(Box::new(Warp), &[src, flow])
    }
    pub fn gram(&mut self, a: NodeId) -> NodeId {
        self.apply(Box::new(Gram), &[a])
    }

    /// `a + s * b`, used constantly by the diffusion algebra.
    pub fn axpy(&mut self, a: NodeId, s: f32, b: NodeId) -> NodeId {
        let sb = self.mul_scalar(b, s);
        self.add(a, sb)
    }
}
