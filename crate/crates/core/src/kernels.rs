//! Forward and adjoint kernels over plain tensors.
//!
//! Layouts are NCHW for images, `[in, out]` for dense weights, `[out, in, kh,
//! kw]` for convolution kernels and `[in, out, kh, kw]` for transposed
//! convolution kernels. Convolution is cross-correlation with zero padding.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Kernel, stride, padding and channel counts of a (transposed) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    /// Square kernel/stride/padding shorthand.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, s: usize, p: usize) -> Self {
        Self {
            kernel: (k, k),
            stride: (s, s),
            padding: (p, p),
            in_channels,
            out_channels,
        }
    }

    fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0
            || kw == 0
            || sh == 0
            || sw == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::Geometry(format!("zero-sized parameter in {self:?}")));
        }
        Ok(())
    }

    /// `floor((in + 2p - k) / s) + 1` per axis.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |n: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            let padded = n + 2 * p;
            (padded >= k).then(|| (padded - k) / s + 1)
        };
        match (
            axis(h, self.kernel.0, self.stride.0, self.padding.0),
            axis(w, self.kernel.1, self.stride.1, self.padding.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Geometry(format!(
                "convolution of {h}x{w} with {self:?} has no valid output position"
            ))),
        }
    }

    /// `(in - 1) * s - 2p + k` per axis.
    pub fn transpose_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |n: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            let full = (n.checked_sub(1)?) * s + k;
            full.checked_sub(2 * p).filter(|&o| o >= 1)
        };
        match (
            axis(h, self.kernel.0, self.stride.0, self.padding.0),
            axis(w, self.kernel.1, self.stride.1, self.padding.1),
        ) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::Geometry(format!(
                "transposed convolution of {h}x{w} with {self:?} yields a non-positive size"
            ))),
        }
    }
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

/// Output indices `j` in `0..n_out` with `0 <= j * stride + offset < n_in`.
#[inline]
fn valid_range(n_out: usize, stride: usize, offset: isize, n_in: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let last = n_in as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi as usize).min(n_out);
    (lo, hi.max(lo))
}

/// Sliding-window shape shared by the three correlation kernels.
#[derive(Clone, Copy)]
struct Window {
    n: usize,
    /// Channels on the wide (input) side.
    c: usize,
    h: usize,
    w: usize,
    /// Channels on the narrow (output) side.
    o: usize,
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Window {
    fn new(
        n: usize,
        c: usize,
        (h, w): (usize, usize),
        o: usize,
        (oh, ow): (usize, usize),
        g: &ConvGeometry,
    ) -> Self {
        Self {
            n,
            c,
            h,
            w,
            o,
            oh,
            ow,
            kh: g.kernel.0,
            kw: g.kernel.1,
            sh: g.stride.0,
            sw: g.stride.1,
            ph: g.padding.0,
            pw: g.padding.1,
        }
    }
}

/// Inner product with eight interleaved partial sums, combined in a fixed
/// order. The split lets the compiler vectorize without reassociating.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += a * x`.
#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

/// Visits every in-bounds `(patch index, input index)` pair of one sample.
/// Row `p = i * ow + j` of the patch matrix holds `x[c, i*s+u-p, j*s+v-p]`
/// at column `(c * kh + u) * kw + v`.
#[inline]
fn for_each_tap(win: &Window, mut f: impl FnMut(usize, usize)) {
    let Window {
        c,
        h,
        w,
        ow,
        oh,
        kh,
        kw,
        sh,
        sw,
        ph,
        pw,
        ..
    } = *win;
    let cols = c * kh * kw;
    for ci in 0..c {
        for u in 0..kh {
            let (ilo, ihi) = valid_range(oh, sh, u as isize - ph as isize, h);
            for v in 0..kw {
                let (jlo, jhi) = valid_range(ow, sw, v as isize - pw as isize, w);
                let col = (ci * kh + u) * kw + v;
                for i in ilo..ihi {
                    let row = ci * h * w + (i * sh + u - ph) * w;
                    for j in jlo..jhi {
                        f((i * ow + j) * cols + col, row + j * sw + v - pw);
                    }
                }
            }
        }
    }
}

/// Patch matrix `[oh * ow, c * kh * kw]` of one sample, zero where the window
/// covers padding.
fn patches<T: Scalar>(xb: &[T], win: &Window) -> Vec<T> {
    let mut out = vec![T::zero(); win.oh * win.ow * win.c * win.kh * win.kw];
    for_each_tap(win, |pi, xi| out[pi] = xb[xi]);
    out
}

/// `y[n,o,i,j] = sum_{c,u,v} x[n,c,i*s+u-p, j*s+v-p] * k[o,c,u,v]`.
fn correlate<T: Scalar>(x: &[T], k: &[T], win: Window) -> Vec<T> {
    let Window {
        c,
        h,
        w,
        o,
        oh,
        ow,
        kh,
        kw,
        ..
    } = win;
    let (cols, plane) = (c * kh * kw, oh * ow);
    let mut y = vec![T::zero(); win.n * o * plane];
    par::for_each_chunk(&mut y, o * plane, |ni, out| {
        let pt = patches(&x[ni * c * h * w..][..c * h * w], &win);
        for (oi, orow) in out.chunks_exact_mut(plane).enumerate() {
            let krow = &k[oi * cols..][..cols];
            for (p, v) in orow.iter_mut().enumerate() {
                *v = dot(krow, &pt[p * cols..][..cols]);
            }
        }
    });
    y
}

/// Adjoint of [`correlate`] with respect to `x`.
fn correlate_adjoint<T: Scalar>(g: &[T], k: &[T], win: Window) -> Vec<T> {
    let Window {
        c,
        h,
        w,
        o,
        oh,
        ow,
        kh,
        kw,
        ..
    } = win;
    let (cols, plane) = (c * kh * kw, oh * ow);
    let mut gx = vec![T::zero(); win.n * c * h * w];
    par::for_each_chunk(&mut gx, c * h * w, |ni, out| {
        let gb = &g[ni * o * plane..][..o * plane];
        let mut gp = vec![T::zero(); plane * cols];
        for (p, row) in gp.chunks_exact_mut(cols).enumerate() {
            for oi in 0..o {
                axpy(row, gb[oi * plane + p], &k[oi * cols..][..cols]);
            }
        }
        for_each_tap(&win, |pi, xi| out[xi] = out[xi] + gp[pi]);
    });
    gx
}

/// Adjoint of [`correlate`] with respect to `k`.
fn correlate_kernel_grad<T: Scalar>(x: &[T], g: &[T], win: Window) -> Vec<T> {
    let Window {
        n,
        c,
        h,
        w,
        o,
        oh,
        ow,
        kh,
        kw,
        ..
    } = win;
    let (cols, plane) = (c * kh * kw, oh * ow);
    let pts = par::map_range(n, |ni| patches(&x[ni * c * h * w..][..c * h * w], &win));
    let mut gk = vec![T::zero(); o * cols];
    par::for_each_chunk(&mut gk, cols, |oi, out| {
        for (ni, pt) in pts.iter().enumerate() {
            let gb = &g[(ni * o + oi) * plane..][..plane];
            for (p, &gv) in gb.iter().enumerate() {
                axpy(out, gv, &pt[p * cols..][..cols]);
            }
        }
    });
    gk
}

fn add_channel_bias<T: Scalar>(y: &mut [T], b: &[T], plane: usize) {
    let c = b.len();
    for (idx, chunk) in y.chunks_mut(plane).enumerate() {
        let bv = b[idx % c];
        for v in chunk {
            *v = *v + bv;
        }
    }
}

/// Sum of `g[n, c, ..]` over everything but the channel axis.
pub fn channel_sum<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("channel_sum", g)?;
    let plane = h * w;
    let mut out = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, o) in out.iter_mut().enumerate() {
            let s: T = g.data()[(ni * c + ci) * plane..][..plane]
                .iter()
                .copied()
                .sum();
            *o = *o + s;
        }
    }
    Ok(Tensor::from_parts(vec![c], out))
}

fn check_kernel<T: Scalar>(op: &'static str, k: &Tensor<T>, expect: [usize; 4]) -> Result<()> {
    if k.shape() != expect {
        return Err(Error::Shape {
            op,
            lhs: k.shape().to_vec(),
            rhs: expect.to_vec(),
        });
    }
    Ok(())
}

fn check_bias<T: Scalar>(op: &'static str, b: &Tensor<T>, n: usize) -> Result<()> {
    if b.shape() != [n] {
        return Err(Error::Shape {
            op,
            lhs: b.shape().to_vec(),
            rhs: vec![n],
        });
    }
    Ok(())
}

fn check_channels(op: &'static str, x: [usize; 4], expect: usize) -> Result<()> {
    if x[1] != expect {
        return Err(Error::Shape {
            op,
            lhs: x.to_vec(),
            rhs: vec![x[0], expect, x[2], x[3]],
        });
    }
    Ok(())
}

/// Strided, zero-padded 2-D cross-correlation plus per-channel bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let xd = dims4("conv2d", x)?;
    let (kh, kw) = geom.kernel;
    check_channels("conv2d", xd, geom.in_channels)?;
    check_kernel(
        "conv2d kernel",
        k,
        [geom.out_channels, geom.in_channels, kh, kw],
    )?;
    check_bias("conv2d bias", b, geom.out_channels)?;
    let (oh, ow) = geom.conv_output(xd[2], xd[3])?;
    let win = Window::new(
        xd[0],
        xd[1],
        (xd[2], xd[3]),
        geom.out_channels,
        (oh, ow),
        geom,
    );
    let mut y = correlate(x.data(), k.data(), win);
    add_channel_bias(&mut y, b.data(), oh * ow);
    Ok(Tensor::from_parts(
        vec![xd[0], geom.out_channels, oh, ow],
        y,
    ))
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let xd = dims4("conv2d backward", x)?;
    let gd = dims4("conv2d backward", gy)?;
    let win = Window::new(xd[0], xd[1], (xd[2], xd[3]), gd[1], (gd[2], gd[3]), geom);
    let gx = correlate_adjoint(gy.data(), k.data(), win);
    let gk = correlate_kernel_grad(x.data(), gy.data(), win);
    Ok((
        Tensor::from_parts(xd.to_vec(), gx),
        Tensor::from_parts(k.shape().to_vec(), gk),
        channel_sum(gy)?,
    ))
}

/// Transposed convolution: the adjoint of [`conv2d`] under the same geometry,
/// plus per-channel bias. The kernel is laid out `[in, out, kh, kw]`.
pub fn conv2d_transpose<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    b: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let xd = dims4("conv2d_transpose", x)?;
    let (kh, kw) = geom.kernel;
    check_channels("conv2d_transpose", xd, geom.in_channels)?;
    check_kernel(
        "conv2d_transpose kernel",
        k,
        [geom.in_channels, geom.out_channels, kh, kw],
    )?;
    check_bias("conv2d_transpose bias", b, geom.out_channels)?;
    let (oh, ow) = geom.transpose_output(xd[2], xd[3])?;
    // Wide side is the transposed output, narrow side the transposed input.
    let win = Window::new(
        xd[0],
        geom.out_channels,
        (oh, ow),
        xd[1],
        (xd[2], xd[3]),
        geom,
    );
    let mut y = correlate_adjoint(x.data(), k.data(), win);
    add_channel_bias(&mut y, b.data(), oh * ow);
    Ok(Tensor::from_parts(
        vec![xd[0], geom.out_channels, oh, ow],
        y,
    ))
}

/// Gradients of [`conv2d_transpose`] with respect to input, kernel and bias.
pub fn conv2d_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gy: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let xd = dims4("conv2d_transpose backward", x)?;
    let gd = dims4("conv2d_transpose backward", gy)?;
    let win = Window::new(xd[0], gd[1], (gd[2], gd[3]), xd[1], (xd[2], xd[3]), geom);
    let gx = correlate(gy.data(), k.data(), win);
    let gk = correlate_kernel_grad(gy.data(), x.data(), win);
    Ok((
        Tensor::from_parts(xd.to_vec(), gx),
        Tensor::from_parts(k.shape().to_vec(), gk),
        channel_sum(gy)?,
    ))
}

/// `y = x W + b` for `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
pub fn dense<T: Scalar>(x: &Tensor<T>, wt: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, n_in, n_out) = match (x.shape(), wt.shape(), b.shape()) {
        (&[batch, i], &[wi, o], &[bo]) if i == wi && o == bo => (batch, i, o),
        (_, &[_, _], &[_]) => {
            return Err(Error::Shape {
                op: "dense",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            })
        }
        _ => {
            return Err(Error::Shape {
                op: "dense",
                lhs: wt.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    };
    let (xd, wd, bd) = (x.data(), wt.data(), b.data());
    let mut y = vec![T::zero(); batch * n_out];
    par::for_each_chunk(&mut y, n_out, |r, row| {
        row.copy_from_slice(bd);
        let xr = &xd[r * n_in..][..n_in];
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &wd[i * n_out..][..n_out];
            for (o, &wv) in row.iter_mut().zip(wr) {
                *o = *o + xv * wv;
            }
        }
    });
    Ok(Tensor::from_parts(vec![batch, n_out], y))
}

/// Gradients of [`dense`] with respect to `x`, `W` and `b`.
pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (batch, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = wt.shape()[1];
    let (xd, wd, gd) = (x.data(), wt.data(), gy.data());

    let mut gx = vec![T::zero(); batch * n_in];
    par::for_each_chunk(&mut gx, n_in, |r, row| {
        let gr = &gd[r * n_out..][..n_out];
        for (i, o) in row.iter_mut().enumerate() {
            let wr = &wd[i * n_out..][..n_out];
            *o = gr.iter().zip(wr).map(|(&g, &w)| g * w).sum();
        }
    });

    let mut gw = vec![T::zero(); n_in * n_out];
    par::for_each_chunk(&mut gw, n_out, |i, row| {
        for r in 0..batch {
            let xv = xd[r * n_in + i];
            let gr = &gd[r * n_out..][..n_out];
            for (o, &g) in row.iter_mut().zip(gr) {
                *o = *o + xv * g;
            }
        }
    });

    let mut gb = vec![T::zero(); n_out];
    for r in 0..batch {
        for (o, &g) in gb.iter_mut().zip(&gd[r * n_out..][..n_out]) {
            *o = *o + g;
        }
    }
    (
        Tensor::from_parts(vec![batch, n_in], gx),
        Tensor::from_parts(vec![n_in, n_out], gw),
        Tensor::from_parts(vec![n_out], gb),
    )
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { alpha * v })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Replicates each pixel into a `factor x factor` block.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("upsample_nearest", x)?;
    if factor == 0 {
        return Err(Error::Precondition("upsample factor must be >= 1".into()));
    }
    let (oh, ow) = (h * factor, w * factor);
    let xd = x.data();
    let mut y = vec![T::zero(); n * c * oh * ow];
    for (p, plane) in y.chunks_mut(oh * ow).enumerate() {
        let src = &xd[p * h * w..][..h * w];
        for i in 0..oh {
            for j in 0..ow {
                plane[i * ow + j] = src[(i / factor) * w + j / factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], y))
}

/// Adjoint of [`upsample_nearest`]: sums each block.
pub fn upsample_nearest_adjoint<T: Scalar>(g: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = dims4("upsample_nearest backward", g)?;
    let (h, w) = (oh / factor, ow / factor);
    let gd = g.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for (p, plane) in gx.chunks_mut(h * w).enumerate() {
        let src = &gd[p * oh * ow..][..oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let t = &mut plane[(i / factor) * w + j / factor];
                *t = *t + src[i * ow + j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], gx))
}

/// Keeps the top-left sample of every `factor x factor` block.
pub fn downsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4("downsample_nearest", x)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Precondition(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let xd = x.data();
    let mut y = vec![T::zero(); n * c * oh * ow];
    for (p, plane) in y.chunks_mut(oh * ow).enumerate() {
        let src = &xd[p * h * w..][..h * w];
        for i in 0..oh {
            for j in 0..ow {
                plane[i * ow + j] = src[(i * factor) * w + j * factor];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], y))
}

/// Adjoint of [`downsample_nearest`]: scatters into the sampled positions.
pub fn downsample_nearest_adjoint<T: Scalar>(g: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = dims4("downsample_nearest backward", g)?;
    let (h, w) = (oh * factor, ow * factor);
    let gd = g.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for (p, plane) in gx.chunks_mut(h * w).enumerate() {
        let src = &gd[p * oh * ow..][..oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                plane[(i * factor) * w + j * factor] = src[i * ow + j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], gx))
}

/// Values cached by the training-mode batch norm forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Scalar> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    inv_std: &[T],
) -> (Tensor<T>, Tensor<T>) {
    let [_, c, h, w] = dims4("batchnorm", x).expect("checked by caller");
    let plane = h * w;
    let mut x_hat = x.clone();
    let mut y = x.clone();
    for (p, (hat, out)) in x_hat
        .data_mut()
        .chunks_mut(plane)
        .zip(y.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let ci = p % c;
        for (hv, ov) in hat.iter_mut().zip(out.iter_mut()) {
            *hv = (*hv - mean[ci]) * inv_std[ci];
            *ov = gamma[ci] * *hv + beta[ci];
        }
    }
    (y, x_hat)
}

fn check_bn<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<[usize; 4]> {
    let d = dims4("batchnorm", x)?;
    check_bias("batchnorm gamma", gamma, d[1])?;
    check_bias("batchnorm beta", beta, d[1])?;
    Ok(d)
}

/// Training-mode batch norm: normalizes by per-channel batch statistics
/// (biased variance) and applies the affine transform.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let [n, c, h, w] = check_bn(x, gamma, beta)?;
    if n < 2 {
        return Err(Error::Precondition(format!(
            "batch norm in training mode needs a batch of at least 2, got {n}"
        )));
    }
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s = s + xd[(ni * c + ci) * plane..][..plane]
                .iter()
                .copied()
                .sum::<T>();
        }
        let m = s / count;
        let mut q = T::zero();
        for ni in 0..n {
            for &v in &xd[(ni * c + ci) * plane..][..plane] {
                q = q + (v - m) * (v - m);
            }
        }
        mean[ci] = m;
        var[ci] = q / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (y, x_hat) = bn_apply(x, gamma.data(), beta.data(), &mean, &inv_std);
    Ok((
        y,
        BatchNormCache {
            x_hat,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Inference-mode batch norm using fixed running statistics. Returns the
/// output and the normalized input.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, c, _, _] = check_bn(x, gamma, beta)?;
    check_bias("batchnorm running mean", running_mean, c)?;
    check_bias("batchnorm running var", running_var, c)?;
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    Ok(bn_apply(
        x,
        gamma.data(),
        beta.data(),
        running_mean.data(),
        &inv_std,
    ))
}

/// Input, gamma and beta gradients of training-mode batch norm.
pub fn batchnorm_train_backward<T: Scalar>(
    gy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BatchNormCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = dims4("batchnorm backward", gy).expect("shape recorded at forward");
    let plane = h * w;
    let count = T::from_usize(n * plane).unwrap();
    let (gd, xh) = (gy.data(), cache.x_hat.data());
    let mut g_beta = vec![T::zero(); c];
    let mut g_gamma = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            for (&g, &x) in gd[off..][..plane].iter().zip(&xh[off..][..plane]) {
                g_beta[ci] = g_beta[ci] + g;
                g_gamma[ci] = g_gamma[ci] + g * x;
            }
        }
    }
    let mut gx = vec![T::zero(); gy.len()];
    for (p, out) in gx.chunks_mut(plane).enumerate() {
        let ci = p % c;
        let k = gamma.data()[ci] * cache.inv_std[ci] / count;
        let off = p * plane;
        for ((o, &g), &x) in out
            .iter_mut()
            .zip(&gd[off..][..plane])
            .zip(&xh[off..][..plane])
        {
            *o = k * (count * g - g_beta[ci] - x * g_gamma[ci]);
        }
    }
    (
        Tensor::from_parts(gy.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], g_gamma),
        Tensor::from_parts(vec![c], g_beta),
    )
}

/// Input, gamma and beta gradients of inference-mode batch norm.
pub fn batchnorm_infer_backward<T: Scalar>(
    gy: &Tensor<T>,
    gamma: &Tensor<T>,
    running_var: &Tensor<T>,
    x_hat: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [_, c, h, w] = dims4("batchnorm backward", gy).expect("shape recorded at forward");
    let plane = h * w;
    let mut gx = gy.clone();
    let mut g_gamma = vec![T::zero(); c];
    for (p, out) in gx.data_mut().chunks_mut(plane).enumerate() {
        let ci = p % c;
        let k = gamma.data()[ci] / (running_var.data()[ci] + eps).sqrt();
        let xh = &x_hat.data()[p * plane..][..plane];
        for (o, &x) in out.iter_mut().zip(xh) {
            g_gamma[ci] = g_gamma[ci] + *o * x;
            *o = *o * k;
        }
    }
    (
        gx,
        Tensor::from_parts(vec![c], g_gamma),
        channel_sum(gy).expect("rank 4"),
    )
}

/// `momentum * running + (1 - momentum) * batch`, elementwise.
pub fn update_running<T: Scalar>(running: &mut Tensor<T>, batch: &[T], momentum: f64) {
    let m = lit::<T>(momentum);
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = m * *r + (T::one() - m) * b;
    }
}
