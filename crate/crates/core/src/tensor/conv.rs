//! im2col based convolution kernels: plain, transposed and per-window
//! (dynamic) convolution, forward and backward.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::parallel;
use crate::scalar::Scalar;

use super::{Shape4, Tensor4};

/// How out-of-image taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PadMode {
    Zeros,
    /// Clamp to the nearest border pixel.
    Replicate,
}

/// Square convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub k: usize,
    pub s: usize,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, k: usize, s: usize, pad: usize) -> Result<Self> {
        if k == 0 || s == 0 {
            return Err(Error::config(format!(
                "kernel size and stride must be >= 1 (k={k}, s={s})"
            )));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::config("channel counts must be >= 1"));
        }
        Ok(ConvSpec {
            k,
            s,
            pad,
            c_in,
            c_out,
            pad_mode: PadMode::Zeros,
        })
    }

    /// "Same" stride-1 convolution for odd `k`.
    pub fn same(c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        ConvSpec::new(c_in, c_out, k, 1, (k - 1) / 2)
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Result<Self> {
        ConvSpec::new(c_in, c_out, 1, 1, 0)
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    /// Rows of the unfolded input: `c_in * k * k`.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Number of output positions along one axis of length `len`.
    pub fn out_len(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.k {
            return Err(Error::config(format!(
                "kernel {} larger than padded input extent {padded}",
                self.k
            )));
        }
        Ok((padded - self.k) / self.s + 1)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.out_len(h)?, self.out_len(w)?))
    }

    /// Output extent of the transposed convolution along one axis.
    pub fn transpose_out_len(&self, len: usize) -> Result<usize> {
        let full = (len.max(1) - 1) * self.s + self.k;
        if len == 0 || full < 2 * self.pad + 1 {
            return Err(Error::config(format!(
                "transposed convolution with k={} s={} pad={} collapses input of extent {len}",
                self.k, self.s, self.pad
            )));
        }
        Ok(full - 2 * self.pad)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.pad == 0
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(self.c_out, self.c_in, self.k, self.k)
    }

    /// Weight layout of the transposed convolution: `(c_in, c_out, k, k)`.
    pub fn transpose_weight_shape(&self) -> Shape4 {
        Shape4::new(self.c_in, self.c_out, self.k, self.k)
    }
}

#[inline]
fn source_index(o: usize, tap: usize, s: usize, pad: usize, len: usize, mode: PadMode) -> Option<usize> {
    let pos = (o * s + tap) as isize - pad as isize;
    if pos >= 0 && (pos as usize) < len {
        Some(pos as usize)
    } else {
        match mode {
            PadMode::Zeros => None,
            PadMode::Replicate => Some(pos.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// Output positions `[lo, hi)` whose tap `tap` lands inside `[0, len)`.
#[inline]
fn valid_range(out: usize, tap: usize, s: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(s) } else { 0 };
    let hi = if len + pad > tap {
        ((len + pad - tap - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one `(c, h, w)` item into a `(c*k*k, oh*ow)` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let (k, st, pad) = (spec.k, spec.s, spec.pad);
    let p = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(ow, kw, st, pad, w);
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    let Some(iy) = source_index(oy, kh, st, pad, h, spec.pad_mode) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src = &plane[iy * w..(iy + 1) * w];
                    let (left, right) = match spec.pad_mode {
                        PadMode::Zeros => (T::zero(), T::zero()),
                        PadMode::Replicate => (src[0], src[w - 1]),
                    };
                    line[..lo].fill(left);
                    line[hi..].fill(right);
                    if hi > lo {
                        let start = lo * st + kw - pad;
                        if st == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (v, &sv) in line[lo..hi].iter_mut().zip(src[start..].iter().step_by(st)) {
                                *v = sv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a `(c*k*k, oh*ow)` matrix into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let (k, st, pad) = (spec.k, spec.s, spec.pad);
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_range(ow, kw, st, pad, w);
                for oy in 0..oh {
                    let Some(iy) = source_index(oy, kh, st, pad, h, spec.pad_mode) else {
                        continue;
                    };
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    if spec.pad_mode == PadMode::Replicate {
                        for &v in &line[..lo] {
                            dst[0] = dst[0] + v;
                        }
                        for &v in &line[hi..] {
                            dst[w - 1] = dst[w - 1] + v;
                        }
                    }
                    if hi > lo {
                        let start = lo * st + kw - pad;
                        for (d, &v) in dst[start..].iter_mut().step_by(st).zip(&line[lo..hi]) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

fn unfold<'a, T: Scalar>(
    x: &'a [T],
    c: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Cow<'a, [T]> {
    if spec.is_pointwise() {
        Cow::Borrowed(x)
    } else {
        let mut cols = vec![T::zero(); c * spec.k * spec.k * oh * ow];
        im2col(x, c, h, w, spec, oh, ow, &mut cols);
        Cow::Owned(cols)
    }
}

fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for part in parts {
        for (a, p) in acc.iter_mut().zip(part) {
            *a = *a + p;
        }
    }
    acc
}

pub(crate) fn check_conv_input<T: Scalar>(x: &Tensor4<T>, spec: &ConvSpec) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.c != spec.c_in {
        return Err(Error::config(format!(
            "convolution expects {} input channels, got {s}",
            spec.c_in
        )));
    }
    spec.out_hw(s.h, s.w)
}

fn check_bias<T: Scalar>(bias: Option<&Tensor4<T>>, c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != c {
            return Err(Error::config(format!(
                "bias has {} elements, expected {c}",
                b.numel()
            )));
        }
    }
    Ok(())
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (co, &b) in bias.iter().enumerate() {
        for v in &mut out[co * plane..(co + 1) * plane] {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Scalar>(dout: &Tensor4<T>) -> Vec<T> {
    let s = dout.shape();
    let plane = s.plane();
    let mut db = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (n * s.c + c) * plane;
            let part: T = dout.data()[start..start + plane].iter().copied().sum();
            *acc = *acc + part;
        }
    }
    db
}

/// Plain 2-D convolution. `w` has shape `(c_out, c_in, k, k)`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let (oh, ow) = check_conv_input(x, spec)?;
    if w.shape() != spec.weight_shape() {
        return Err(Error::config(format!(
            "conv weight shape {} does not match expected {}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    check_bias(bias, spec.c_out)?;
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite convolution input".into()));
    }
    let s = x.shape();
    let out_shape = Shape4::new(s.n, spec.c_out, oh, ow);
    let p = oh * ow;
    let r = spec.patch_len();
    let mut out = Tensor4::zeros(out_shape);
    parallel::for_each_chunk(out.data_mut(), spec.c_out * p, |n, dst| {
        let cols = unfold(x.item(n), s.c, s.h, s.w, spec, oh, ow);
        T::gemm(
            spec.c_out, r, p, T::one(), w.data(), r as isize, 1, &cols, p as isize, 1, T::zero(),
            dst, p as isize, 1,
        );
        if let Some(b) = bias {
            add_bias(dst, b.data(), p);
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d_forward`].
pub struct ConvGrads<T> {
    pub dx: Option<Tensor4<T>>,
    pub dw: Option<Tensor4<T>>,
    pub db: Option<Tensor4<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dout: &Tensor4<T>,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let s = x.shape();
    let os = dout.shape();
    let (oh, ow) = (os.h, os.w);
    let p = oh * ow;
    let r = spec.patch_len();

    let dx = need_dx.then(|| {
        let mut dx = Tensor4::zeros(s);
        parallel::for_each_chunk(dx.data_mut(), s.item(), |n, dst| {
            let g = dout.item(n);
            if spec.is_pointwise() {
                // dx = w^T g directly
                T::gemm(
                    r, spec.c_out, p, T::one(), w.data(), 1, r as isize, g, p as isize, 1,
                    T::zero(), dst, p as isize, 1,
                );
            } else {
                let mut dcols = vec![T::zero(); r * p];
                T::gemm(
                    r, spec.c_out, p, T::one(), w.data(), 1, r as isize, g, p as isize, 1,
                    T::zero(), &mut dcols, p as isize, 1,
                );
                col2im(&dcols, s.c, s.h, s.w, spec, oh, ow, dst);
            }
        });
        dx
    });

    let dw = need_dw.then(|| {
        let parts = parallel::map_items(s.n, |n| {
            let cols = unfold(x.item(n), s.c, s.h, s.w, spec, oh, ow);
            let mut part = vec![T::zero(); spec.c_out * r];
            T::gemm(
                spec.c_out, p, r, T::one(), dout.item(n), p as isize, 1, &cols, 1, p as isize,
                T::zero(), &mut part, r as isize, 1,
            );
            part
        });
        Tensor4::from_vec(spec.weight_shape(), sum_in_order(parts, spec.c_out * r))
            .expect("weight gradient shape")
    });

    let db = need_db.then(|| {
        Tensor4::from_vec(Shape4::new(1, spec.c_out, 1, 1), bias_grad(dout)).expect("bias shape")
    });

    ConvGrads { dx, dw, db }
}

/// Transposed convolution, the adjoint of [`conv2d_forward`] with respect
/// to its input. `w` has shape `(c_in, c_out, k, k)`.
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let s = x.shape();
    if s.c != spec.c_in {
        return Err(Error::config(format!(
            "transposed convolution expects {} input channels, got {s}",
            spec.c_in
        )));
    }
    if w.shape() != spec.transpose_weight_shape() {
        return Err(Error::config(format!(
            "transposed conv weight shape {} does not match expected {}",
            w.shape(),
            spec.transpose_weight_shape()
        )));
    }
    check_bias(bias, spec.c_out)?;
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite transposed convolution input".into()));
    }
    let oh = spec.transpose_out_len(s.h)?;
    let ow = spec.transpose_out_len(s.w)?;
    // The output, read as a convolution input, must reproduce the input grid.
    if spec.out_len(oh)? != s.h || spec.out_len(ow)? != s.w {
        return Err(Error::config("transposed convolution geometry is not invertible"));
    }
    let geom = ConvSpec {
        c_in: spec.c_out,
        c_out: spec.c_in,
        ..*spec
    };
    let rows = geom.patch_len();
    let p_in = s.plane();
    let mut out = Tensor4::zeros(Shape4::new(s.n, spec.c_out, oh, ow));
    parallel::for_each_chunk(out.data_mut(), spec.c_out * oh * ow, |n, dst| {
        let mut cols = vec![T::zero(); rows * p_in];
        T::gemm(
            rows, spec.c_in, p_in, T::one(), w.data(), 1, rows as isize, x.item(n), p_in as isize,
            1, T::zero(), &mut cols, p_in as isize, 1,
        );
        col2im(&cols, spec.c_out, oh, ow, &geom, s.h, s.w, dst);
        if let Some(b) = bias {
            add_bias(dst, b.data(), oh * ow);
        }
    });
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dout: &Tensor4<T>,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let s = x.shape();
    let os = dout.shape();
    let geom = ConvSpec {
        c_in: spec.c_out,
        c_out: spec.c_in,
        ..*spec
    };
    let rows = geom.patch_len();
    let p_in = s.plane();

    let dcols_of = |n: usize| {
        let mut dcols = vec![T::zero(); rows * p_in];
        im2col(dout.item(n), spec.c_out, os.h, os.w, &geom, s.h, s.w, &mut dcols);
        dcols
    };

    let dx = need_dx.then(|| {
        let mut dx = Tensor4::zeros(s);
        parallel::for_each_chunk(dx.data_mut(), s.item(), |n, dst| {
            let dcols = dcols_of(n);
            T::gemm(
                spec.c_in, rows, p_in, T::one(), w.data(), rows as isize, 1, &dcols,
                p_in as isize, 1, T::zero(), dst, p_in as isize, 1,
            );
        });
        dx
    });

    let dw = need_dw.then(|| {
        let parts = parallel::map_items(s.n, |n| {
            let dcols = dcols_of(n);
            let mut part = vec![T::zero(); spec.c_in * rows];
            T::gemm(
                spec.c_in, p_in, rows, T::one(), x.item(n), p_in as isize, 1, &dcols, 1,
                p_in as isize, T::zero(), &mut part, rows as isize, 1,
            );
            part
        });
        Tensor4::from_vec(
            spec.transpose_weight_shape(),
            sum_in_order(parts, spec.c_in * rows),
        )
        .expect("weight gradient shape")
    });

    let db = need_db.then(|| {
        Tensor4::from_vec(Shape4::new(1, spec.c_out, 1, 1), bias_grad(dout)).expect("bias shape")
    });

    ConvGrads { dx, dw, db }
}

/// Checks that a kernel field tensor `(n, D, nh, nw)` pairs with input `x`.
pub(crate) fn check_dynamic(
    x: Shape4,
    theta: Shape4,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    if x.c != spec.c_in {
        return Err(Error::config(format!(
            "dynamic convolution expects {} input channels, got {x}",
            spec.c_in
        )));
    }
    let (oh, ow) = spec.out_hw(x.h, x.w)?;
    let d = spec.patch_len() * spec.c_out;
    if theta != Shape4::new(x.n, d, oh, ow) {
        return Err(Error::config(format!(
            "kernel field {theta} does not match input {x} (expected {}x{d}x{oh}x{ow})",
            x.n
        )));
    }
    Ok((oh, ow))
}

/// Per-window convolution: window `(i, j)` of item `n` is convolved with
/// its own kernel `theta[n, :, i, j]`, laid out as `(c_in, k, k, c_out)`.
pub fn dynamic_conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    theta: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let s = x.shape();
    let (oh, ow) = check_dynamic(s, theta.shape(), spec)?;
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite dynamic convolution input".into()));
    }
    let p = oh * ow;
    let r = spec.patch_len();
    let c_out = spec.c_out;
    let mut out = Tensor4::zeros(Shape4::new(s.n, c_out, oh, ow));
    parallel::for_each_chunk(out.data_mut(), c_out * p, |n, dst| {
        let cols = unfold(x.item(n), s.c, s.h, s.w, spec, oh, ow);
        let th = theta.item(n);
        for ri in 0..r {
            let col = &cols[ri * p..(ri + 1) * p];
            for co in 0..c_out {
                let kern = &th[(ri * c_out + co) * p..(ri * c_out + co + 1) * p];
                let acc = &mut dst[co * p..(co + 1) * p];
                for ((a, &kv), &xv) in acc.iter_mut().zip(kern).zip(col) {
                    *a = *a + kv * xv;
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`dynamic_conv2d_forward`] with respect to input and kernels.
pub fn dynamic_conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    theta: &Tensor4<T>,
    dout: &Tensor4<T>,
    spec: &ConvSpec,
    need_dx: bool,
    need_dtheta: bool,
) -> (Option<Tensor4<T>>, Option<Tensor4<T>>) {
    let s = x.shape();
    let os = dout.shape();
    let (oh, ow) = (os.h, os.w);
    let p = oh * ow;
    let r = spec.patch_len();
    let c_out = spec.c_out;

    let dtheta = need_dtheta.then(|| {
        let mut dt = Tensor4::zeros(theta.shape());
        parallel::for_each_chunk(dt.data_mut(), theta.shape().item(), |n, dst| {
            let cols = unfold(x.item(n), s.c, s.h, s.w, spec, oh, ow);
            let g = dout.item(n);
            for ri in 0..r {
                let col = &cols[ri * p..(ri + 1) * p];
                for co in 0..c_out {
                    let gd = &g[co * p..(co + 1) * p];
                    let out = &mut dst[(ri * c_out + co) * p..(ri * c_out + co + 1) * p];
                    for ((o, &gv), &xv) in out.iter_mut().zip(gd).zip(col) {
                        *o = gv * xv;
                    }
                }
            }
        });
        dt
    });

    let dx = need_dx.then(|| {
        let mut dx = Tensor4::zeros(s);
        parallel::for_each_chunk(dx.data_mut(), s.item(), |n, dst| {
            let th = theta.item(n);
            let g = dout.item(n);
            let mut dcols = vec![T::zero(); r * p];
            for ri in 0..r {
                let dc = &mut dcols[ri * p..(ri + 1) * p];
                for co in 0..c_out {
                    let kern = &th[(ri * c_out + co) * p..(ri * c_out + co + 1) * p];
                    let gd = &g[co * p..(co + 1) * p];
                    for ((d, &kv), &gv) in dc.iter_mut().zip(kern).zip(gd) {
                        *d = *d + kv * gv;
                    }
                }
            }
            if spec.is_pointwise() {
                dst.copy_from_slice(&dcols);
            } else {
                col2im(&dcols, s.c, s.h, s.w, spec, oh, ow, dst);
            }
        });
        dx
    });

    (dx, dtheta)
}
