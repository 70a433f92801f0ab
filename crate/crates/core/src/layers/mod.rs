//! Mask-aware dynamic filtering and point-wise normalization layers.
//!
//! A MADF layer runs two branches in lock step. The mask branch convolves
//! the previous mask features and turns every output location into a full
//! convolution kernel with a 1x1 convolution. The image branch then filters
//! each window of the image features with the kernel generated for it.
//!
//! Point-wise normalization is batch normalization whose scale and bias are
//! per-element tensors predicted from a guide feature map.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, PadMode, Shape4, Tensor4};

/// Normalization epsilon used everywhere.
pub const NORM_EPS: f64 = 1e-5;
/// Running statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

/// Geometry of one MADF level: the image convolution whose kernels are
/// generated, and the mask convolution that drives the generator. Both
/// share kernel size, stride and padding so their output grids coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MadfSpec {
    pub image: ConvSpec,
    pub mask: ConvSpec,
}

impl MadfSpec {
    /// `k`x`k` stride-`s` level with zero padding on the image branch and
    /// replicate padding on the mask branch.
    pub fn new(
        image_in: usize,
        image_out: usize,
        mask_in: usize,
        mask_out: usize,
        k: usize,
        s: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(MadfSpec {
            image: ConvSpec::new(image_in, image_out, k, s, pad)?,
            mask: ConvSpec::new(mask_in, mask_out, k, s, pad)?.with_pad_mode(PadMode::Replicate),
        })
    }

    /// Reals per window kernel: `c_in * k * k * c_out`.
    pub fn kernel_len(&self) -> usize {
        self.image.c_in * self.image.k * self.image.k * self.image.c_out
    }

    /// Shape of the mask convolution weights.
    pub fn mask_weight_shape(&self) -> Shape4 {
        self.mask.weight_shape()
    }

    /// Shape of the 1x1 kernel generator weights `(D, C_m, 1, 1)`.
    pub fn generator_weight_shape(&self) -> Shape4 {
        Shape4::new(self.kernel_len(), self.mask.c_out, 1, 1)
    }

    fn generator_spec(&self) -> Result<ConvSpec> {
        ConvSpec::pointwise(self.mask.c_out, self.kernel_len())
    }
}

/// Per-window kernels of one MADF level, stored as `(n, D, N_H, N_W)` so
/// that the kernel of window `(i, j)` is the `D`-vector `data[n, :, i, j]`
/// laid out as `(c_in, k, k, c_out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField<T> {
    tensor: Tensor4<T>,
    spec: ConvSpec,
}

impl<T: Scalar> KernelField<T> {
    pub fn new(tensor: Tensor4<T>, spec: ConvSpec) -> Result<Self> {
        let d = spec.patch_len() * spec.c_out;
        if tensor.shape().c != d {
            return Err(Error::config(format!(
                "kernel field has {} values per window, spec needs {d}",
                tensor.shape().c
            )));
        }
        Ok(KernelField { tensor, spec })
    }

    /// `(N_H, N_W, D)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.tensor.shape();
        (s.h, s.w, s.c)
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape().n
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn tensor(&self) -> &Tensor4<T> {
        &self.tensor
    }

    /// Kernel of window `(i, j)` of item `n`, flattened as `(c_in, k, k, c_out)`.
    pub fn kernel(&self, n: usize, i: usize, j: usize) -> Vec<T> {
        let s = self.tensor.shape();
        (0..s.c).map(|d| self.tensor.at(n, d, i, j)).collect()
    }

    /// Weight of tap `(ci, kh, kw)` for output channel `co` at window `(i, j)`.
    pub fn tap(&self, n: usize, i: usize, j: usize, co: usize, ci: usize, kh: usize, kw: usize) -> T {
        let k = self.spec.k;
        let d = ((ci * k + kh) * k + kw) * self.spec.c_out + co;
        self.tensor.at(n, d, i, j)
    }

    /// Largest deviation of any window's kernel from window `(0, 0)`.
    pub fn spatial_spread(&self) -> f64 {
        let s = self.tensor.shape();
        let mut worst = 0.0f64;
        for n in 0..s.n {
            for d in 0..s.c {
                let first = self.tensor.at(n, d, 0, 0).as_f64();
                for y in 0..s.h {
                    for x in 0..s.w {
                        worst = worst.max((self.tensor.at(n, d, y, x).as_f64() - first).abs());
                    }
                }
            }
        }
        worst
    }

    /// Squared L2 norm of each window's kernel, `(n, N_H, N_W)` row-major.
    pub fn window_energy(&self) -> Vec<f64> {
        let s = self.tensor.shape();
        let mut out = vec![0.0; s.n * s.plane()];
        for n in 0..s.n {
            for d in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let v = self.tensor.at(n, d, y, x).as_f64();
                        out[(n * s.h + y) * s.w + x] += v * v;
                    }
                }
            }
        }
        out
    }

    /// Builds a field whose every window holds the same conventional kernel
    /// `w` of shape `(c_out, c_in, k, k)`.
    pub fn broadcast(w: &Tensor4<T>, spec: ConvSpec, n: usize, nh: usize, nw: usize) -> Result<Self> {
        if w.shape() != spec.weight_shape() {
            return Err(Error::config(format!(
                "kernel {} does not match {}",
                w.shape(),
                spec.weight_shape()
            )));
        }
        let k = spec.k;
        let d = spec.patch_len() * spec.c_out;
        let tensor = Tensor4::from_fn(Shape4::new(n, d, nh, nw), |_, di, _, _| {
            let co = di % spec.c_out;
            let r = di / spec.c_out;
            let (ci, kh, kw) = (r / (k * k), (r / k) % k, r % k);
            w.at(co, ci, kh, kw)
        });
        KernelField::new(tensor, spec)
    }
}

/// Tape handles of one MADF level's parameters.
#[derive(Clone, Copy, Debug)]
pub struct MadfLayerParams {
    /// `(C_m^l, C_m^{l-1}, k, k)`
    pub mask_w: Var,
    pub mask_b: Var,
    /// `(D, C_m^l, 1, 1)`
    pub gen_w: Var,
    pub gen_b: Var,
}

/// Mask branch of one level: `m_next = relu(conv(m_prev))`, then the 1x1
/// generator maps each location of `m_next` to a window kernel.
pub fn mask_branch_step<T: Scalar>(
    tape: &mut Tape<T>,
    m_prev: Var,
    params: &MadfLayerParams,
    spec: &MadfSpec,
) -> Result<(Var, Var)> {
    if tape.shape(params.gen_w) != spec.generator_weight_shape() {
        return Err(Error::config(format!(
            "kernel generator weights {} do not produce D = {} for the image branch",
            tape.shape(params.gen_w),
            spec.kernel_len()
        )));
    }
    let pre = tape.conv2d(m_prev, params.mask_w, Some(params.mask_b), spec.mask)?;
    let m_next = tape.relu(pre);
    let theta = tape.conv2d(m_next, params.gen_w, Some(params.gen_b), spec.generator_spec()?)?;
    Ok((m_next, theta))
}

/// Convolves every window of `e_prev` with its own kernel from `theta`.
pub fn madf_conv<T: Scalar>(
    tape: &mut Tape<T>,
    e_prev: Var,
    theta: Var,
    spec: &ConvSpec,
) -> Result<Var> {
    tape.dynamic_conv2d(e_prev, theta, *spec)
}

/// `u = relu(conv1x1(e))`.
pub fn channel_lift<T: Scalar>(tape: &mut Tape<T>, e: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let ws = tape.shape(w);
    let spec = ConvSpec::pointwise(ws.c, ws.n)?;
    let pre = tape.conv2d(e, w, b, spec)?;
    Ok(tape.relu(pre))
}

/// Running statistics of one batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(BN_MOMENTUM),
            eps: T::from_f64(NORM_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Affine-free batch normalization. Training mode normalizes with batch
/// statistics and folds them into the running averages (unbiased variance);
/// eval mode uses the running averages.
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    state: &mut BnState<T>,
    training: bool,
) -> Result<Var> {
    let c = tape.shape(x).c;
    if state.channels() != c {
        return Err(Error::config(format!(
            "batch norm state has {} channels, input has {c}",
            state.channels()
        )));
    }
    if training {
        let (y, stats) = tape.batch_norm(x, state.eps, None)?;
        let stats = stats.expect("training mode yields statistics");
        let m = state.momentum;
        let unbias = if stats.count > 1 {
            T::from_f64(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for ch in 0..c {
            state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * stats.mean[ch];
            state.running_var[ch] =
                (T::one() - m) * state.running_var[ch] + m * stats.var[ch] * unbias;
        }
        Ok(y)
    } else {
        let (y, _) = tape.batch_norm(
            x,
            state.eps,
            Some((&state.running_mean, &state.running_var)),
        )?;
        Ok(y)
    }
}

/// Tape handles of a point-wise normalization module. All three
/// convolutions are 3x3, stride 1.
#[derive(Clone, Copy, Debug)]
pub struct PnParams {
    /// `(latent, guide_c, 3, 3)`
    pub guide_w: Var,
    pub guide_b: Var,
    /// `(target_c, latent, 3, 3)`
    pub scale_w: Var,
    pub scale_b: Var,
    pub bias_w: Var,
    pub bias_b: Var,
}

/// Per-element scale and bias predicted from `guide`.
pub fn pn_modulation<T: Scalar>(
    tape: &mut Tape<T>,
    guide: Var,
    params: &PnParams,
) -> Result<(Var, Var)> {
    let gw = tape.shape(params.guide_w);
    let sw = tape.shape(params.scale_w);
    let latent_spec = ConvSpec::same(gw.c, gw.n, 3)?;
    let head_spec = ConvSpec::same(sw.c, sw.n, 3)?;
    let pre = tape.conv2d(guide, params.guide_w, Some(params.guide_b), latent_spec)?;
    let latent = tape.relu(pre);
    let alpha = tape.conv2d(latent, params.scale_w, Some(params.scale_b), head_spec)?;
    let beta = tape.conv2d(latent, params.bias_w, Some(params.bias_b), head_spec)?;
    Ok((alpha, beta))
}

/// `y = alpha(guide) ⊙ batch_norm(x) + beta(guide)`.
pub fn point_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    guide: Var,
    params: &PnParams,
    bn: &mut BnState<T>,
    training: bool,
) -> Result<Var> {
    let (xs, gs) = (tape.shape(x), tape.shape(guide));
    if xs.n != gs.n || xs.h != gs.h || xs.w != gs.w {
        return Err(Error::config(format!(
            "point-wise normalization guide {gs} does not align with input {xs}"
        )));
    }
    let (alpha, beta) = pn_modulation(tape, guide, params)?;
    if tape.shape(alpha) != xs {
        return Err(Error::config(format!(
            "scale head produces {}, input is {xs}",
            tape.shape(alpha)
        )));
    }
    let xhat = batch_norm(tape, x, bn, training)?;
    let scaled = tape.mul(alpha, xhat)?;
    tape.add(scaled, beta)
}
