//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied during one forward pass.
//! [`Tape::backward`] walks the records in reverse and accumulates
//! gradients into the leaves that asked for them.

pub mod gradcheck;

use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::conv::{self, ConvSpec};
use crate::tensor::{Shape4, Tensor4};

pub use gradcheck::{grad_check, GradCheckReport};

/// Negative-side slope of the leaky ReLU used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.2;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with slope [`LEAKY_SLOPE`].
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    v * T::from_f64(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::from_f64(LEAKY_SLOPE)
                }
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance per channel.
    pub var: Vec<T>,
    /// Elements reduced per channel.
    pub count: usize,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    DynamicConv2d {
        x: Var,
        theta: Var,
        spec: ConvSpec,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Upsample2x {
        x: Var,
    },
    AvgPool2x {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: T,
    },
    /// `y = scale ⊙ x + shift` with constant `scale`, `shift`.
    ConstAffine {
        x: Var,
        scale: Vec<T>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    /// Output is the normalized input; `inv_std` per channel.
    BatchNorm {
        x: Var,
        inv_std: Vec<T>,
        training: bool,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    AbsDiffSum {
        a: Var,
        b: Var,
        weight: Option<Vec<T>>,
        scale: T,
    },
    Gram {
        x: Var,
        scale: T,
    },
    MaskedTv {
        x: Var,
        horizontal: Vec<T>,
        vertical: Vec<T>,
        scale: T,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    multiplies: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Shape4>,
}

impl<T: Scalar> Gradients<T> {
    /// Raw gradient of `v`, `None` if `v` is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when unreachable.
    pub fn wrt(&self, v: Var) -> Tensor4<T> {
        let shape = self.shapes[v.id];
        match self.get(v) {
            Some(g) => Tensor4::from_vec(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor4::zeros(shape),
        }
    }

    /// Moves the gradient of `v` out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        None => *slot = Some(g),
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            multiplies: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Floating point multiplications performed by recorded layer ops
    /// (convolutions, normalization scaling and elementwise products).
    pub fn multiplies(&self) -> u64 {
        self.multiplies
    }

    /// Hash of the side every non-differentiable point is evaluated on:
    /// the sign of each activation input, weighted absolute difference and
    /// total-variation pair. Two evaluations of the same graph with equal
    /// signatures lie on the same smooth piece (up to hash collisions).
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut see = |v: T| {
            let class: u8 = if v > T::zero() {
                2
            } else if v < T::zero() {
                0
            } else {
                1
            };
            class.hash(&mut h);
        };
        for n in &self.nodes {
            match &n.op {
                Op::Act { x, .. } => self.nodes[x.id].value.data().iter().for_each(|&v| see(v)),
                Op::AbsDiffSum { a, b, weight, .. } => {
                    let (a, b) = (self.nodes[a.id].value.data(), self.nodes[b.id].value.data());
                    for i in 0..a.len() {
                        if weight.as_ref().map_or(true, |w| w[i] != T::zero()) {
                            see(a[i] - b[i]);
                        }
                    }
                }
                Op::MaskedTv {
                    x,
                    horizontal,
                    vertical,
                    ..
                } => {
                    let src = &self.nodes[x.id].value;
                    let s = src.shape();
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for y in 0..s.h {
                                for xx in 0..s.w {
                                    let i = (n * s.h + y) * s.w + xx;
                                    if horizontal[i] != T::zero() && xx + 1 < s.w {
                                        see(src.at(n, c, y, xx + 1) - src.at(n, c, y, xx));
                                    }
                                    if vertical[i] != T::zero() && y + 1 < s.h {
                                        see(src.at(n, c, y + 1, xx) - src.at(n, c, y, xx));
                                    }
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.id]
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id, tape: self.id }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Leaf that gradients flow into when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        )?;
        let o = value.shape();
        self.multiplies += (o.numel() * spec.patch_len()) as u64;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::Conv2d { x, w, b, spec }, rg))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let value = conv::conv_transpose2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        )?;
        self.multiplies += (self.shape(x).numel() * spec.c_out * spec.k * spec.k) as u64;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, spec }, rg))
    }

    /// Convolution whose kernel differs per output window; `theta` has
    /// shape `(n, c_in*k*k*c_out, out_h, out_w)`.
    pub fn dynamic_conv2d(&mut self, x: Var, theta: Var, spec: ConvSpec) -> Result<Var> {
        let value = conv::dynamic_conv2d_forward(self.value(x), self.value(theta), &spec)?;
        self.multiplies += (value.numel() * spec.patch_len()) as u64;
        let rg = self.any_grad(&[x, theta]);
        Ok(self.push(value, Op::DynamicConv2d { x, theta, spec }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Act { x, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::LeakyRelu)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(Error::config(format!(
                "cannot concatenate {sa} and {sb} along channels"
            )));
        }
        let out_shape = Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        let (va, vb) = (self.value(a), self.value(b));
        for n in 0..sa.n {
            data.extend_from_slice(va.item(n));
            data.extend_from_slice(vb.item(n));
        }
        let value = Tensor4::from_vec(out_shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let src = self.value(x);
        let value = Tensor4::from_fn(Shape4::new(s.n, s.c, 2 * s.h, 2 * s.w), |n, c, y, xx| {
            src.at(n, c, y / 2, xx / 2)
        });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Upsample2x { x }, rg)
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns dropped.
    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h < 2 || s.w < 2 {
            return Err(Error::config(format!("cannot pool {s}")));
        }
        let src = self.value(x);
        let quarter = T::from_f64(0.25);
        let value = Tensor4::from_fn(Shape4::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, y, xx| {
            (src.at(n, c, 2 * y, 2 * xx)
                + src.at(n, c, 2 * y, 2 * xx + 1)
                + src.at(n, c, 2 * y + 1, 2 * xx)
                + src.at(n, c, 2 * y + 1, 2 * xx + 1))
                * quarter
        });
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::AvgPool2x { x }, rg))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<Shape4> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::config(format!("{what}: shape {sa} vs {sb}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.check_same(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor4::from_vec(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.check_same(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor4::from_vec(shape, data)?;
        self.multiplies += shape.numel() as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale { x, s }, rg)
    }

    /// `scale ⊙ x + shift` with constant tensors of `x`'s shape.
    pub fn const_affine(&mut self, x: Var, scale: &Tensor4<T>, shift: &Tensor4<T>) -> Result<Var> {
        let s = self.shape(x);
        if scale.shape() != s || shift.shape() != s {
            return Err(Error::config(format!(
                "affine constants {} / {} do not match {s}",
                scale.shape(),
                shift.shape()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(scale.data())
            .zip(shift.data())
            .map(|((&v, &a), &b)| a * v + b)
            .collect();
        let value = Tensor4::from_vec(s, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::ConstAffine {
                x,
                scale: scale.data().to_vec(),
            },
            rg,
        ))
    }

    /// Per-channel `gamma * x + beta`; `gamma`, `beta` have shape `(1, c, 1, 1)`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        let expect = Shape4::new(1, s.c, 1, 1);
        if self.shape(gamma) != expect || self.shape(beta) != expect {
            return Err(Error::config(format!(
                "channel affine parameters must be {expect} for input {s}"
            )));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = self.value(x);
        let value = Tensor4::from_fn(s, |n, c, y, xx| g[c] * src.at(n, c, y, xx) + b[c]);
        self.multiplies += s.numel() as u64;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(value, Op::ChannelAffine { x, gamma, beta }, rg))
    }

    /// Normalizes each channel. In training mode the batch statistics are
    /// used and returned; otherwise `running` `(mean, var)` is used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x);
        let count = s.n * s.plane();
        let plane = s.plane();
        let src = self.value(x);
        let (mean, var, stats) = match running {
            None => {
                if count == 0 {
                    return Err(Error::config("batch norm over an empty batch"));
                }
                let inv_count = T::one() / T::from_f64(count as f64);
                let mut mean = vec![T::zero(); s.c];
                let mut var = vec![T::zero(); s.c];
                for c in 0..s.c {
                    let mut acc = T::zero();
                    for n in 0..s.n {
                        let start = (n * s.c + c) * plane;
                        acc = acc + src.data()[start..start + plane].iter().copied().sum();
                    }
                    let mu = acc * inv_count;
                    let mut sq = T::zero();
                    for n in 0..s.n {
                        let start = (n * s.c + c) * plane;
                        for &v in &src.data()[start..start + plane] {
                            let d = v - mu;
                            sq = sq + d * d;
                        }
                    }
                    mean[c] = mu;
                    var[c] = sq * inv_count;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
            Some((m, v)) => {
                if m.len() != s.c || v.len() != s.c {
                    return Err(Error::config(format!(
                        "running statistics have {} channels, input {s}",
                        m.len()
                    )));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let value = Tensor4::from_fn(s, |n, c, y, xx| (src.at(n, c, y, xx) - mean[c]) * inv_std[c]);
        self.multiplies += s.numel() as u64;
        let rg = self.any_grad(&[x]);
        let training = stats.is_some();
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                inv_std,
                training,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor4::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let value = Tensor4::scalar(self.value(x).sum() / T::from_f64(n as f64));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Mean { x }, rg)
    }

    /// `scale * Σ weight ⊙ |a − b|`, a scalar.
    pub fn abs_diff_sum(
        &mut self,
        a: Var,
        b: Var,
        weight: Option<&Tensor4<T>>,
        scale: T,
    ) -> Result<Var> {
        let shape = self.check_same(a, b, "abs_diff_sum")?;
        if let Some(w) = weight {
            if w.shape() != shape {
                return Err(Error::config(format!(
                    "abs_diff_sum weight {} does not match {shape}",
                    w.shape()
                )));
            }
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let total: T = match weight {
            Some(w) => va
                .iter()
                .zip(vb)
                .zip(w.data())
                .map(|((&x, &y), &wt)| wt * (x - y).abs())
                .sum(),
            None => va.iter().zip(vb).map(|(&x, &y)| (x - y).abs()).sum(),
        };
        let value = Tensor4::scalar(total * scale);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            value,
            Op::AbsDiffSum {
                a,
                b,
                weight: weight.map(|w| w.data().to_vec()),
                scale,
            },
            rg,
        ))
    }

    /// Per-item channel Gram matrix `scale * F Fᵀ`, shape `(n, 1, c, c)`.
    pub fn gram(&mut self, x: Var, scale: T) -> Var {
        let s = self.shape(x);
        let p = s.plane();
        let src = self.value(x);
        let mut out = Tensor4::zeros(Shape4::new(s.n, 1, s.c, s.c));
        for n in 0..s.n {
            let f = src.item(n);
            let dst = &mut out.data_mut()[n * s.c * s.c..(n + 1) * s.c * s.c];
            T::gemm(s.c, p, s.c, scale, f, p as isize, 1, f, 1, p as isize, T::zero(), dst, s.c as isize, 1);
        }
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gram { x, scale }, rg)
    }

    /// `scale * Σ |x[i,j+1] − x[i,j]| + |x[i+1,j] − x[i,j]|` over the pairs
    /// flagged in `horizontal` / `vertical` (shape `(n, 1, h, w)`, indexed by
    /// the pair's first pixel), summed over channels.
    pub fn masked_tv(
        &mut self,
        x: Var,
        horizontal: &Tensor4<T>,
        vertical: &Tensor4<T>,
        scale: T,
    ) -> Result<Var> {
        let s = self.shape(x);
        let expect = Shape4::new(s.n, 1, s.h, s.w);
        if horizontal.shape() != expect || vertical.shape() != expect {
            return Err(Error::config(format!("tv pair maps must be {expect}")));
        }
        let src = self.value(x);
        let mut total = T::zero();
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for xx in 0..s.w {
                        let v = src.at(n, c, y, xx);
                        let wh = horizontal.at(n, 0, y, xx);
                        if wh != T::zero() && xx + 1 < s.w {
                            total = total + wh * (src.at(n, c, y, xx + 1) - v).abs();
                        }
                        let wv = vertical.at(n, 0, y, xx);
                        if wv != T::zero() && y + 1 < s.h {
                            total = total + wv * (src.at(n, c, y + 1, xx) - v).abs();
                        }
                    }
                }
            }
        }
        let value = Tensor4::scalar(total * scale);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::MaskedTv {
                x,
                horizontal: horizontal.data().to_vec(),
                vertical: vertical.data().to_vec(),
                scale,
            },
            rg,
        ))
    }

    /// `Σ coeff * term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, c) in terms {
            let s = self.shape(v);
            if s != Shape4::scalar() {
                return Err(Error::config(format!("weighted_sum term has shape {s}")));
            }
            total = total + c * self.value(v).data()[0];
        }
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor4::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse accumulation from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id || loss.id >= self.nodes.len() {
            return Err(Error::Internal("loss variable does not belong to this tape".into()));
        }
        if self.shape(loss) != Shape4::scalar() {
            return Err(Error::config(format!(
                "backward needs a 1x1x1x1 loss, got {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let mut leaf_grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(id, node, g, &mut grads, &mut leaf_grads)?;
        }

        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn backprop_node(
        &self,
        id: usize,
        node: &Node<T>,
        g: Vec<T>,
        grads: &mut [Option<Vec<T>>],
        leaf_grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let mut send = |v: Var, grad: Vec<T>| -> Result<()> {
            if v.id >= id {
                return Err(Error::Internal(format!(
                    "tape order violated: node {id} depends on node {}",
                    v.id
                )));
            }
            if self.nodes[v.id].requires_grad {
                accumulate(&mut grads[v.id], grad);
            }
            Ok(())
        };
        let wants = |v: Var| self.nodes[v.id].requires_grad;
        let out_shape = node.value.shape();

        match &node.op {
            Op::Leaf => {
                leaf_grads[id] = Some(g);
            }
            Op::Conv2d { x, w, b, spec } => {
                let dout = Tensor4::from_vec(out_shape, g)?;
                let r = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &dout,
                    spec,
                    wants(*x),
                    wants(*w),
                    b.map(wants).unwrap_or(false),
                );
                if let Some(dx) = r.dx {
                    send(*x, dx.into_vec())?;
                }
                if let Some(dw) = r.dw {
                    send(*w, dw.into_vec())?;
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    send(*b, db.into_vec())?;
                }
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let dout = Tensor4::from_vec(out_shape, g)?;
                let r = conv::conv_transpose2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &dout,
                    spec,
                    wants(*x),
                    wants(*w),
                    b.map(wants).unwrap_or(false),
                );
                if let Some(dx) = r.dx {
                    send(*x, dx.into_vec())?;
                }
                if let Some(dw) = r.dw {
                    send(*w, dw.into_vec())?;
                }
                if let (Some(b), Some(db)) = (b, r.db) {
                    send(*b, db.into_vec())?;
                }
            }
            Op::DynamicConv2d { x, theta, spec } => {
                let dout = Tensor4::from_vec(out_shape, g)?;
                let (dx, dtheta) = conv::dynamic_conv2d_backward(
                    self.value(*x),
                    self.value(*theta),
                    &dout,
                    spec,
                    wants(*x),
                    wants(*theta),
                );
                if let Some(dx) = dx {
                    send(*x, dx.into_vec())?;
                }
                if let Some(dt) = dtheta {
                    send(*theta, dt.into_vec())?;
                }
            }
            Op::Act { x, kind } => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * kind.derivative_from_output(y))
                    .collect();
                send(*x, dx)?;
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (la, lb) = (sa.item(), sb.item());
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for n in 0..sa.n {
                    let base = n * (la + lb);
                    ga.extend_from_slice(&g[base..base + la]);
                    gb.extend_from_slice(&g[base + la..base + la + lb]);
                }
                if wants(*a) {
                    send(*a, ga)?;
                }
                if wants(*b) {
                    send(*b, gb)?;
                }
            }
            Op::Upsample2x { x } => {
                let s = self.shape(*x);
                let mut dx = vec![T::zero(); s.numel()];
                let ow = 2 * s.w;
                for nc in 0..s.n * s.c {
                    for y in 0..2 * s.h {
                        for xx in 0..ow {
                            let i = nc * s.plane() + (y / 2) * s.w + xx / 2;
                            dx[i] = dx[i] + g[(nc * 2 * s.h + y) * ow + xx];
                        }
                    }
                }
                send(*x, dx)?;
            }
            Op::AvgPool2x { x } => {
                let s = self.shape(*x);
                let (oh, ow) = (s.h / 2, s.w / 2);
                let quarter = T::from_f64(0.25);
                let mut dx = vec![T::zero(); s.numel()];
                for nc in 0..s.n * s.c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = g[(nc * oh + y) * ow + xx] * quarter;
                            for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                dx[nc * s.plane() + (2 * y + dy) * s.w + 2 * xx + dxo] = gv;
                            }
                        }
                    }
                }
                send(*x, dx)?;
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    send(*a, g.clone())?;
                }
                if wants(*b) {
                    send(*b, g)?;
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let da = g
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    send(*a, da)?;
                }
                if wants(*b) {
                    let db = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    send(*b, db)?;
                }
            }
            Op::Scale { x, s } => {
                send(*x, g.iter().map(|&v| v * *s).collect())?;
            }
            Op::ConstAffine { x, scale } => {
                send(*x, g.iter().zip(scale).map(|(&v, &a)| v * a).collect())?;
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let gam = self.value(*gamma).data();
                let src = self.value(*x).data();
                if wants(*x) {
                    let mut dx = g.clone();
                    for (i, v) in dx.iter_mut().enumerate() {
                        *v = *v * gam[(i / plane) % s.c];
                    }
                    send(*x, dx)?;
                }
                let mut dg = vec![T::zero(); s.c];
                let mut db = vec![T::zero(); s.c];
                for (i, (&gv, &xv)) in g.iter().zip(src).enumerate() {
                    let c = (i / plane) % s.c;
                    dg[c] = dg[c] + gv * xv;
                    db[c] = db[c] + gv;
                }
                if wants(*gamma) {
                    send(*gamma, dg)?;
                }
                if wants(*beta) {
                    send(*beta, db)?;
                }
            }
            Op::BatchNorm {
                x,
                inv_std,
                training,
            } => {
                let s = out_shape;
                let plane = s.plane();
                let xhat = node.value.data();
                let mut dx = vec![T::zero(); s.numel()];
                if *training {
                    let m = T::from_f64((s.n * plane) as f64);
                    for c in 0..s.c {
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for n in 0..s.n {
                            let start = (n * s.c + c) * plane;
                            for i in start..start + plane {
                                sum_g = sum_g + g[i];
                                sum_gx = sum_gx + g[i] * xhat[i];
                            }
                        }
                        let k = inv_std[c] / m;
                        for n in 0..s.n {
                            let start = (n * s.c + c) * plane;
                            for i in start..start + plane {
                                dx[i] = k * (m * g[i] - sum_g - xhat[i] * sum_gx);
                            }
                        }
                    }
                } else {
                    for (i, d) in dx.iter_mut().enumerate() {
                        *d = g[i] * inv_std[(i / plane) % s.c];
                    }
                }
                send(*x, dx)?;
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0]; n])?;
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / T::from_f64(n as f64); n])?;
            }
            Op::AbsDiffSum {
                a,
                b,
                weight,
                scale,
            } => {
                let k = g[0] * *scale;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<T> = match weight {
                    Some(w) => va
                        .iter()
                        .zip(vb)
                        .zip(w)
                        .map(|((&x, &y), &wt)| k * wt * sign(x - y))
                        .collect(),
                    None => va.iter().zip(vb).map(|(&x, &y)| k * sign(x - y)).collect(),
                };
                if wants(*b) {
                    send(*b, da.iter().map(|&v| -v).collect())?;
                }
                if wants(*a) {
                    send(*a, da)?;
                }
            }
            Op::Gram { x, scale } => {
                let s = self.shape(*x);
                let p = s.plane();
                let src = self.value(*x);
                let mut dx = vec![T::zero(); s.numel()];
                let cc = s.c * s.c;
                for n in 0..s.n {
                    let gn = &g[n * cc..(n + 1) * cc];
                    // (dG + dGᵀ)
                    let mut sym = vec![T::zero(); cc];
                    for i in 0..s.c {
                        for j in 0..s.c {
                            sym[i * s.c + j] = gn[i * s.c + j] + gn[j * s.c + i];
                        }
                    }
                    let dst = &mut dx[n * s.item()..(n + 1) * s.item()];
                    T::gemm(
                        s.c, s.c, p, *scale, &sym, s.c as isize, 1, src.item(n), p as isize, 1,
                        T::zero(), dst, p as isize, 1,
                    );
                }
                send(*x, dx)?;
            }
            Op::MaskedTv {
                x,
                horizontal,
                vertical,
                scale,
            } => {
                let s = self.shape(*x);
                let src = self.value(*x);
                let k = g[0] * *scale;
                let mut dx = vec![T::zero(); s.numel()];
                for n in 0..s.n {
                    for c in 0..s.c {
                        for y in 0..s.h {
                            for xx in 0..s.w {
                                let m = (n * s.h + y) * s.w + xx;
                                let i = s.index(n, c, y, xx);
                                let v = src.data()[i];
                                if horizontal[m] != T::zero() && xx + 1 < s.w {
                                    let d = horizontal[m] * k * sign(src.data()[i + 1] - v);
                                    dx[i + 1] = dx[i + 1] + d;
                                    dx[i] = dx[i] - d;
                                }
                                if vertical[m] != T::zero() && y + 1 < s.h {
                                    let j = i + s.w;
                                    let d = vertical[m] * k * sign(src.data()[j] - v);
                                    dx[j] = dx[j] + d;
                                    dx[i] = dx[i] - d;
                                }
                            }
                        }
                    }
                }
                send(*x, dx)?;
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    if wants(v) {
                        send(v, vec![g[0] * c])?;
                    }
                }
            }
        }
        Ok(())
    }
}
