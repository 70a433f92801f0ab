use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, BnState, KernelField, MadfLayerParams, PnParams};
use crate::scalar::Scalar;
use crate::tensor::{ConvSpec, Shape4, Tensor4};

use super::config::{ModelConfig, IMAGE_CHANNELS};
use super::params::{BoundParams, ParamStore};

/// Whether normalization uses batch statistics (and records running
/// averages) or the stored running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct EncoderLevelIds {
    mask_w: usize,
    mask_b: usize,
    gen_w: usize,
    gen_b: usize,
    lift_w: usize,
    lift_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct RecoveryIds {
    up_w: usize,
    up_b: usize,
    fuse_w: usize,
    fuse_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum NormIds {
    Point {
        guide_w: usize,
        guide_b: usize,
        scale_w: usize,
        scale_b: usize,
        bias_w: usize,
        bias_b: usize,
        mean: usize,
        var: usize,
    },
    Batch {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct RefineIds {
    fuse_w: usize,
    norm: NormIds,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HeadIds {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    lift0_w: usize,
    lift0_b: usize,
    /// `levels[l - 1]` is encoder level `l`.
    levels: Vec<EncoderLevelIds>,
    /// `recovery[l - 1]` maps level `l` to level `l - 1`.
    recovery: Vec<RecoveryIds>,
    recovery_head: HeadIds,
    /// `refinements[k - 1][l - 1]`.
    refinements: Vec<Vec<RefineIds>>,
    refinement_heads: Vec<HeadIds>,
}

/// Per-level encoder features.
#[derive(Clone, Debug)]
pub struct EncoderLevel {
    /// `m^l`
    pub mask: Var,
    /// Kernel field `Θ_l` as `(n, D, N_H, N_W)`; `None` at level 0.
    pub kernels: Option<Var>,
    /// `e^l`
    pub image: Var,
    /// `u^l`
    pub lifted: Var,
}

/// Encoder output for levels `0..=L`.
#[derive(Clone, Debug)]
pub struct EncoderState {
    pub levels: Vec<EncoderLevel>,
}

/// Images and features of every decoder.
#[derive(Clone, Debug)]
pub struct DecoderOutputs {
    /// `images[0]` is the recovery output, `images[k]` refinement `k`.
    /// Unclamped.
    pub images: Vec<Var>,
    /// `features[d][l]`: decoder `d` feature map at level `l`.
    pub features: Vec<Vec<Var>>,
}

/// Running-statistics update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    mean_id: usize,
    var_id: usize,
    state: BnState<T>,
}

/// Everything recorded by one [`Model::forward`].
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub params: BoundParams,
    pub encoder: EncoderState,
    pub decoders: DecoderOutputs,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Parameters of one recovery decoder block.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryBlockParams {
    /// Transposed convolution `(C_r^l, C_r^{l-1}, 4, 4)`.
    pub up_w: Var,
    pub up_b: Var,
    /// 3x3 fusion `(C_r^{l-1}, 2 C_r^{l-1}, 3, 3)`.
    pub fuse_w: Var,
    pub fuse_b: Var,
}

/// Normalization inside a refinement block.
pub enum RefineNorm<'a, T> {
    /// Point-wise normalization conditioned on the guide.
    Point {
        params: PnParams,
        bn: &'a mut BnState<T>,
    },
    /// Batch normalization with a learned per-channel affine.
    Batch {
        gamma: Var,
        beta: Var,
        bn: &'a mut BnState<T>,
    },
}

/// `r^{l-1} = lrelu(conv3x3(cat(dconv(r^l), u^{l-1})))`.
pub fn recovery_block<T: Scalar>(
    tape: &mut Tape<T>,
    r_l: Var,
    u_prev: Var,
    params: &RecoveryBlockParams,
) -> Result<Var> {
    let (rs, us) = (tape.shape(r_l), tape.shape(u_prev));
    if us.h != 2 * rs.h || us.w != 2 * rs.w || us.n != rs.n {
        return Err(Error::config(format!(
            "recovery skip {us} is not twice the resolution of {rs}"
        )));
    }
    let up_shape = tape.shape(params.up_w);
    let up_spec = ConvSpec::new(up_shape.n, up_shape.c, 4, 2, 1)?;
    let up = tape.conv_transpose2d(r_l, params.up_w, Some(params.up_b), up_spec)?;
    let cat = tape.concat_channels(up, u_prev)?;
    let fs = tape.shape(params.fuse_w);
    let fused = tape.conv2d(cat, params.fuse_w, Some(params.fuse_b), ConvSpec::same(fs.c, fs.n, 3)?)?;
    Ok(tape.leaky_relu(fused))
}

/// `f^{l-1,k} = lrelu(norm(conv3x3(cat(up2x(f^{l,k}), guide)), guide))`
/// where `guide = f^{l-1,k-1}`.
pub fn refine_block<T: Scalar>(
    tape: &mut Tape<T>,
    f_lk: Var,
    guide: Var,
    fuse_w: Var,
    norm: RefineNorm<'_, T>,
    training: bool,
) -> Result<Var> {
    let (fs, gs) = (tape.shape(f_lk), tape.shape(guide));
    if gs.h != 2 * fs.h || gs.w != 2 * fs.w || gs.n != fs.n {
        return Err(Error::config(format!(
            "refinement guide {gs} is not twice the resolution of {fs}"
        )));
    }
    let up = tape.upsample_nearest2x(f_lk);
    let cat = tape.concat_channels(up, guide)?;
    let ws = tape.shape(fuse_w);
    let x = tape.conv2d(cat, fuse_w, None, ConvSpec::same(ws.c, ws.n, 3)?)?;
    let y = match norm {
        RefineNorm::Point { params, bn } => {
            layers::point_norm(tape, x, guide, &params, bn, training)?
        }
        RefineNorm::Batch { gamma, beta, bn } => {
            let xhat = layers::batch_norm(tape, x, bn, training)?;
            tape.channel_affine(xhat, gamma, beta)?
        }
    };
    Ok(tape.leaky_relu(y))
}

/// The complete inpainting network: MADF encoder, recovery decoder and
/// `K` refinement decoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    std: f64,
}

impl<T: Scalar> Builder<'_, T> {
    fn weight(&mut self, name: String, shape: Shape4) -> usize {
        let t = Tensor4::<f64>::randn(shape, self.std, &mut self.rng).cast();
        self.store.insert(name, t, true)
    }

    fn constant(&mut self, name: String, shape: Shape4, value: f64, trainable: bool) -> usize {
        self.store
            .insert(name, Tensor4::full(shape, T::from_f64(value)), trainable)
    }

    fn bias(&mut self, name: String, c: usize) -> usize {
        self.constant(name, Shape4::new(1, c, 1, 1), 0.0, true)
    }

    fn head(&mut self, prefix: &str, c_in: usize) -> HeadIds {
        HeadIds {
            w: self.weight(format!("{prefix}.head.w"), Shape4::new(IMAGE_CHANNELS, c_in, 3, 3)),
            b: self.bias(format!("{prefix}.head.b"), IMAGE_CHANNELS),
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes every parameter from `seed`: weights are
    /// drawn from `normal(0, init_std)`, biases start at zero, normalization
    /// scales at one.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = {
            let mut b = Builder {
                store: &mut store,
                rng: ChaCha8Rng::seed_from_u64(seed),
                std: config.init_std,
            };
            Self::allocate(&config, &mut b)?
        };
        Ok(Model {
            config,
            params: store,
            layout,
        })
    }

    fn allocate(config: &ModelConfig, b: &mut Builder<'_, T>) -> Result<Layout> {
        let lcount = config.levels;
        let w0 = config.decoder_width(0);
        let lift0_w = b.weight("enc.0.lift.w".into(), Shape4::new(w0, IMAGE_CHANNELS, 1, 1));
        let lift0_b = b.bias("enc.0.lift.b".into(), w0);
        let mut levels = Vec::with_capacity(lcount);
        for l in 1..=lcount {
            let spec = config.level_spec(l)?;
            let cu = config.decoder_width(l);
            let ce = config.image_channels(l);
            levels.push(EncoderLevelIds {
                mask_w: b.weight(format!("enc.{l}.mask.w"), spec.mask_weight_shape()),
                mask_b: b.bias(format!("enc.{l}.mask.b"), spec.mask.c_out),
                gen_w: b.weight(format!("enc.{l}.gen.w"), spec.generator_weight_shape()),
                gen_b: b.bias(format!("enc.{l}.gen.b"), spec.kernel_len()),
                lift_w: b.weight(format!("enc.{l}.lift.w"), Shape4::new(cu, ce, 1, 1)),
                lift_b: b.bias(format!("enc.{l}.lift.b"), cu),
            });
        }
        let mut recovery = Vec::with_capacity(lcount);
        for l in 1..=lcount {
            let (hi, lo) = (config.decoder_width(l), config.decoder_width(l - 1));
            recovery.push(RecoveryIds {
                up_w: b.weight(format!("rec.{l}.up.w"), Shape4::new(hi, lo, 4, 4)),
                up_b: b.bias(format!("rec.{l}.up.b"), lo),
                fuse_w: b.weight(format!("rec.{l}.fuse.w"), Shape4::new(lo, 2 * lo, 3, 3)),
                fuse_b: b.bias(format!("rec.{l}.fuse.b"), lo),
            });
        }
        let recovery_head = b.head("rec", w0);
        let mut refinements = Vec::with_capacity(config.refinements);
        let mut refinement_heads = Vec::with_capacity(config.refinements);
        for k in 1..=config.refinements {
            let mut blocks = Vec::with_capacity(lcount);
            for l in 1..=lcount {
                let (hi, lo) = (config.decoder_width(l), config.decoder_width(l - 1));
                let p = format!("ref{k}.{l}");
                let fuse_w = b.weight(format!("{p}.fuse.w"), Shape4::new(lo, hi + lo, 3, 3));
                let norm = if config.pn_enabled {
                    let lat = config.pn_latent;
                    NormIds::Point {
                        guide_w: b.weight(format!("{p}.pn.guide.w"), Shape4::new(lat, lo, 3, 3)),
                        guide_b: b.bias(format!("{p}.pn.guide.b"), lat),
                        scale_w: b.weight(format!("{p}.pn.scale.w"), Shape4::new(lo, lat, 3, 3)),
                        scale_b: b.constant(
                            format!("{p}.pn.scale.b"),
                            Shape4::new(1, lo, 1, 1),
                            1.0,
                            true,
                        ),
                        bias_w: b.weight(format!("{p}.pn.bias.w"), Shape4::new(lo, lat, 3, 3)),
                        bias_b: b.bias(format!("{p}.pn.bias.b"), lo),
                        mean: b.constant(format!("{p}.bn.running_mean"), Shape4::new(1, lo, 1, 1), 0.0, false),
                        var: b.constant(format!("{p}.bn.running_var"), Shape4::new(1, lo, 1, 1), 1.0, false),
                    }
                } else {
                    NormIds::Batch {
                        gamma: b.constant(format!("{p}.bn.gamma"), Shape4::new(1, lo, 1, 1), 1.0, true),
                        beta: b.bias(format!("{p}.bn.beta"), lo),
                        mean: b.constant(format!("{p}.bn.running_mean"), Shape4::new(1, lo, 1, 1), 0.0, false),
                        var: b.constant(format!("{p}.bn.running_var"), Shape4::new(1, lo, 1, 1), 1.0, false),
                    }
                };
                blocks.push(RefineIds { fuse_w, norm });
            }
            refinements.push(blocks);
            refinement_heads.push(b.head(&format!("ref{k}"), w0));
        }
        Ok(Layout {
            lift0_w,
            lift0_b,
            levels,
            recovery,
            recovery_head,
            refinements,
            refinement_heads,
        })
    }

    /// Reconstructs parameter ids from names; fails if the store does not
    /// hold exactly the tensors this configuration needs.
    fn derive_layout(config: &ModelConfig, params: &ParamStore<T>) -> Result<Layout> {
        let mut shadow = ParamStore::<T>::new();
        let layout = {
            let mut b = Builder {
                store: &mut shadow,
                rng: ChaCha8Rng::seed_from_u64(0),
                std: 0.0,
            };
            Self::allocate(config, &mut b)?
        };
        if shadow.len() != params.len() {
            return Err(Error::config(format!(
                "parameter store holds {} tensors, configuration needs {}",
                params.len(),
                shadow.len()
            )));
        }
        for (expect, have) in shadow.iter().zip(params.iter()) {
            if expect.name != have.name || expect.value.shape() != have.value.shape() {
                return Err(Error::config(format!(
                    "parameter {} {} does not match expected {} {}",
                    have.name,
                    have.value.shape(),
                    expect.name,
                    expect.value.shape()
                )));
            }
        }
        Ok(layout)
    }

    /// Wraps an existing parameter store, validating names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Self::derive_layout(&config, &params)?;
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    fn bn_state(&self, mean: usize, var: usize) -> BnState<T> {
        let mut s = BnState::new(self.params.entry(mean).value.numel());
        s.running_mean = self.params.entry(mean).value.data().to_vec();
        s.running_var = self.params.entry(var).value.data().to_vec();
        s
    }

    /// Folds running statistics recorded by a training pass into the model.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            self.params
                .entry_mut(u.mean_id)
                .value
                .data_mut()
                .copy_from_slice(&u.state.running_mean);
            self.params
                .entry_mut(u.var_id)
                .value
                .data_mut()
                .copy_from_slice(&u.state.running_var);
        }
    }

    fn check_inputs(&self, tape: &Tape<T>, image: Var, mask: Var) -> Result<()> {
        let (is, ms) = (tape.shape(image), tape.shape(mask));
        if is.c != IMAGE_CHANNELS {
            return Err(Error::config(format!("input image must have 3 channels, got {is}")));
        }
        if ms != Shape4::new(is.n, 1, is.h, is.w) {
            return Err(Error::config(format!("mask {ms} does not match image {is}")));
        }
        if tape
            .value(mask)
            .data()
            .iter()
            .any(|&v| v != T::zero() && v != T::one())
        {
            return Err(Error::validation("mask must be binary (0 = hole, 1 = valid)"));
        }
        self.config.validate_input(is.h, is.w)
    }

    /// Runs the encoder. `image` is the damaged input with holes zeroed and
    /// `mask` the binary validity map `(n, 1, H, W)`.
    pub fn encode(&self, tape: &mut Tape<T>, p: &BoundParams, image: Var, mask: Var) -> Result<EncoderState> {
        self.check_inputs(tape, image, mask)?;
        self.encode_with(tape, p, &self.layout, image, mask)
    }

    fn encode_with(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams,
        layout: &Layout,
        image: Var,
        mask: Var,
    ) -> Result<EncoderState> {
        let lifted0 = layers::channel_lift(tape, image, p.var(layout.lift0_w), Some(p.var(layout.lift0_b)))?;
        let mut levels = vec![EncoderLevel {
            mask,
            kernels: None,
            image,
            lifted: lifted0,
        }];
        for l in 1..=self.config.levels {
            let ids = layout.levels[l - 1];
            let spec = self.config.level_spec(l)?;
            let params = MadfLayerParams {
                mask_w: p.var(ids.mask_w),
                mask_b: p.var(ids.mask_b),
                gen_w: p.var(ids.gen_w),
                gen_b: p.var(ids.gen_b),
            };
            let prev = &levels[l - 1];
            let (m, theta) = layers::mask_branch_step(tape, prev.mask, &params, &spec)?;
            let filtered = layers::madf_conv(tape, prev.image, theta, &spec.image)?;
            let e = tape.leaky_relu(filtered);
            let u = layers::channel_lift(tape, e, p.var(ids.lift_w), Some(p.var(ids.lift_b)))?;
            levels.push(EncoderLevel {
                mask: m,
                kernels: Some(theta),
                image: e,
                lifted: u,
            });
        }
        Ok(EncoderState { levels })
    }

    fn head(tape: &mut Tape<T>, p: &BoundParams, ids: HeadIds, x: Var) -> Result<Var> {
        let ws = tape.shape(p.var(ids.w));
        tape.conv2d(x, p.var(ids.w), Some(p.var(ids.b)), ConvSpec::same(ws.c, ws.n, 3)?)
    }

    /// Full forward pass producing `K + 1` output images.
    pub fn forward(&self, tape: &mut Tape<T>, image: Var, mask: Var, mode: Mode) -> Result<ForwardPass<T>> {
        let p = self.params.bind(tape);
        self.forward_bound(tape, p, image, mask, mode)
    }

    /// [`Model::forward`] with parameters already on the tape, one variable
    /// per store entry in store order.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        p: BoundParams,
        image: Var,
        mask: Var,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        self.check_inputs(tape, image, mask)?;
        if p.vars().len() != self.params.len() {
            return Err(Error::config(format!(
                "{} bound variables for {} parameters",
                p.vars().len(),
                self.params.len()
            )));
        }
        for (v, param) in p.vars().iter().zip(self.params.iter()) {
            if tape.shape(*v) != param.value.shape() {
                return Err(Error::config(format!(
                    "bound variable for {} has shape {}, expected {}",
                    param.name,
                    tape.shape(*v),
                    param.value.shape()
                )));
            }
        }
        let layout = &self.layout;
        let encoder = self.encode_with(tape, &p, layout, image, mask)?;
        let lcount = self.config.levels;
        let training = mode == Mode::Train;
        let mut bn_updates = Vec::new();

        let deepest = encoder.levels[lcount].lifted;
        let mut recovery = vec![deepest; lcount + 1];
        for l in (1..=lcount).rev() {
            let ids = layout.recovery[l - 1];
            let bp = RecoveryBlockParams {
                up_w: p.var(ids.up_w),
                up_b: p.var(ids.up_b),
                fuse_w: p.var(ids.fuse_w),
                fuse_b: p.var(ids.fuse_b),
            };
            recovery[l - 1] = recovery_block(tape, recovery[l], encoder.levels[l - 1].lifted, &bp)?;
        }
        let mut images = vec![Self::head(tape, &p, layout.recovery_head, recovery[0])?];
        let mut features = vec![recovery];

        for k in 1..=self.config.refinements {
            let guide_feats = features[k - 1].clone();
            let mut f = vec![deepest; lcount + 1];
            for l in (1..=lcount).rev() {
                let ids = layout.refinements[k - 1][l - 1];
                let (mean_id, var_id) = match ids.norm {
                    NormIds::Point { mean, var, .. } | NormIds::Batch { mean, var, .. } => (mean, var),
                };
                let mut bn = self.bn_state(mean_id, var_id);
                let norm = match ids.norm {
                    NormIds::Point {
                        guide_w,
                        guide_b,
                        scale_w,
                        scale_b,
                        bias_w,
                        bias_b,
                        ..
                    } => RefineNorm::Point {
                        params: PnParams {
                            guide_w: p.var(guide_w),
                            guide_b: p.var(guide_b),
                            scale_w: p.var(scale_w),
                            scale_b: p.var(scale_b),
                            bias_w: p.var(bias_w),
                            bias_b: p.var(bias_b),
                        },
                        bn: &mut bn,
                    },
                    NormIds::Batch { gamma, beta, .. } => RefineNorm::Batch {
                        gamma: p.var(gamma),
                        beta: p.var(beta),
                        bn: &mut bn,
                    },
                };
                f[l - 1] = refine_block(tape, f[l], guide_feats[l - 1], p.var(ids.fuse_w), norm, training)?;
                if training {
                    bn_updates.push(BnUpdate {
                        mean_id,
                        var_id,
                        state: bn,
                    });
                }
            }
            images.push(Self::head(tape, &p, layout.refinement_heads[k - 1], f[0])?);
            features.push(f);
        }

        Ok(ForwardPass {
            params: p,
            encoder,
            decoders: DecoderOutputs { images, features },
            bn_updates,
        })
    }

    /// Eval-mode forward on plain tensors; returns the `K + 1` unclamped
    /// output images.
    pub fn infer(&self, image: &Tensor4<T>, mask: &Tensor4<T>) -> Result<Vec<Tensor4<T>>> {
        let mut tape = Tape::new();
        let (x, m) = (tape.constant(image.clone()), tape.constant(mask.clone()));
        let pass = self.forward(&mut tape, x, m, Mode::Eval)?;
        Ok(pass
            .decoders
            .images
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect())
    }

    /// Kernel fields of every encoder level for the given mask; they do not
    /// depend on image content.
    pub fn kernel_fields(&self, mask: &Tensor4<T>) -> Result<Vec<KernelField<T>>> {
        let s = mask.shape();
        let mut tape = Tape::new();
        let image = tape.constant(Tensor4::zeros(Shape4::new(s.n, IMAGE_CHANNELS, s.h, s.w)));
        let m = tape.constant(mask.clone());
        self.check_inputs(&tape, image, m)?;
        let p = self.params.bind(&mut tape);
        let enc = self.encode_with(&mut tape, &p, &self.layout, image, m)?;
        enc.levels[1..]
            .iter()
            .enumerate()
            .map(|(i, lvl)| {
                let theta = lvl.kernels.expect("levels >= 1 carry kernels");
                KernelField::new(tape.value(theta).clone(), self.config.level_spec(i + 1)?.image)
            })
            .collect()
    }
}
