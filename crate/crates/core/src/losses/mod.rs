//! Reconstruction, perceptual, style and total-variation losses and the
//! per-decoder supervision schedule.
//!
//! Every normalizer counts all elements of the tensor it refers to,
//! including the batch and channel dimensions.

pub mod feature_net;

use std::fmt::Write as _;
use std::str::FromStr;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

pub use feature_net::{FeatureBackbone, FeatureNet, FEATURE_CHANNELS, FEATURE_NET_SEED};

/// Loss coefficients. `L_1 = L_valid + hole * L_hole` and
/// `L_total = L_1 + perc * L_perc + style * L_style + tv * L_tv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub hole: f64,
    pub perc: f64,
    pub style: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            hole: 6.0,
            perc: 0.05,
            style: 120.0,
            tv: 0.1,
        }
    }
}

/// Which loss terms supervise each decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Terms are added decoder by decoder: `L_1` everywhere, perceptual
    /// from the first refinement on, style and TV on the last decoder.
    CoarseToFine,
    /// Every decoder gets `L_total`.
    Same,
    /// Only the last decoder is supervised, with `L_total`.
    None,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse-to-fine" => Ok(Schedule::CoarseToFine),
            "same" => Ok(Schedule::Same),
            "none" => Ok(Schedule::None),
            other => Err(Error::config(format!(
                "unknown schedule '{other}' (expected coarse-to-fine, same or none)"
            ))),
        }
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schedule::CoarseToFine => "coarse-to-fine",
            Schedule::Same => "same",
            Schedule::None => "none",
        })
    }
}

/// Terms enabled for one decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermSet {
    pub l1: bool,
    pub perc: bool,
    pub style_tv: bool,
}

impl TermSet {
    const FULL: TermSet = TermSet {
        l1: true,
        perc: true,
        style_tv: true,
    };
    const OFF: TermSet = TermSet {
        l1: false,
        perc: false,
        style_tv: false,
    };

    pub fn any(&self) -> bool {
        self.l1 || self.perc || self.style_tv
    }
}

impl Schedule {
    /// Terms of decoder `d` among `decoders` (recovery is `d = 0`).
    pub fn terms(&self, d: usize, decoders: usize) -> TermSet {
        let last = d + 1 == decoders;
        match self {
            Schedule::Same => TermSet::FULL,
            Schedule::None if last => TermSet::FULL,
            Schedule::None => TermSet::OFF,
            Schedule::CoarseToFine => TermSet {
                l1: true,
                perc: d >= 1 || last,
                style_tv: last,
            },
        }
    }
}

/// Loss values of one decoder output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DecoderLoss {
    pub l_hole: f64,
    pub l_valid: f64,
    pub l_perc: f64,
    pub l_style: f64,
    pub l_tv: f64,
    /// Weighted sum of the scheduled terms; zero when unsupervised.
    pub composite: f64,
}

/// Per-decoder losses and their sum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub decoders: Vec<DecoderLoss>,
    pub total: f64,
}

impl LossReport {
    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        ok(self.total)
            && self.decoders.iter().all(|d| {
                [d.l_hole, d.l_valid, d.l_perc, d.l_style, d.l_tv, d.composite]
                    .into_iter()
                    .all(ok)
            })
    }

    /// Space-separated `key=value` pairs.
    pub fn key_values(&self) -> String {
        let mut out = format!("total={:.6e}", self.total);
        for (d, l) in self.decoders.iter().enumerate() {
            let _ = write!(
                out,
                " d{d}.hole={:.6e} d{d}.valid={:.6e} d{d}.perc={:.6e} d{d}.style={:.6e} d{d}.tv={:.6e} d{d}.composite={:.6e}",
                l.l_hole, l.l_valid, l.l_perc, l.l_style, l.l_tv, l.composite
            );
        }
        out
    }
}

/// Scalar loss on the tape together with its report.
#[derive(Clone, Debug)]
pub struct SupervisedLoss {
    pub total: Var,
    pub report: LossReport,
}

pub(crate) fn check_binary<T: Scalar>(mask: &Tensor4<T>) -> Result<()> {
    if mask.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::validation("mask must be binary (0 = hole, 1 = valid)"));
    }
    Ok(())
}

/// Repeats a `(n, 1, h, w)` map over `c` channels, optionally as `1 - m`.
fn expand_mask<T: Scalar>(mask: &Tensor4<T>, target: Shape4, invert: bool) -> Result<Tensor4<T>> {
    let ms = mask.shape();
    if ms != Shape4::new(target.n, 1, target.h, target.w) {
        return Err(Error::config(format!("mask {ms} does not match {target}")));
    }
    Ok(Tensor4::from_fn(target, |n, _, y, x| {
        let m = mask.at(n, 0, y, x);
        if invert {
            T::one() - m
        } else {
            m
        }
    }))
}

/// `M ⊙ I_gt + (1 - M) ⊙ I_out`.
pub fn compose<T: Scalar>(i_out: &Tensor4<T>, i_gt: &Tensor4<T>, mask: &Tensor4<T>) -> Result<Tensor4<T>> {
    if i_out.shape() != i_gt.shape() {
        return Err(Error::config(format!(
            "output {} and ground truth {} differ",
            i_out.shape(),
            i_gt.shape()
        )));
    }
    check_binary(mask)?;
    let m = expand_mask(mask, i_gt.shape(), false)?;
    let data = i_out
        .data()
        .iter()
        .zip(i_gt.data())
        .zip(m.data())
        .map(|((&o, &g), &mv)| if mv == T::one() { g } else { o })
        .collect();
    Tensor4::from_vec(i_gt.shape(), data)
}

/// [`compose`] on the tape; gradient reaches `i_out` at hole pixels only.
pub fn compose_var<T: Scalar>(tape: &mut Tape<T>, i_out: Var, i_gt: &Tensor4<T>, mask: &Tensor4<T>) -> Result<Var> {
    check_binary(mask)?;
    let s = tape.shape(i_out);
    if s != i_gt.shape() {
        return Err(Error::config(format!("output {s} and ground truth {} differ", i_gt.shape())));
    }
    let hole = expand_mask(mask, s, true)?;
    let valid = expand_mask(mask, s, false)?;
    let shift = Tensor4::from_vec(
        s,
        valid.data().iter().zip(i_gt.data()).map(|(&m, &g)| m * g).collect(),
    )?;
    tape.const_affine(i_out, &hole, &shift)
}

fn masked_l1<T: Scalar>(tape: &mut Tape<T>, i_out: Var, i_gt: Var, mask: &Tensor4<T>, invert: bool) -> Result<Var> {
    let s = tape.shape(i_gt);
    let weight = expand_mask(mask, s, invert)?;
    tape.abs_diff_sum(i_out, i_gt, Some(&weight), T::from_f64(1.0 / s.numel() as f64))
}

/// `‖(1 - M) ⊙ (I_out - I_gt)‖_1 / N_{I_gt}`.
pub fn loss_hole<T: Scalar>(tape: &mut Tape<T>, i_out: Var, i_gt: Var, mask: &Tensor4<T>) -> Result<Var> {
    masked_l1(tape, i_out, i_gt, mask, true)
}

/// `‖M ⊙ (I_out - I_gt)‖_1 / N_{I_gt}`.
pub fn loss_valid<T: Scalar>(tape: &mut Tape<T>, i_out: Var, i_gt: Var, mask: &Tensor4<T>) -> Result<Var> {
    masked_l1(tape, i_out, i_gt, mask, false)
}

fn tap_l1<T: Scalar>(tape: &mut Tape<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let n = tape.shape(y).numel();
        terms.push((tape.abs_diff_sum(x, y, None, T::from_f64(1.0 / n as f64))?, T::one()));
    }
    tape.weighted_sum(&terms)
}

/// Gram matrices `K_p Ψ Ψᵀ` with `K_p = 1 / (C_p H_p W_p)`, one per tap.
pub fn gram_taps<T: Scalar>(tape: &mut Tape<T>, taps: &[Var]) -> Vec<Var> {
    taps.iter()
        .map(|&t| {
            let s = tape.shape(t);
            tape.gram(t, T::from_f64(1.0 / s.item() as f64))
        })
        .collect()
}

fn gram_l1<T: Scalar>(tape: &mut Tape<T>, a: &[Var], b: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let s = tape.shape(y);
        // (n, 1, c, c): average over the batch, divide by c^2.
        let scale = 1.0 / (s.n * s.h * s.w) as f64;
        terms.push((tape.abs_diff_sum(x, y, None, T::from_f64(scale))?, T::one()));
    }
    tape.weighted_sum(&terms)
}

/// Perceptual loss from precomputed taps of `I_out`, `I_com` and `I_gt`.
pub fn perceptual_from_taps<T: Scalar>(
    tape: &mut Tape<T>,
    out: &[Var],
    com: &[Var],
    gt: &[Var],
) -> Result<Var> {
    let a = tap_l1(tape, out, gt)?;
    let b = tap_l1(tape, com, gt)?;
    tape.weighted_sum(&[(a, T::one()), (b, T::one())])
}

/// Style loss from precomputed Gram matrices.
pub fn style_from_grams<T: Scalar>(
    tape: &mut Tape<T>,
    out: &[Var],
    com: &[Var],
    gt: &[Var],
) -> Result<Var> {
    let a = gram_l1(tape, out, gt)?;
    let b = gram_l1(tape, com, gt)?;
    tape.weighted_sum(&[(a, T::one()), (b, T::one())])
}

/// `Σ_p ‖Ψ_p(I_out) - Ψ_p(I_gt)‖_1 / N_{Ψ_p} + ‖Ψ_p(I_com) - Ψ_p(I_gt)‖_1 / N_{Ψ_p}`.
pub fn loss_perceptual<T: Scalar, B: FeatureBackbone>(
    tape: &mut Tape<T>,
    i_out: Var,
    i_com: Var,
    i_gt: Var,
    net: &B,
) -> Result<Var> {
    let (o, c, g) = (
        net.features(tape, i_out)?,
        net.features(tape, i_com)?,
        net.features(tape, i_gt)?,
    );
    perceptual_from_taps(tape, &o, &c, &g)
}

/// `Σ_p ‖K_p(G_p(I_out) - G_p(I_gt))‖_1 / C_p² + (same for I_com)`,
/// averaged over the batch.
pub fn loss_style<T: Scalar, B: FeatureBackbone>(
    tape: &mut Tape<T>,
    i_out: Var,
    i_com: Var,
    i_gt: Var,
    net: &B,
) -> Result<Var> {
    let (o, c, g) = (
        net.features(tape, i_out)?,
        net.features(tape, i_com)?,
        net.features(tape, i_gt)?,
    );
    let (go, gc, gg) = (gram_taps(tape, &o), gram_taps(tape, &c), gram_taps(tape, &g));
    style_from_grams(tape, &go, &gc, &gg)
}

/// Hole region dilated by a 3x3 structuring element, `(n, 1, h, w)`.
pub fn dilated_hole_region<T: Scalar>(mask: &Tensor4<T>) -> Tensor4<T> {
    let s = mask.shape();
    Tensor4::from_fn(s, |n, _, y, x| {
        let (y0, y1) = (y.saturating_sub(1), (y + 1).min(s.h - 1));
        let (x0, x1) = (x.saturating_sub(1), (x + 1).min(s.w - 1));
        let hit = (y0..=y1).any(|yy| (x0..=x1).any(|xx| mask.at(n, 0, yy, xx) == T::zero()));
        if hit {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Horizontal and vertical pair maps of the TV region: a pair is flagged
/// at its first pixel when both endpoints lie in the dilated hole region.
pub fn tv_pairs<T: Scalar>(mask: &Tensor4<T>) -> (Tensor4<T>, Tensor4<T>) {
    let r = dilated_hole_region(mask);
    let s = r.shape();
    let inside = |n, y, x| r.at(n, 0, y, x) == T::one();
    let flag = |b: bool| if b { T::one() } else { T::zero() };
    let horizontal = Tensor4::from_fn(s, |n, _, y, x| flag(x + 1 < s.w && inside(n, y, x) && inside(n, y, x + 1)));
    let vertical = Tensor4::from_fn(s, |n, _, y, x| flag(y + 1 < s.h && inside(n, y, x) && inside(n, y + 1, x)));
    (horizontal, vertical)
}

/// Total variation of `I_com` over pixel pairs inside the dilated hole
/// region, divided by `N_{I_com}`.
pub fn loss_tv<T: Scalar>(tape: &mut Tape<T>, i_com: Var, mask: &Tensor4<T>) -> Result<Var> {
    let s = tape.shape(i_com);
    if mask.shape() != Shape4::new(s.n, 1, s.h, s.w) {
        return Err(Error::config(format!("mask {} does not match {s}", mask.shape())));
    }
    let (h, v) = tv_pairs(mask);
    tape.masked_tv(i_com, &h, &v, T::from_f64(1.0 / s.numel() as f64))
}

/// Losses of every decoder output under `schedule`. `images` holds the
/// recovery output followed by the refinement outputs.
#[allow(clippy::too_many_arguments)]
pub fn supervision_losses<T: Scalar, B: FeatureBackbone>(
    tape: &mut Tape<T>,
    images: &[Var],
    i_gt: &Tensor4<T>,
    mask: &Tensor4<T>,
    net: &B,
    weights: &LossWeights,
    schedule: Schedule,
    refinements: usize,
) -> Result<SupervisedLoss> {
    if images.len() != refinements + 1 {
        return Err(Error::config(format!(
            "schedule expects {} decoder outputs for K = {refinements}, got {}",
            refinements + 1,
            images.len()
        )));
    }
    check_binary(mask)?;
    let gt = tape.constant(i_gt.clone());
    let gt_taps = net.features(tape, gt)?;
    let gt_grams = gram_taps(tape, &gt_taps);
    let mut report = LossReport::default();
    let mut total_terms = Vec::new();
    let val = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].as_f64();

    for (d, &out) in images.iter().enumerate() {
        let terms = schedule.terms(d, images.len());
        let com = compose_var(tape, out, i_gt, mask)?;
        let hole = loss_hole(tape, out, gt, mask)?;
        let valid = loss_valid(tape, out, gt, mask)?;
        let (out_taps, com_taps) = (net.features(tape, out)?, net.features(tape, com)?);
        let perc = perceptual_from_taps(tape, &out_taps, &com_taps, &gt_taps)?;
        let (go, gc) = (gram_taps(tape, &out_taps), gram_taps(tape, &com_taps));
        let style = style_from_grams(tape, &go, &gc, &gt_grams)?;
        let tv = loss_tv(tape, com, mask)?;

        let mut parts: Vec<(Var, T)> = Vec::new();
        if terms.l1 {
            parts.push((valid, T::one()));
            parts.push((hole, T::from_f64(weights.hole)));
        }
        if terms.perc {
            parts.push((perc, T::from_f64(weights.perc)));
        }
        if terms.style_tv {
            parts.push((style, T::from_f64(weights.style)));
            parts.push((tv, T::from_f64(weights.tv)));
        }
        let composite = if parts.is_empty() {
            0.0
        } else {
            let c = tape.weighted_sum(&parts)?;
            total_terms.push((c, T::one()));
            val(tape, c)
        };
        report.decoders.push(DecoderLoss {
            l_hole: val(tape, hole),
            l_valid: val(tape, valid),
            l_perc: val(tape, perc),
            l_style: val(tape, style),
            l_tv: val(tape, tv),
            composite,
        });
    }
    let total = tape.weighted_sum(&total_terms)?;
    report.total = val(tape, total);
    Ok(SupervisedLoss { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(c: usize, h: usize, w: usize, v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(Shape4::new(1, c, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_fixture_hole_and_valid() {
        let gt = t(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = t(1, 2, 2, &[1.0, 0.0, 3.0, 0.0]);
        let mask = t(1, 2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let mut tape = Tape::new();
        let (o, g) = (tape.constant(out), tape.constant(gt));
        let hole = loss_hole(&mut tape, o, g, &mask).unwrap();
        let valid = loss_valid(&mut tape, o, g, &mask).unwrap();
        assert_eq!(tape.value(hole).data()[0], 1.5);
        assert_eq!(tape.value(valid).data()[0], 0.0);
    }

    #[test]
    fn schedule_ladder_for_two_refinements() {
        let s = Schedule::CoarseToFine;
        assert_eq!(s.terms(0, 3), TermSet { l1: true, perc: false, style_tv: false });
        assert_eq!(s.terms(1, 3), TermSet { l1: true, perc: true, style_tv: false });
        assert_eq!(s.terms(2, 3), TermSet::FULL);
        assert_eq!(Schedule::None.terms(1, 3), TermSet::OFF);
        assert_eq!(s.terms(0, 1), TermSet::FULL);
    }

    #[test]
    fn schedule_parses_round_trip() {
        for s in [Schedule::CoarseToFine, Schedule::Same, Schedule::None] {
            assert_eq!(s.to_string().parse::<Schedule>().unwrap(), s);
        }
        assert!("fine".parse::<Schedule>().is_err());
    }

    #[test]
    fn compose_rejects_soft_mask() {
        let a = t(1, 1, 2, &[0.0, 1.0]);
        let m = t(1, 1, 2, &[0.5, 1.0]);
        assert!(matches!(compose(&a, &a, &m), Err(Error::Validation(_))));
    }

    #[test]
    fn single_hole_tv_region() {
        let mut m = Tensor4::<f64>::full(Shape4::new(1, 1, 5, 5), 1.0);
        m.set(0, 0, 2, 2, 0.0);
        let (h, v) = tv_pairs(&m);
        // 3x3 region: 2 pairs per row and per column, three of each.
        assert_eq!(h.sum(), 6.0);
        assert_eq!(v.sum(), 6.0);
        assert_eq!(h.at(0, 0, 1, 1), 1.0);
        assert_eq!(h.at(0, 0, 1, 3), 0.0);
    }
}
