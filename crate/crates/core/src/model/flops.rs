use std::fmt;

use crate::error::Result;
use crate::tensor::ConvSpec;

use super::config::{ModelConfig, IMAGE_CHANNELS};

/// Multiplies of a convolution producing an `out_h`x`out_w` map, per sample.
pub fn conv_multiplies(spec: &ConvSpec, out_h: usize, out_w: usize) -> u64 {
    (out_h * out_w * spec.c_out * spec.patch_len()) as u64
}

/// Multiplies of a transposed convolution reading an `in_h`x`in_w` map.
pub fn conv_transpose_multiplies(spec: &ConvSpec, in_h: usize, in_w: usize) -> u64 {
    (in_h * in_w * spec.c_in * spec.c_out * spec.k * spec.k) as u64
}

/// Window filtering plus kernel generation of one MADF level: the generator
/// is a 1x1 map from `mask_channels` to `D` at every window.
pub fn madf_multiplies(spec: &ConvSpec, mask_channels: usize, out_h: usize, out_w: usize) -> u64 {
    let d = spec.patch_len() * spec.c_out;
    conv_multiplies(spec, out_h, out_w) + (out_h * out_w * mask_channels * d) as u64
}

/// Per-sample multiply counts of every network component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsReport {
    pub input_hw: (usize, usize),
    pub encoder: u64,
    pub recovery: u64,
    /// One entry per refinement decoder; all entries are equal.
    pub refinements: Vec<u64>,
}

impl FlopsReport {
    pub fn total(&self) -> u64 {
        self.encoder + self.recovery + self.refinements.iter().sum::<u64>()
    }

    /// `(component, multiplies)` rows, totals last.
    pub fn rows(&self) -> Vec<(String, u64)> {
        let mut rows = vec![
            ("encoder".to_string(), self.encoder),
            ("recovery".to_string(), self.recovery),
        ];
        for (k, &r) in self.refinements.iter().enumerate() {
            rows.push((format!("refinement_{}", k + 1), r));
        }
        rows.push(("total".to_string(), self.total()));
        rows
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut out = format!("input={}x{}\n", self.input_hw.0, self.input_hw.1);
        for (name, v) in self.rows() {
            out.push_str(&format!("{name}={v}\n"));
        }
        out
    }
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>16} {:>10}", "component", "multiplies", "G")?;
        for (name, v) in self.rows() {
            writeln!(f, "{name:<16} {v:>16} {:>10.3}", v as f64 / 1e9)?;
        }
        Ok(())
    }
}

/// Analytic multiply count for one sample at `h`x`w`. Normalization costs
/// two multiplies per element (standardize, then scale).
pub fn count_flops(config: &ModelConfig, h: usize, w: usize) -> Result<FlopsReport> {
    config.validate_input(h, w)?;
    let lcount = config.levels;
    let hw = |l: usize| config.level_hw(h, w, l);

    let mut encoder = conv_multiplies(
        &ConvSpec::pointwise(IMAGE_CHANNELS, config.decoder_width(0))?,
        h,
        w,
    );
    for l in 1..=lcount {
        let spec = config.level_spec(l)?;
        let (oh, ow) = hw(l);
        encoder += conv_multiplies(&spec.mask, oh, ow);
        encoder += madf_multiplies(&spec.image, spec.mask.c_out, oh, ow);
        encoder += conv_multiplies(
            &ConvSpec::pointwise(config.image_channels(l), config.decoder_width(l))?,
            oh,
            ow,
        );
    }

    let head = conv_multiplies(&ConvSpec::same(config.decoder_width(0), IMAGE_CHANNELS, 3)?, h, w);

    let mut recovery = head;
    for l in 1..=lcount {
        let (hi, lo) = (config.decoder_width(l), config.decoder_width(l - 1));
        let (ih, iw) = hw(l);
        let (oh, ow) = hw(l - 1);
        recovery += conv_transpose_multiplies(&ConvSpec::new(hi, lo, 4, 2, 1)?, ih, iw);
        recovery += conv_multiplies(&ConvSpec::same(2 * lo, lo, 3)?, oh, ow);
    }

    let mut refinement = head;
    for l in 1..=lcount {
        let (hi, lo) = (config.decoder_width(l), config.decoder_width(l - 1));
        let (oh, ow) = hw(l - 1);
        refinement += conv_multiplies(&ConvSpec::same(hi + lo, lo, 3)?, oh, ow);
        if config.pn_enabled {
            let lat = config.pn_latent;
            refinement += conv_multiplies(&ConvSpec::same(lo, lat, 3)?, oh, ow);
            refinement += 2 * conv_multiplies(&ConvSpec::same(lat, lo, 3)?, oh, ow);
        }
        refinement += 2 * (oh * ow * lo) as u64;
    }

    Ok(FlopsReport {
        input_hw: (h, w),
        encoder,
        recovery,
        refinements: vec![refinement; config.refinements],
    })
}
