use crate::error::{Error, Result};
use crate::layers::MadfSpec;

/// Channel ladder and level layout of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Encoder levels `L`; every level halves the resolution.
    pub levels: usize,
    /// Kernel size of each encoder level, `kernels[l - 1]` for level `l`.
    pub kernels: Vec<usize>,
    /// Mask feature channels `C_m^l` for `l >= 1`.
    pub mask_channels: usize,
    /// `C_e^l = min(image_cap, image_base * 2^l)`.
    pub image_base: usize,
    pub image_cap: usize,
    /// Decoder width at level `l` is `min(decoder_cap, decoder_base * 2^(l-1))`.
    pub decoder_base: usize,
    pub decoder_cap: usize,
    /// Latent width of the point-wise normalization guide projection.
    pub pn_latent: usize,
    /// Refinement decoders `K`.
    pub refinements: usize,
    pub pn_enabled: bool,
    /// Nominal input resolution `(H, W)`.
    pub input_hw: (usize, usize),
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

pub const IMAGE_CHANNELS: usize = 3;
pub const DEFAULT_INIT_STD: f64 = 0.01;

impl ModelConfig {
    /// 64x64 inputs, four levels, two refinement decoders.
    pub fn desk() -> Self {
        ModelConfig {
            levels: 4,
            kernels: vec![7, 5, 3, 3],
            mask_channels: 16,
            image_base: 16,
            image_cap: 128,
            decoder_base: 64,
            decoder_cap: 512,
            pn_latent: 64,
            refinements: 2,
            pn_enabled: true,
            input_hw: (64, 64),
            init_std: DEFAULT_INIT_STD,
        }
    }

    /// 256x256 inputs, seven levels (deepest feature 2x2).
    pub fn full() -> Self {
        ModelConfig {
            levels: 7,
            kernels: vec![7, 5, 5, 3, 3, 3, 3],
            input_hw: (256, 256),
            ..ModelConfig::desk()
        }
    }

    /// Tiny two-level network for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            levels: 2,
            kernels: vec![3, 3],
            mask_channels: 2,
            image_base: 2,
            image_cap: 8,
            decoder_base: 4,
            decoder_cap: 8,
            pn_latent: 3,
            refinements: 2,
            pn_enabled: true,
            input_hw: (8, 8),
            init_std: 0.3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk()),
            "full" => Ok(ModelConfig::full()),
            "micro" => Ok(ModelConfig::micro()),
            other => Err(Error::config(format!(
                "unknown preset '{other}' (expected desk, full or micro)"
            ))),
        }
    }

    pub fn with_refinements(mut self, k: usize) -> Self {
        self.refinements = k;
        self
    }

    pub fn with_pn(mut self, enabled: bool) -> Self {
        self.pn_enabled = enabled;
        self
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_hw = (h, w);
        self
    }

    /// Image-branch channels `C_e^l`; level 0 is the RGB input.
    pub fn image_channels(&self, level: usize) -> usize {
        if level == 0 {
            IMAGE_CHANNELS
        } else {
            self.image_cap.min(self.image_base << level)
        }
    }

    /// Mask-branch channels `C_m^l`; level 0 is the binary mask.
    pub fn mask_channels_at(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.mask_channels
        }
    }

    /// Decoder width at `level`, which is also the lifted skip width `C_u^l`.
    pub fn decoder_width(&self, level: usize) -> usize {
        let w = if level == 0 {
            self.decoder_base / 2
        } else {
            self.decoder_base << (level - 1)
        };
        self.decoder_cap.min(w).max(1)
    }

    pub fn kernel(&self, level: usize) -> usize {
        self.kernels[level - 1]
    }

    /// Convolution geometry of encoder level `level >= 1`.
    pub fn level_spec(&self, level: usize) -> Result<MadfSpec> {
        let k = self.kernel(level);
        MadfSpec::new(
            self.image_channels(level - 1),
            self.image_channels(level),
            self.mask_channels_at(level - 1),
            self.mask_channels_at(level),
            k,
            2,
            (k - 1) / 2,
        )
    }

    /// Spatial size at `level` for the given input size.
    pub fn level_hw(&self, h: usize, w: usize, level: usize) -> (usize, usize) {
        (h >> level, w >> level)
    }

    /// Checks the ladder against an input resolution.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        let div = 1usize << self.levels;
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "input {h}x{w} is not divisible by 2^{} = {div}",
                self.levels
            )));
        }
        for level in 1..=self.levels {
            let k = self.kernel(level);
            let (ph, pw) = self.level_hw(h, w, level - 1);
            if k > ph.min(pw) {
                return Err(Error::config(format!(
                    "level {level} kernel {k} is larger than its {ph}x{pw} input"
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config(format!(
                "need at least 2 levels, got {}",
                self.levels
            )));
        }
        if self.kernels.len() != self.levels {
            return Err(Error::config(format!(
                "{} kernel sizes for {} levels",
                self.kernels.len(),
                self.levels
            )));
        }
        if let Some(k) = self.kernels.iter().find(|&&k| k == 0 || k % 2 == 0) {
            return Err(Error::config(format!(
                "encoder kernels must be odd for exact halving, got {k}"
            )));
        }
        if self.mask_channels == 0
            || self.image_base == 0
            || self.decoder_base < 2
            || self.pn_latent == 0
        {
            return Err(Error::config("channel counts must be positive"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::config("init_std must be finite and non-negative"));
        }
        self.validate_input(self.input_hw.0, self.input_hw.1)
    }
}

/// Parses `key = value` lines into `(key, value)` pairs; `#` starts a
/// comment and blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}: expected key = value, got '{line}'", lineno + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for {key}")))
}

impl ModelConfig {
    /// Exact `key = value` serialization, readable by [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let kernels: Vec<String> = self.kernels.iter().map(|k| k.to_string()).collect();
        format!(
            "levels = {}\nkernels = {}\nmask_channels = {}\nimage_base = {}\nimage_cap = {}\n\
             decoder_base = {}\ndecoder_cap = {}\npn_latent = {}\nrefinements = {}\npn_enabled = {}\n\
             input_h = {}\ninput_w = {}\ninit_std = {:?}\n",
            self.levels,
            kernels.join(","),
            self.mask_channels,
            self.image_base,
            self.image_cap,
            self.decoder_base,
            self.decoder_cap,
            self.pn_latent,
            self.refinements,
            self.pn_enabled,
            self.input_hw.0,
            self.input_hw.1,
            self.init_std
        )
    }

    /// Inverse of [`ModelConfig::to_text`]; every key is required and
    /// unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ModelConfig::desk();
        let mut seen = std::collections::HashSet::new();
        for (k, v) in parse_key_values(text)? {
            match k.as_str() {
                "levels" => c.levels = parse_value(&k, &v)?,
                "kernels" => {
                    c.kernels = v
                        .split(',')
                        .map(|p| parse_value(&k, p.trim()))
                        .collect::<Result<Vec<usize>>>()?
                }
                "mask_channels" => c.mask_channels = parse_value(&k, &v)?,
                "image_base" => c.image_base = parse_value(&k, &v)?,
                "image_cap" => c.image_cap = parse_value(&k, &v)?,
                "decoder_base" => c.decoder_base = parse_value(&k, &v)?,
                "decoder_cap" => c.decoder_cap = parse_value(&k, &v)?,
                "pn_latent" => c.pn_latent = parse_value(&k, &v)?,
                "refinements" => c.refinements = parse_value(&k, &v)?,
                "pn_enabled" => c.pn_enabled = parse_value(&k, &v)?,
                "input_h" => c.input_hw.0 = parse_value(&k, &v)?,
                "input_w" => c.input_hw.1 = parse_value(&k, &v)?,
                "init_std" => c.init_std = parse_value(&k, &v)?,
                other => return Err(Error::config(format!("unknown model config key '{other}'"))),
            }
            seen.insert(k);
        }
        if seen.len() != 13 {
            return Err(Error::config("model config text is missing keys"));
        }
        c.validate()?;
        Ok(c)
    }
}
