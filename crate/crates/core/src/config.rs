//! Model configuration and its line-based `key=value` text form.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Number of flow fields estimated jointly (temporal slots of the GRU state).
pub const SLOTS: usize = 2;
/// Frames per input window.
pub const FRAMES: usize = 3;
/// Correlation channel count for the default pyramid (4 levels, radius 4).
pub const PAPER_CORR_CHANNELS: usize = 324;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Sstm,
    SstmPlusPlus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WarmStart {
    None,
    ShiftPair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    Conv3d,
    Conv2dTwin,
}

/// Initial GRU hidden state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenInit {
    /// `tanh` of a 1×1 projection of the context features.
    Context,
    Zeros,
}

macro_rules! text_enum {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $s),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($s => Ok($ty::$var),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(Variant { Sstm => "sstm", SstmPlusPlus => "sstm++" });
text_enum!(WarmStart { None => "none", ShiftPair => "shift_pair" });
text_enum!(ContextMode { Conv3d => "conv3d", Conv2dTwin => "conv2d_twin" });
text_enum!(HiddenInit { Context => "context", Zeros => "zeros" });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Refinement iterations `N`.
    pub iters: usize,
    /// Input frames `T`; fixed at 3.
    pub frames: usize,
    /// Residual hidden-state interval `r`.
    pub residual_interval: usize,
    /// Sequence-loss decay `γ`.
    pub gamma: f32,
    pub warm_start: WarmStart,
    pub context_mode: ContextMode,
    pub use_attention: bool,
    pub use_warp_errors: bool,
    /// Keep the attention mix `α` fixed during training.
    pub freeze_alpha: bool,
    pub hidden_init: HiddenInit,
    /// Stop gradients through the flow fed back into lookup and warping.
    pub detach_flow: bool,
    pub feature_dim: usize,
    pub context_dim: usize,
    pub hidden_dim: usize,
    pub motion_dim: usize,
    pub key_dim: usize,
    pub heads: usize,
    pub corr_levels: usize,
    pub corr_radius: usize,
    /// Enforce the 324-channel correlation layout.
    pub strict_layout: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn sstm() -> Self {
        Self {
            variant: Variant::Sstm,
            iters: 12,
            frames: FRAMES,
            residual_interval: 3,
            gamma: 0.8,
            warm_start: WarmStart::None,
            context_mode: ContextMode::Conv3d,
            use_attention: false,
            use_warp_errors: false,
            freeze_alpha: false,
            hidden_init: HiddenInit::Context,
            detach_flow: true,
            feature_dim: 256,
            context_dim: 128,
            hidden_dim: 128,
            motion_dim: 128,
            key_dim: 128,
            heads: 1,
            corr_levels: 4,
            corr_radius: 4,
            strict_layout: true,
            seed: 0,
        }
    }

    pub fn sstm_pp() -> Self {
        Self {
            variant: Variant::SstmPlusPlus,
            context_mode: ContextMode::Conv2dTwin,
            use_attention: true,
            use_warp_errors: true,
            ..Self::sstm()
        }
    }

    pub fn preset(variant: Variant) -> Self {
        match variant {
            Variant::Sstm => Self::sstm(),
            Variant::SstmPlusPlus => Self::sstm_pp(),
        }
    }

    /// Desk-scale profile: all widths divided by 4 and `N = 4`.
    pub fn toy(mut self) -> Self {
        self.feature_dim /= 4;
        self.context_dim /= 4;
        self.hidden_dim /= 4;
        self.motion_dim /= 4;
        self.key_dim /= 4;
        self.iters = 4;
        self.residual_interval = 2;
        self
    }

    pub fn corr_channels(&self) -> usize {
        let side = 2 * self.corr_radius + 1;
        self.corr_levels * side * side
    }

    /// Brightness-error planes fed to the motion encoder.
    pub fn error_channels(&self) -> usize {
        if self.use_warp_errors {
            3
        } else {
            0
        }
    }

    /// Per-slot channel count of the GRU input `X_n`.
    pub fn gru_input_dim(&self) -> usize {
        if self.use_attention {
            self.context_dim + 2 * self.motion_dim
        } else {
            self.context_dim + self.motion_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames != FRAMES {
            return bad(format!("frames must be {FRAMES}, got {}", self.frames));
        }
        match (self.variant, self.use_attention) {
            (Variant::Sstm, true) => return bad("sstm has no attention block".into()),
            (Variant::SstmPlusPlus, false) => {
                return bad("sstm++ requires use_attention=true; use variant=sstm to ablate it".into())
            }
            _ => {}
        }
        if self.iters == 0 {
            return bad("iters must be >= 1".into());
        }
        if self.residual_interval == 0 {
            return bad("residual_interval must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("context_dim", self.context_dim),
            ("hidden_dim", self.hidden_dim),
            ("motion_dim", self.motion_dim),
            ("key_dim", self.key_dim),
            ("heads", self.heads),
            ("corr_levels", self.corr_levels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.context_dim % 4 != 0 {
            return bad("context_dim must be divisible by 4".into());
        }
        if self.feature_dim % 4 != 0 {
            return bad("feature_dim must be divisible by 4".into());
        }
        if self.key_dim % self.heads != 0 || self.motion_dim % self.heads != 0 {
            return bad("key_dim and motion_dim must be divisible by heads".into());
        }
        if self.motion_dim < 4 {
            return bad("motion_dim must be >= 4".into());
        }
        if self.strict_layout && self.corr_channels() != PAPER_CORR_CHANNELS {
            return bad(format!(
                "corr_levels={} corr_radius={} give {} correlation channels, expected {PAPER_CORR_CHANNELS}",
                self.corr_levels,
                self.corr_radius,
                self.corr_channels()
            ));
        }
        Ok(())
    }

    /// Ordered `key=value` pairs covering every field.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.variant.to_string()),
            ("iters", self.iters.to_string()),
            ("frames", self.frames.to_string()),
            ("residual_interval", self.residual_interval.to_string()),
            ("gamma", self.gamma.to_string()),
            ("warm_start", self.warm_start.to_string()),
            ("context_mode", self.context_mode.to_string()),
            ("use_attention", self.use_attention.to_string()),
            ("use_warp_errors", self.use_warp_errors.to_string()),
            ("freeze_alpha", self.freeze_alpha.to_string()),
            ("hidden_init", self.hidden_init.to_string()),
            ("detach_flow", self.detach_flow.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("context_dim", self.context_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("motion_dim", self.motion_dim.to_string()),
            ("key_dim", self.key_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("corr_levels", self.corr_levels.to_string()),
            ("corr_radius", self.corr_radius.to_string()),
            ("strict_layout", self.strict_layout.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Sets one field from its text form. Setting `variant` also applies
    /// the variant's default attention flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.trim() {
                "true" | "1" | "on" => Ok(true),
                "false" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
            }
        }
        match key.trim() {
            "variant" => {
                self.variant = value.parse()?;
                self.use_attention = self.variant == Variant::SstmPlusPlus;
            }
            "iters" => self.iters = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "residual_interval" => self.residual_interval = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "warm_start" => self.warm_start = value.parse()?,
            "context_mode" => self.context_mode = value.parse()?,
            "use_attention" => self.use_attention = flag(key, value)?,
            "use_warp_errors" => self.use_warp_errors = flag(key, value)?,
            "freeze_alpha" => self.freeze_alpha = flag(key, value)?,
            "hidden_init" => self.hidden_init = value.parse()?,
            "detach_flow" => self.detach_flow = flag(key, value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "context_dim" => self.context_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "motion_dim" => self.motion_dim = num(key, value)?,
            "key_dim" => self.key_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "corr_levels" => self.corr_levels = num(key, value)?,
            "corr_radius" => self.corr_radius = num(key, value)?,
            "strict_layout" => self.strict_layout = flag(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Parses a complete config; missing keys keep the SSTM defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::sstm();
        c.apply_text(text)?;
        Ok(c)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::sstm_pp()
    }
}

/// Splits `key=value` lines.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::sstm().validate().unwrap();
        ModelConfig::sstm_pp().validate().unwrap();
        ModelConfig::sstm_pp().toy().validate().unwrap();
        assert_eq!(ModelConfig::sstm().corr_channels(), 324);
    }

    #[test]
    fn variant_attention_law() {
        let mut c = ModelConfig::sstm();
        c.use_attention = true;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::sstm_pp();
        c.use_attention = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn strict_layout_rejects_other_pyramids() {
        let mut c = ModelConfig::sstm();
        c.corr_levels = 1;
        c.corr_radius = 8;
        assert!(c.validate().is_err());
        c.strict_layout = false;
        c.validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let mut c = ModelConfig::sstm_pp().toy();
        c.gamma = 0.85;
        c.seed = 99;
        c.warm_start = WarmStart::ShiftPair;
        let back = ModelConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_frames() {
        assert!(ModelConfig::from_text("bogus=1").is_err());
        let c = ModelConfig::from_text("frames=4").unwrap();
        assert!(c.validate().is_err());
    }
}
