//! Run configuration, presets and the flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! model.input_size = 64
//! optim.lr = 0.001
//! ```
//!
//! [`Config::to_text`] writes every key in a fixed order, so parsing its
//! output reproduces the same configuration.

use std::fmt;
use std::str::FromStr;

use crate::attention::check_mask_value;
use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Interaction {
    #[default]
    Cmpi,
    Add,
    Mul,
    Concat,
    CrossAttention,
    Conv1x1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecoderKind {
    #[default]
    Transformer,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpsampleKind {
    #[default]
    Nearest,
    Bilinear,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$variant => $word),+
                }
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} `{s}` (expected one of: {})",
                        stringify!($ty),
                        [$($word),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(Interaction {
    Cmpi => "cmpi",
    Add => "add",
    Mul => "mul",
    Concat => "concat",
    CrossAttention => "cross_attention",
    Conv1x1 => "conv1x1",
});

keyword_enum!(DecoderKind {
    Transformer => "transformer",
    Conv => "conv",
});

keyword_enum!(UpsampleKind {
    Nearest => "nearest",
    Bilinear => "bilinear",
});

keyword_enum!(Activation {
    Relu => "relu",
    Gelu => "gelu",
});

/// Everything that determines the parameter layout and the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub embed_dim: usize,
    /// Swin blocks per encoder stage (even).
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub mask_value: f64,
    pub activation: Activation,
    pub relative_bias: bool,
    pub decoder_shift: bool,

    pub interaction: Interaction,
    pub cmpi_window: usize,
    pub rm_enabled: bool,
    pub single_step: bool,
    pub use_m1: bool,
    pub use_m2: bool,
    pub use_guidance: bool,
    pub rm_share_step_weights: bool,
    pub rm_residual: bool,

    pub decoder: DecoderKind,

    pub cnnr_enabled: bool,
    pub cnnr_freeze: bool,
    pub cnnr_widths: [usize; 2],
    pub cnnr_reduction: usize,
    pub cnnr_upsample: UpsampleKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Epochs between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
}

/// Ablation ids and the assignment each one applies to the full model.
pub const ABLATIONS: [(u8, &str, &str); 16] = [
    (0, "full", "no change"),
    (1, "w/ addition", "cmpi.interaction = add"),
    (2, "w/ multiplication", "cmpi.interaction = mul"),
    (3, "w/ concatenation", "cmpi.interaction = concat"),
    (4, "w/ cross-attention", "cmpi.interaction = cross_attention"),
    (5, "w/o TD", "decoder.kind = conv"),
    (6, "w/o CNNR", "cnnr.enabled = false"),
    (7, "w/o RM", "cmpi.rm_enabled = false"),
    (8, "w/ single-step", "cmpi.single_step = true"),
    (9, "w/o M1 & M2", "cmpi.use_m1 = false, cmpi.use_m2 = false"),
    (10, "w/o M1", "cmpi.use_m1 = false"),
    (11, "w/o M2", "cmpi.use_m2 = false"),
    (12, "w/o g_r/d", "cmpi.use_guidance = false"),
    (13, "Win_3", "cmpi.window = 3"),
    (14, "Win_5", "cmpi.window = 5"),
    (15, "1x1 convolution", "cmpi.interaction = conv1x1"),
];

impl Config {
    /// Desk-scale preset used by tests.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                input_size: 64,
                embed_dim: 16,
                depths: [2, 2, 2, 2],
                heads: [1, 2, 4, 8],
                window: 4,
                mask_value: -100.0,
                activation: Activation::Relu,
                relative_bias: false,
                decoder_shift: true,
                interaction: Interaction::Cmpi,
                cmpi_window: 1,
                rm_enabled: true,
                single_step: false,
                use_m1: true,
                use_m2: true,
                use_guidance: true,
                rm_share_step_weights: false,
                rm_residual: true,
                decoder: DecoderKind::Transformer,
                cnnr_enabled: true,
                cnnr_freeze: false,
                cnnr_widths: [8, 16],
                cnnr_reduction: 4,
                cnnr_upsample: UpsampleKind::Nearest,
            },
            optim: OptimConfig {
                lr: 2e-3,
                batch: 4,
                epochs: 150,
                max_steps: 300,
                decay_every: 100,
                decay_factor: 0.2,
                checkpoint_every: 0,
                augment: false,
            },
        }
    }

    /// Full-size preset with the published training schedule.
    pub fn faithful() -> Self {
        let mut c = Self::toy();
        c.model.input_size = 224;
        c.model.embed_dim = 96;
        c.model.depths = [2, 2, 6, 2];
        c.model.heads = [3, 6, 12, 24];
        c.model.window = 7;
        c.model.cnnr_widths = [64, 128];
        c.model.cnnr_reduction = 16;
        c.optim = OptimConfig {
            lr: 1e-4,
            batch: 32,
            epochs: 90,
            max_steps: 0,
            decay_every: 40,
            decay_factor: 0.2,
            checkpoint_every: 10,
            augment: true,
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "faithful" => Ok(Self::faithful()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (expected toy or faithful)"
            ))),
        }
    }

    /// Applies ablation `id` (0 to 15) to this configuration.
    pub fn apply_ablation(&mut self, id: u8) -> Result<()> {
        let (_, _, assignment) = ABLATIONS
            .iter()
            .find(|(i, _, _)| *i == id)
            .ok_or_else(|| Error::Config(format!("ablation id {id} is not in 0..=15")))?;
        if id != 0 {
            for part in assignment.split(", ") {
                let (k, v) = part.split_once(" = ").expect("well-formed ablation table");
                self.set(k, v)?;
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.input_size == 0 || !m.input_size.is_multiple_of(32) {
            return bad(format!("model.input_size {} is not a multiple of 32", m.input_size));
        }
        for (i, (&depth, &heads)) in m.depths.iter().zip(&m.heads).enumerate() {
            let c = m.embed_dim << i;
            if depth == 0 || depth % 2 != 0 {
                return bad(format!("model.depths[{i}] = {depth} must be a positive even number"));
            }
            if heads == 0 || !c.is_multiple_of(heads) {
                return bad(format!("stage {} width {c} is not divisible into {heads} heads", i + 1));
            }
        }
        if m.window == 0 {
            return bad("model.window must be positive".into());
        }
        check_mask_value(m.mask_value)?;
        if ![1, 3, 5].contains(&m.cmpi_window) {
            return bad(format!("cmpi.window {} must be 1, 3 or 5", m.cmpi_window));
        }
        if m.cnnr_widths.contains(&0) {
            return bad("cnnr.widths must be positive".into());
        }
        for w in m.cnnr_widths {
            if m.cnnr_reduction == 0 || w % m.cnnr_reduction != 0 {
                return bad(format!(
                    "cnnr width {w} is not divisible by reduction {}",
                    m.cnnr_reduction
                ));
            }
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.batch == 0 || o.decay_every == 0 {
            return bad("optim.lr, optim.batch and optim.decay_every must be positive".into());
        }
        if !(o.decay_factor > 0.0 && o.decay_factor <= 1.0) {
            return bad(format!("optim.decay_factor {} must be in (0,1]", o.decay_factor));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let o = &self.optim;
        o.lr * o.decay_factor.powi((epoch / o.decay_every) as i32)
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.optim;
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "model.input_size" => m.input_size = parse(key, v)?,
            "model.embed_dim" => m.embed_dim = parse(key, v)?,
            "model.depths" => m.depths = parse_array(key, v)?,
            "model.heads" => m.heads = parse_array(key, v)?,
            "model.window" => m.window = parse(key, v)?,
            "model.mask_value" => m.mask_value = parse(key, v)?,
            "model.activation" => m.activation = v.parse()?,
            "model.relative_bias" => m.relative_bias = parse(key, v)?,
            "model.decoder_shift" => m.decoder_shift = parse(key, v)?,
            "cmpi.interaction" => m.interaction = v.parse()?,
            "cmpi.window" => m.cmpi_window = parse(key, v)?,
            "cmpi.rm_enabled" => m.rm_enabled = parse(key, v)?,
            "cmpi.single_step" => m.single_step = parse(key, v)?,
            "cmpi.use_m1" => m.use_m1 = parse(key, v)?,
            "cmpi.use_m2" => m.use_m2 = parse(key, v)?,
            "cmpi.use_guidance" => m.use_guidance = parse(key, v)?,
            "cmpi.rm_share_step_weights" => m.rm_share_step_weights = parse(key, v)?,
            "cmpi.rm_residual" => m.rm_residual = parse(key, v)?,
            "decoder.kind" => m.decoder = v.parse()?,
            "cnnr.enabled" => m.cnnr_enabled = parse(key, v)?,
            "cnnr.freeze" => m.cnnr_freeze = parse(key, v)?,
            "cnnr.widths" => m.cnnr_widths = parse_array(key, v)?,
            "cnnr.reduction" => m.cnnr_reduction = parse(key, v)?,
            "cnnr.upsample" => m.cnnr_upsample = v.parse()?,
            "optim.lr" => o.lr = parse(key, v)?,
            "optim.batch" => o.batch = parse(key, v)?,
            "optim.epochs" => o.epochs = parse(key, v)?,
            "optim.max_steps" => o.max_steps = parse(key, v)?,
            "optim.decay_every" => o.decay_every = parse(key, v)?,
            "optim.decay_factor" => o.decay_factor = parse(key, v)?,
            "optim.checkpoint_every" => o.checkpoint_every = parse(key, v)?,
            "optim.augment" => o.augment = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Parses a full configuration on top of the toy preset.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::toy();
        c.merge_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optim;
        let join = |xs: &[usize]| {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let lines = [
            ("seed", self.seed.to_string()),
            ("model.input_size", m.input_size.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.depths", join(&m.depths)),
            ("model.heads", join(&m.heads)),
            ("model.window", m.window.to_string()),
            ("model.mask_value", m.mask_value.to_string()),
            ("model.activation", m.activation.to_string()),
            ("model.relative_bias", m.relative_bias.to_string()),
            ("model.decoder_shift", m.decoder_shift.to_string()),
            ("cmpi.interaction", m.interaction.to_string()),
            ("cmpi.window", m.cmpi_window.to_string()),
            ("cmpi.rm_enabled", m.rm_enabled.to_string()),
            ("cmpi.single_step", m.single_step.to_string()),
            ("cmpi.use_m1", m.use_m1.to_string()),
            ("cmpi.use_m2", m.use_m2.to_string()),
            ("cmpi.use_guidance", m.use_guidance.to_string()),
            ("cmpi.rm_share_step_weights", m.rm_share_step_weights.to_string()),
            ("cmpi.rm_residual", m.rm_residual.to_string()),
            ("decoder.kind", m.decoder.to_string()),
            ("cnnr.enabled", m.cnnr_enabled.to_string()),
            ("cnnr.freeze", m.cnnr_freeze.to_string()),
            ("cnnr.widths", join(&m.cnnr_widths)),
            ("cnnr.reduction", m.cnnr_reduction.to_string()),
            ("cnnr.upsample", m.cnnr_upsample.to_string()),
            ("optim.lr", o.lr.to_string()),
            ("optim.batch", o.batch.to_string()),
            ("optim.epochs", o.epochs.to_string()),
            ("optim.max_steps", o.max_steps.to_string()),
            ("optim.decay_every", o.decay_every.to_string()),
            ("optim.decay_factor", o.decay_factor.to_string()),
            ("optim.checkpoint_every", o.checkpoint_every.to_string()),
            ("optim.augment", o.augment.to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl ModelConfig {
    /// Channel width of stage `i` (0-based).
    pub fn width(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Token grid side of stage `i` (0-based).
    pub fn grid(&self, stage: usize) -> usize {
        self.input_size / (4 << stage)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items = v
        .split(',')
        .map(|s| parse::<usize>(key, s.trim()))
        .collect::<Result<Vec<_>>>()?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values, got `{v}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Config::toy().validate().unwrap();
        Config::faithful().validate().unwrap();
    }

    #[test]
    fn defaults_follow_training_schedule() {
        let c = Config::faithful();
        assert_eq!(c.model.input_size, 224);
        assert_eq!(c.optim.batch, 32);
        assert_eq!(c.optim.epochs, 90);
        assert!((c.lr_at_epoch(0) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at_epoch(39) - 1e-4).abs() < 1e-18);
        assert!((c.lr_at_epoch(40) - 2e-5).abs() < 1e-18);
        assert!((c.lr_at_epoch(80) - 4e-6).abs() < 1e-18);
    }

    #[test]
    fn text_round_trip_is_fixed_point() {
        let mut c = Config::faithful();
        c.apply_ablation(9).unwrap();
        c.seed = 12345;
        c.model.mask_value = -1000.0;
        let text = c.to_text();
        let back = Config::from_text(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = Config::from_text("seed = 1\noptim.lr 3\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(Config::from_text("nope = 1").is_err());
        assert!(Config::from_text("model.depths = 2,2").is_err());
        assert!(Config::from_text("cmpi.interaction = both").is_err());
        assert!(Config::from_text("model.mask_value = -5").is_err());
        assert!(Config::from_text("cmpi.window = 2").is_err());
        assert!(Config::from_text("model.input_size = 48").is_err());
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = Config::from_text("# toy run\n\nseed = 9  # trailing\n").unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn every_ablation_applies() {
        for (id, _, _) in ABLATIONS {
            let mut c = Config::toy();
            c.apply_ablation(id).unwrap();
            if id > 0 {
                assert_ne!(c, Config::toy(), "ablation {id} changed nothing");
            }
        }
        assert!(Config::toy().apply_ablation(16).is_err());
        let mut c = Config::toy();
        c.apply_ablation(9).unwrap();
        assert!(!c.model.use_m1 && !c.model.use_m2);
    }
}
