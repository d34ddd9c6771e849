use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the diffusion step reaches each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// Independent SiLU-linear AdaLN head per block (vanilla DiT).
    AdalnPerBlock,
    /// One shared AdaLN head plus a learned per-block offset.
    AdalnSingle,
    /// Shared AdaLN head plus a per-block low-rank, step-dependent correction.
    AdalnSola,
    /// One step token prepended to the sequence inside every block; no AdaLN.
    TokenPrepend,
}

impl CondMode {
    pub fn uses_adaln(self) -> bool {
        self != CondMode::TokenPrepend
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub width: usize,
    pub num_heads: usize,
    pub latent_channels: usize,
    pub text_dim: usize,
    /// Text-token vocabulary including the trailing null token.
    pub text_vocab: usize,
    pub cond_mode: CondMode,
    pub use_rope: bool,
    pub use_qk_norm: bool,
    pub use_long_skip: bool,
    pub sola_rank: usize,
    pub mlp_ratio: f64,
    /// Gated (GEGLU) feed-forward instead of a plain two-layer GELU MLP.
    #[serde(default)]
    pub ffn_glu: bool,
    pub time_embed_dim: usize,
    /// Whether blocks carry text cross-attention. Stage-1 models do not.
    pub cross_attention: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_blocks == 0 || self.width == 0 || self.num_heads == 0 {
            return fail("num_blocks, width and num_heads must be positive");
        }
        if self.latent_channels == 0 || self.text_dim == 0 || self.time_embed_dim == 0 {
            return fail("latent_channels, text_dim and time_embed_dim must be positive");
        }
        if self.width % self.num_heads != 0 {
            return fail("width must be divisible by num_heads");
        }
        if self.use_rope && self.head_dim() % 2 != 0 {
            return fail("RoPE needs an even head dimension");
        }
        if self.time_embed_dim % 2 != 0 {
            return fail("time_embed_dim must be even");
        }
        if self.cond_mode == CondMode::AdalnSola && (self.sola_rank == 0 || self.sola_rank >= self.width) {
            return fail("sola_rank must be in 1..width");
        }
        if self.use_long_skip && self.num_blocks < 2 {
            return fail("long-skip connections need at least two blocks");
        }
        if self.text_vocab < 1 {
            return fail("text_vocab must include the null token");
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail("mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    /// Input channels of the input projection: latent channels plus the mask indicator.
    pub fn input_channels(&self) -> usize {
        self.latent_channels + 1
    }

    pub fn null_token(&self) -> usize {
        self.text_vocab - 1
    }

    /// `(shallow, deep)` block pairs joined by long skips, 0-based.
    ///
    /// Block `i` feeds the input of block `N - 1 - i` for `i < N / 2`; an odd
    /// middle block is unpaired.
    pub fn skip_pairs(&self) -> Vec<(usize, usize)> {
        if !self.use_long_skip {
            return vec![];
        }
        let n = self.num_blocks;
        (0..n / 2).map(|i| (i, n - 1 - i)).collect()
    }

    /// Same configuration with cross-attention enabled.
    pub fn with_cross_attention(&self) -> Self {
        Self {
            cross_attention: true,
            ..self.clone()
        }
    }
}

/// The four compared DiT variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CrossDit,
    PixelartDit,
    StableAudioDit,
    EzaudioDit,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::CrossDit,
        Variant::PixelartDit,
        Variant::StableAudioDit,
        Variant::EzaudioDit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CrossDit => "cross_dit",
            Variant::PixelartDit => "pixelart_dit",
            Variant::StableAudioDit => "stable_audio_dit",
            Variant::EzaudioDit => "ezaudio_dit",
        }
    }

    /// Applies this variant's conditioning mode and feature flags to `base`.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.ffn_glu = false;
        match self {
            Variant::CrossDit => {
                c.cond_mode = CondMode::AdalnPerBlock;
                c.use_rope = false;
                c.use_qk_norm = false;
                c.use_long_skip = false;
            }
            Variant::PixelartDit => {
                c.cond_mode = CondMode::AdalnSingle;
                c.use_rope = false;
                c.use_qk_norm = false;
                c.use_long_skip = false;
            }
            Variant::StableAudioDit => {
                c.cond_mode = CondMode::TokenPrepend;
                c.use_rope = true;
                c.use_qk_norm = true;
                c.use_long_skip = false;
                c.ffn_glu = true;
            }
            Variant::EzaudioDit => {
                c.cond_mode = CondMode::AdalnSola;
                c.use_rope = true;
                c.use_qk_norm = true;
                c.use_long_skip = true;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidArgument(format!("unknown variant `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

/// Model sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Toy,
    DitL,
    DitXl,
}

impl Scale {
    pub fn name(self) -> &'static str {
        match self {
            Scale::Toy => "toy",
            Scale::DitL => "dit-l",
            Scale::DitXl => "dit-xl",
        }
    }

    /// EzAudio-DiT configuration at this scale; other variants via [`Variant::apply`].
    pub fn config(self) -> ModelConfig {
        match self {
            Scale::Toy => ModelConfig {
                num_blocks: 4,
                width: 64,
                num_heads: 4,
                latent_channels: 16,
                text_dim: 32,
                text_vocab: 9,
                cond_mode: CondMode::AdalnSola,
                use_rope: true,
                use_qk_norm: true,
                use_long_skip: true,
                sola_rank: 8,
                mlp_ratio: 4.0,
                ffn_glu: false,
                time_embed_dim: 64,
                cross_attention: true,
            },
            Scale::DitL => Self::full(24, 1024),
            Scale::DitXl => Self::full(28, 1152),
        }
    }

    fn full(num_blocks: usize, width: usize) -> ModelConfig {
        ModelConfig {
            num_blocks,
            width,
            num_heads: 16,
            latent_channels: 128,
            // FLAN-T5-large hidden size.
            text_dim: 1024,
            text_vocab: 9,
            cond_mode: CondMode::AdalnSola,
            use_rope: true,
            use_qk_norm: true,
            use_long_skip: true,
            sola_rank: width / 32,
            mlp_ratio: 4.0,
            ffn_glu: false,
            time_embed_dim: width,
            cross_attention: true,
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Scale::Toy),
            "dit-l" => Ok(Scale::DitL),
            "dit-xl" => Ok(Scale::DitXl),
            _ => Err(Error::InvalidArgument(format!(
                "unknown scale `{s}`, expected one of toy, dit-l, dit-xl"
            ))),
        }
    }
}
