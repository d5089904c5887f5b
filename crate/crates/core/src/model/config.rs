use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{nyquist_bands, PosEncConfig, TEXT_DIM};
use crate::modality::Registry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channel_width: usize,
    pub n_latents: usize,
    pub cross_heads: usize,
    pub self_heads: usize,
    pub cross_head_dim: usize,
    pub self_head_dim: usize,
    pub n_self_blocks: usize,
    pub n_decoder_mlps: usize,
    /// MLP hidden width as a multiple of `channel_width`.
    pub mlp_expansion: usize,
    pub modality_embed_dim: usize,
    pub pos_enc: PosEncConfig,
    /// Pre-normalization inside every residual block and before the output head.
    pub layer_norm: bool,
    /// Adds the projected query back onto the decoder cross-attention output.
    pub decoder_query_residual: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Micro,
    Base,
    BaseX2,
    BaseX4,
    BaseX6,
    BaseX8,
    BaseX10,
}

impl Preset {
    pub const SCALED: [Preset; 6] = [
        Preset::Base,
        Preset::BaseX2,
        Preset::BaseX4,
        Preset::BaseX6,
        Preset::BaseX8,
        Preset::BaseX10,
    ];

    pub fn config(self) -> ModelConfig {
        // (channel width, latents, cross heads, self heads)
        let (c, l, ch, sh) = match self {
            Preset::Micro => (32, 8, 1, 1),
            Preset::Base => (256, 512, 4, 2),
            Preset::BaseX2 => (512, 1024, 8, 4),
            Preset::BaseX4 => (1024, 2048, 16, 8),
            Preset::BaseX6 => (1536, 3072, 24, 12),
            Preset::BaseX8 => (2048, 3072, 32, 16),
            Preset::BaseX10 => (2560, 2048, 40, 20),
        };
        let pos_enc = match self {
            Preset::Micro => PosEncConfig::with_bands(4),
            _ => nyquist_bands(0.5),
        }
        .expect("preset bands are valid");
        ModelConfig {
            channel_width: c,
            n_latents: l,
            cross_heads: ch,
            self_heads: sh,
            cross_head_dim: 64,
            self_head_dim: 128,
            n_self_blocks: 3,
            n_decoder_mlps: 3,
            mlp_expansion: 1,
            modality_embed_dim: 8,
            pos_enc,
            layer_norm: true,
            decoder_query_residual: true,
            seed: 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Micro => "micro",
            Preset::Base => "base",
            Preset::BaseX2 => "base_x2",
            Preset::BaseX4 => "base_x4",
            Preset::BaseX6 => "base_x6",
            Preset::BaseX8 => "base_x8",
            Preset::BaseX10 => "base_x10",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Preset::Micro]
            .into_iter()
            .chain(Preset::SCALED)
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channel_width", self.channel_width),
            ("n_latents", self.n_latents),
            ("cross_heads", self.cross_heads),
            ("self_heads", self.self_heads),
            ("cross_head_dim", self.cross_head_dim),
            ("self_head_dim", self.self_head_dim),
            ("mlp_expansion", self.mlp_expansion),
            ("modality_embed_dim", self.modality_embed_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        self.pos_enc.validate()
    }

    pub fn cross_inner(&self) -> usize {
        self.cross_heads * self.cross_head_dim
    }

    pub fn self_inner(&self) -> usize {
        self.self_heads * self.self_head_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_expansion * self.channel_width
    }

    pub fn query_dim(&self) -> usize {
        self.pos_enc.dim()
    }
}

/// Trainable scalar count for a config and registry, computed from layer shapes.
pub fn parameter_count(cfg: &ModelConfig, registry: &Registry) -> usize {
    parameter_breakdown(cfg, registry).iter().map(|(_, n)| n).sum()
}

/// Trainable scalars per top-level component.
pub fn parameter_breakdown(cfg: &ModelConfig, registry: &Registry) -> Vec<(&'static str, usize)> {
    let c = cfg.channel_width;
    let linear = |i: usize, o: usize| i * o + o;
    let ln = if cfg.layer_norm { 2 * c } else { 0 };
    let attn = |inner: usize| 3 * linear(c, inner) + linear(inner, c);
    let mlp = linear(c, cfg.mlp_hidden()) + linear(cfg.mlp_hidden(), c);
    let pe = cfg.pos_enc.dim();
    let tokens: usize = registry
        .iter()
        .map(|m| linear(m.feature_width() + pe + cfg.modality_embed_dim, c))
        .sum();
    let encoder = (2 * ln + attn(cfg.cross_inner()) + ln + mlp)
        + cfg.n_self_blocks * (ln + attn(cfg.self_inner()) + ln + mlp);
    let decoder = 2 * ln
        + attn(cfg.cross_inner())
        + cfg.n_decoder_mlps * (ln + mlp)
        + ln
        + linear(c, registry.output_width());
    vec![
        ("latents", cfg.n_latents * c),
        ("null_token", c),
        ("modality_embed", linear(TEXT_DIM, cfg.modality_embed_dim)),
        ("task_embed", linear(TEXT_DIM, pe)),
        ("tokens", tokens),
        ("query_proj", linear(2 * pe, c)),
        ("encoder", encoder),
        ("decoder", decoder),
    ]
}
