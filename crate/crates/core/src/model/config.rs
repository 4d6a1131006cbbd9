use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which of the query/key/value projections are replaced by a low-rank
/// down/up factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MlaVariant {
    #[default]
    None,
    Q,
    K,
    Qk,
    Kv,
    Qkv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
        }
    }
}

impl MlaVariant {
    pub const ALL: [MlaVariant; 6] = [
        MlaVariant::None,
        MlaVariant::Q,
        MlaVariant::K,
        MlaVariant::Qk,
        MlaVariant::Kv,
        MlaVariant::Qkv,
    ];

    pub fn compresses(self, p: Projection) -> bool {
        use MlaVariant::*;
        match p {
            Projection::Query => matches!(self, Q | Qk | Qkv),
            Projection::Key => matches!(self, K | Qk | Kv | Qkv),
            Projection::Value => matches!(self, Kv | Qkv),
        }
    }
}

impl fmt::Display for MlaVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MlaVariant::None => "none",
            MlaVariant::Q => "q",
            MlaVariant::K => "k",
            MlaVariant::Qk => "qk",
            MlaVariant::Kv => "kv",
            MlaVariant::Qkv => "qkv",
        })
    }
}

impl FromStr for MlaVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => MlaVariant::None,
            "q" => MlaVariant::Q,
            "k" => MlaVariant::K,
            "qk" => MlaVariant::Qk,
            "kv" => MlaVariant::Kv,
            "qkv" => MlaVariant::Qkv,
            _ => return Err(Error::Config(format!("unknown MLA variant {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlaConfig {
    pub variant: MlaVariant,
    /// Latent dimension of every factored projection.
    pub d_c: usize,
}

impl Default for MlaConfig {
    fn default() -> Self {
        MlaConfig {
            variant: MlaVariant::None,
            d_c: 48,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PosEmbed {
    #[default]
    Learnable,
    Sinusoidal,
    /// No positional information at all (equivalent to a frozen zero table).
    Disabled,
}

impl fmt::Display for PosEmbed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosEmbed::Learnable => "learnable",
            PosEmbed::Sinusoidal => "sin",
            PosEmbed::Disabled => "none",
        })
    }
}

impl FromStr for PosEmbed {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "learnable" => PosEmbed::Learnable,
            "sin" | "sinusoidal" => PosEmbed::Sinusoidal,
            "none" | "zero" => PosEmbed::Disabled,
            _ => return Err(Error::Config(format!("unknown positional embedding {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatchInit {
    #[default]
    Random,
    Whitening,
}

impl fmt::Display for PatchInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchInit::Random => "random",
            PatchInit::Whitening => "whiten",
        })
    }
}

impl FromStr for PatchInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random" => PatchInit::Random,
            "whiten" | "whitening" => PatchInit::Whitening,
            _ => return Err(Error::Config(format!("unknown patch init {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub ffn_ratio: usize,
    pub num_classes: usize,
    pub num_cls_tokens: usize,
    pub pos_embed: PosEmbed,
    pub patch_init: PatchInit,
    pub mla: MlaConfig,
    /// Drop-path rate of the last block; earlier blocks scale linearly from 0.
    pub drop_path_rate: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            embed_dim: 192,
            num_heads: 12,
            depth: 9,
            ffn_ratio: 4,
            num_classes: 10,
            num_cls_tokens: 1,
            pos_embed: PosEmbed::Learnable,
            patch_init: PatchInit::Random,
            mla: MlaConfig::default(),
            drop_path_rate: 0.1,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by gradient checks and equivalence tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 32,
            num_heads: 4,
            depth: 2,
            drop_path_rate: 0.0,
            mla: MlaConfig {
                variant: MlaVariant::None,
                d_c: 8,
            },
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + self.num_cls_tokens
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.ffn_ratio * self.embed_dim
    }

    /// Drop-path probability of block `i`.
    pub fn drop_prob(&self, i: usize) -> f64 {
        if self.depth <= 1 {
            return 0.0;
        }
        self.drop_path_rate * i as f64 / (self.depth - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return err(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depth == 0 || self.ffn_ratio == 0 || self.num_classes < 2 {
            return err("depth, ffn ratio must be positive and num_classes >= 2".into());
        }
        if self.num_cls_tokens == 0 {
            return err("at least one CLS token is required".into());
        }
        if self.pos_embed == PosEmbed::Sinusoidal && self.embed_dim % 2 != 0 {
            return err(format!("sinusoidal embeddings need an even dim, got {}", self.embed_dim));
        }
        if self.mla.d_c == 0 {
            return err("compression dim must be at least 1".into());
        }
        if self.mla.variant != MlaVariant::None && self.mla.d_c >= self.embed_dim {
            return err(format!(
                "compression dim {} must be smaller than embed dim {}",
                self.mla.d_c, self.embed_dim
            ));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return err(format!("drop path rate {} outside [0, 1)", self.drop_path_rate));
        }
        if self.ln_eps <= 0.0 {
            return err("layer norm eps must be positive".into());
        }
        Ok(())
    }
}
