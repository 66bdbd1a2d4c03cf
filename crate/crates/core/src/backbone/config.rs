use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    Unconditional,
    Class,
    Representation,
}

impl std::fmt::Display for ConditioningMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConditioningMode::Unconditional => "unconditional",
            ConditioningMode::Class => "class",
            ConditioningMode::Representation => "representation",
        })
    }
}

impl std::str::FromStr for ConditioningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditional" => Ok(Self::Unconditional),
            "class" => Ok(Self::Class),
            "representation" => Ok(Self::Representation),
            other => Err(Error::Config(format!("unknown conditioning mode `{other}`"))),
        }
    }
}

/// Image → latent mapping. Only the identity mapper exists; pixels are the latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMapper {
    #[default]
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub encoder_blocks: usize,
    pub encoder_hidden: usize,
    pub repr_dim: usize,
    pub num_classes: Option<usize>,
    pub conditioning: ConditioningMode,
    pub timesteps: usize,
    #[serde(default)]
    pub latent_mapper: LatentMapper,
}

impl ModelConfig {
    /// Desk-scale default: 1×32×32 latents, patch 2, hidden 64, 4 blocks.
    pub fn s_micro(conditioning: ConditioningMode) -> Self {
        Self {
            image_channels: 1,
            image_size: 32,
            patch_size: 2,
            hidden: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
            encoder_blocks: 2,
            encoder_hidden: 64,
            repr_dim: 64,
            num_classes: None,
            conditioning,
            timesteps: 1000,
            latent_mapper: LatentMapper::Identity,
        }
    }

    /// Tiny configuration used by gradient checks: 8×8, hidden 16, 1 block.
    pub fn micro(conditioning: ConditioningMode) -> Self {
        Self {
            image_channels: 1,
            image_size: 8,
            patch_size: 2,
            hidden: 16,
            blocks: 1,
            heads: 2,
            mlp_ratio: 4,
            encoder_blocks: 1,
            encoder_hidden: 16,
            repr_dim: 16,
            num_classes: None,
            conditioning,
            timesteps: 1000,
            latent_mapper: LatentMapper::Identity,
        }
    }

    /// DiT-B geometry on a (4, 32, 32) latent.
    pub fn dit_b(conditioning: ConditioningMode) -> Self {
        Self {
            image_channels: 4,
            image_size: 32,
            patch_size: 2,
            hidden: 768,
            blocks: 12,
            heads: 12,
            mlp_ratio: 4,
            encoder_blocks: 12,
            encoder_hidden: 768,
            repr_dim: 768,
            num_classes: None,
            conditioning,
            timesteps: 1000,
            latent_mapper: LatentMapper::Identity,
        }
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = Some(n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.image_size == 0 || self.patch_size == 0 {
            return fail("image geometry must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.hidden % 4 != 0 {
            return fail(format!("hidden {} must be a multiple of 4", self.hidden));
        }
        if self.mlp_ratio == 0 || self.blocks == 0 || self.timesteps == 0 {
            return fail("blocks, mlp_ratio and timesteps must be positive".into());
        }
        if self.conditioning == ConditioningMode::Class && self.num_classes.unwrap_or(0) == 0 {
            return fail("class conditioning requires num_classes".into());
        }
        if self.conditioning == ConditioningMode::Representation {
            if self.encoder_hidden % self.heads != 0 || self.encoder_hidden % 4 != 0 {
                return fail(format!(
                    "encoder_hidden {} must divide by heads {} and by 4",
                    self.encoder_hidden, self.heads
                ));
            }
            if self.encoder_blocks == 0 || self.repr_dim == 0 {
                return fail("representation mode needs encoder_blocks and repr_dim".into());
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.image_channels
    }

    /// Width of the raw sinusoidal timestep features.
    pub fn freq_dim(&self) -> usize {
        self.hidden
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size, self.image_size]
    }

    pub fn has_encoder(&self) -> bool {
        self.conditioning == ConditioningMode::Representation
    }

    /// SHA-256 of the canonical JSON form; identifies the architecture.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
