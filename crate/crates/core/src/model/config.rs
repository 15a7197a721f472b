use thiserror::Error;

/// How reference tokens are told apart from the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferencePositions {
    /// Every reference uses sample index 1; the target uses 0.
    Shared,
    /// Reference `j` uses sample index `j`.
    PerReference,
    /// References reuse the target's index 0.
    None,
}

impl ReferencePositions {
    pub fn name(self) -> &'static str {
        match self {
            ReferencePositions::Shared => "shared",
            ReferencePositions::PerReference => "per-reference",
            ReferencePositions::None => "none",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "shared" => Some(ReferencePositions::Shared),
            "per-reference" => Some(ReferencePositions::PerReference),
            "none" => Some(ReferencePositions::None),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

/// Architecture of the velocity network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub depth: usize,
    pub latent_grid: usize,
    pub latent_channels: usize,
    pub patch_size: usize,
    pub text_len: usize,
    pub vocab_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Width of the sinusoidal timestep features.
    pub time_freq_dim: usize,
    pub mlp_ratio: usize,
    /// Largest number of references a group may carry.
    pub max_references: usize,
    /// Sample-index embedding scheme for reference tokens.
    pub reference_positions: ReferencePositions,
    /// Forward references with null-caption text tokens during cache
    /// construction. Only their image K/V are cached either way.
    pub reference_text: bool,
    /// Let gradients flow through the reference cache.
    pub reference_grad: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            num_heads: 4,
            depth: 4,
            latent_grid: 8,
            latent_channels: 4,
            patch_size: 2,
            text_len: 8,
            vocab_size: 64,
            lora_rank: 16,
            lora_alpha: 16.0,
            time_freq_dim: 64,
            mlp_ratio: 4,
            max_references: 7,
            reference_positions: ReferencePositions::Shared,
            reference_text: false,
            reference_grad: false,
        }
    }
}

impl ModelConfig {
    /// A small configuration for gradient checks and fast unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            hidden_dim: 8,
            num_heads: 2,
            depth: 2,
            latent_grid: 4,
            latent_channels: 2,
            patch_size: 2,
            text_len: 8,
            vocab_size: 64,
            lora_rank: 2,
            lora_alpha: 4.0,
            time_freq_dim: 8,
            mlp_ratio: 2,
            max_references: 3,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return err(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.patch_size == 0 || self.latent_grid == 0 || self.latent_grid % self.patch_size != 0 {
            return err(format!(
                "latent_grid {} must be a positive multiple of patch_size {}",
                self.latent_grid, self.patch_size
            ));
        }
        if self.lora_rank == 0 {
            return err("lora_rank must be at least 1".into());
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return err(format!("lora_alpha must be positive, got {}", self.lora_alpha));
        }
        if self.depth == 0 || self.latent_channels == 0 || self.text_len == 0 || self.mlp_ratio == 0 {
            return err("depth, latent_channels, text_len and mlp_ratio must be positive".into());
        }
        if self.time_freq_dim < 2 || self.time_freq_dim % 2 != 0 {
            return err(format!("time_freq_dim {} must be even and >= 2", self.time_freq_dim));
        }
        if self.vocab_size < 2 {
            return err("vocab_size must be at least 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Patches per side.
    pub fn grid_patches(&self) -> usize {
        self.latent_grid / self.patch_size
    }

    pub fn image_tokens(&self) -> usize {
        self.grid_patches() * self.grid_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.latent_channels
    }

    pub fn token_count(&self) -> usize {
        self.text_len + self.image_tokens()
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_grid, self.latent_grid, self.latent_channels]
    }

    pub fn latent_len(&self) -> usize {
        self.latent_grid * self.latent_grid * self.latent_channels
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }
}
