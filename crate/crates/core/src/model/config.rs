use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture sizes. `paper` is the full-size network; `desk` is a reduced
/// network that trains on a CPU in minutes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    /// Square input image extent in pixels.
    pub input_size: usize,
    /// Output channels of each encoder residual block.
    pub encoder_channels: Vec<usize>,
    pub latent_dim: usize,
    pub heads: usize,
    /// Output channels of each decoder stage; the leading stages upsample.
    pub decoder_channels: Vec<usize>,
    pub voxel_dim: usize,
    /// Output channels of each refiner encoder stage.
    pub refiner_channels: Vec<usize>,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            name: "paper".into(),
            input_size: 127,
            encoder_channels: vec![96, 128, 256, 256, 256, 256],
            latent_dim: 1024,
            heads: 8,
            decoder_channels: vec![128, 128, 128, 64, 64, 32],
            voxel_dim: 32,
            refiner_channels: vec![32, 64, 128],
        }
    }

    pub fn desk() -> Self {
        ModelConfig {
            name: "desk".into(),
            input_size: 32,
            encoder_channels: vec![8, 16, 16, 16],
            latent_dim: 64,
            heads: 2,
            decoder_channels: vec![16, 16, 8, 8],
            voxel_dim: 16,
            refiner_channels: vec![8, 16, 32],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected `paper` or `desk`)"))),
        }
    }

    /// Spatial extent entering each encoder block, followed by the final extent.
    pub fn encoder_extents(&self) -> Vec<usize> {
        let mut e = vec![self.input_size];
        for _ in &self.encoder_channels {
            e.push(e.last().unwrap() / 2);
        }
        e
    }

    /// Flattened feature length before the projection to the latent space.
    pub fn encoder_features(&self) -> usize {
        let side = *self.encoder_extents().last().unwrap();
        self.encoder_channels.last().map_or(0, |c| c * side * side)
    }

    /// Number of leading decoder stages that double the spatial extent,
    /// starting from a 2³ seed.
    pub fn upsampling_stages(&self) -> usize {
        let mut n = 0;
        let mut side = 2;
        while side < self.voxel_dim {
            side *= 2;
            n += 1;
        }
        n
    }

    pub fn seed_channels(&self) -> usize {
        self.latent_dim / 8
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_channels.is_empty() || self.decoder_channels.is_empty() || self.refiner_channels.is_empty() {
            return bad("encoder, decoder and refiner need at least one stage each".into());
        }
        let all = self.encoder_channels.iter().chain(&self.decoder_channels).chain(&self.refiner_channels);
        if all.clone().any(|&c| c == 0) {
            return bad("channel counts must be positive".into());
        }
        if *self.encoder_extents().last().unwrap() == 0 {
            return bad(format!(
                "{} pooling stages reduce a {}px input to nothing",
                self.encoder_channels.len(),
                self.input_size
            ));
        }
        if self.heads == 0 || self.latent_dim == 0 || self.latent_dim % self.heads != 0 {
            return bad(format!("latent_dim {} not divisible by {} heads", self.latent_dim, self.heads));
        }
        if self.latent_dim % 8 != 0 {
            return bad(format!("latent_dim {} not divisible by 8 (2³ seed volume)", self.latent_dim));
        }
        if self.voxel_dim < 2 || !self.voxel_dim.is_power_of_two() {
            return bad(format!("voxel_dim {} must be a power of two ≥ 2", self.voxel_dim));
        }
        if self.upsampling_stages() > self.decoder_channels.len() {
            return bad(format!(
                "voxel_dim {} needs {} upsampling stages but only {} decoder stages are configured",
                self.voxel_dim,
                self.upsampling_stages(),
                self.decoder_channels.len()
            ));
        }
        if self.voxel_dim >> self.refiner_channels.len() == 0 {
            return bad(format!(
                "{} refiner pooling stages exceed voxel_dim {}",
                self.refiner_channels.len(),
                self.voxel_dim
            ));
        }
        Ok(())
    }
}
