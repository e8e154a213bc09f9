use serde::{Deserialize, Serialize};

use super::SynthError;

/// Resolution of the learned constant that seeds the synthesis network.
pub const BASE_RESOLUTION: usize = 4;

/// Architecture of the mapping network and the synthesis network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub mapping_layers: usize,
    pub base_resolution: usize,
    pub resolutions: Vec<usize>,
    pub channels_per_resolution: Vec<usize>,
    pub noise_enabled: bool,
    pub truncation_psi: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            z_dim: 64,
            w_dim: 64,
            mapping_layers: 2,
            base_resolution: BASE_RESOLUTION,
            resolutions: vec![4, 8, 16, 32],
            channels_per_resolution: vec![64, 64, 32, 16],
            noise_enabled: false,
            truncation_psi: 1.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::Config(msg));
        if self.z_dim == 0 || self.w_dim == 0 {
            return bad("latent dimensions must be positive".into());
        }
        if self.mapping_layers == 0 {
            return bad("mapping network needs at least one layer".into());
        }
        if self.base_resolution != BASE_RESOLUTION {
            return bad(format!("base_resolution must be {BASE_RESOLUTION}"));
        }
        if self.resolutions.is_empty() {
            return bad("at least one synthesis block is required".into());
        }
        if self.resolutions.len() != self.channels_per_resolution.len() {
            return bad(format!(
                "{} resolutions but {} channel counts",
                self.resolutions.len(),
                self.channels_per_resolution.len()
            ));
        }
        if self.resolutions[0] != self.base_resolution {
            return bad(format!("first resolution must be {}", self.base_resolution));
        }
        for pair in self.resolutions.windows(2) {
            if pair[1] != 2 * pair[0] {
                return bad(format!("resolution {} does not double {}", pair[1], pair[0]));
            }
        }
        if let Some(r) = self
            .resolutions
            .iter()
            .zip(&self.channels_per_resolution)
            .find_map(|(r, &c)| (c == 0).then_some(r))
        {
            return bad(format!("block {r} has zero channels"));
        }
        if !(self.truncation_psi > 0.0 && self.truncation_psi <= 1.0) {
            return bad(format!("truncation_psi {} outside (0, 1]", self.truncation_psi));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.resolutions.len()
    }

    pub fn output_resolution(&self) -> usize {
        *self.resolutions.last().expect("validated config has blocks")
    }

    /// Channel count of the feature map feeding block `i`; the first block
    /// reads the learned constant, which has as many channels as block 0.
    pub fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.channels_per_resolution[0]
        } else {
            self.channels_per_resolution[i - 1]
        }
    }

    pub fn block_out_channels(&self, i: usize) -> usize {
        self.channels_per_resolution[i]
    }

    pub fn mapping_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.z_dim
        } else {
            self.w_dim
        }
    }
}
