//! Model, loss and optimizer configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{is_valid_resolution, LabelSet};

/// Which translation a model performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Segmentation + depth to image.
    Sd2i,
    /// Segmentation to depth.
    S2d,
    /// Segmentation to image (the depth-free ablation).
    S2i,
}

impl Mode {
    pub fn uses_depth_input(self) -> bool {
        matches!(self, Mode::Sd2i)
    }

    pub fn output_channels(self) -> usize {
        match self {
            Mode::S2d => 1,
            Mode::Sd2i | Mode::S2i => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sd2i => "sd2i",
            Mode::S2d => "s2d",
            Mode::S2i => "s2i",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sd2i" => Ok(Mode::Sd2i),
            "s2d" => Ok(Mode::S2d),
            "s2i" => Ok(Mode::S2i),
            other => Err(Error::InvalidConfig(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub adv: f64,
    /// R1 strength γ; the penalty is `γ/2 · E‖∇D‖²`.
    pub r1_gamma: f64,
    /// R1 is evaluated every this many discriminator steps.
    pub r1_interval: u64,
    pub perceptual: f64,
    pub domain: f64,
    pub reconstruction: f64,
    /// Weight of the mode-seeking term `-min(r, cap)`, where `r` is the mean
    /// absolute output difference between two latents under the same
    /// conditions divided by their mean absolute latent difference.
    pub mode_seeking: f64,
    pub mode_seeking_cap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            r1_gamma: 10.0,
            r1_interval: 16,
            perceptual: 1.0,
            domain: 1.0,
            reconstruction: 1.0,
            mode_seeking: 1.0,
            mode_seeking_cap: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub batch: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.99,
            lr: 0.002,
            eps: 1e-8,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub output_resolution: usize,
    /// `(C0, H0, W0)` of the spatial random latent.
    pub base_latent_shape: [usize; 3],
    pub z_dim: usize,
    pub mapping_hidden: usize,
    /// Number of linear layers in the mapping network.
    pub mapping_layers: usize,
    /// Channel width of each generator layer, coarsest first.
    pub channels: Vec<usize>,
    pub label_set: LabelSet,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    /// Seed for weight initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk64(Mode::Sd2i)
    }
}

impl ModelConfig {
    /// 64×64 configuration with channels `[64, 64, 64, 32]`.
    pub fn desk64(mode: Mode) -> Self {
        Self {
            mode,
            output_resolution: 64,
            base_latent_shape: [64, 8, 8],
            z_dim: 512,
            mapping_hidden: 512,
            mapping_layers: 4,
            channels: vec![64, 64, 64, 32],
            label_set: LabelSet::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            init_seed: 0,
        }
    }

    /// 256×256 configuration with channels `[64, 64, 64, 64, 32, 16]`.
    pub fn full256(mode: Mode) -> Self {
        Self {
            output_resolution: 256,
            channels: vec![64, 64, 64, 64, 32, 16],
            ..Self::desk64(mode)
        }
    }

    /// A deliberately tiny configuration for gradient checks and fast tests.
    pub fn tiny(mode: Mode, resolution: usize) -> Self {
        let layers = layer_count(resolution);
        Self {
            output_resolution: resolution,
            base_latent_shape: [4, 8, 8],
            z_dim: 8,
            mapping_hidden: 8,
            mapping_layers: 2,
            channels: vec![4; layers],
            ..Self::desk64(mode)
        }
    }

    pub fn num_layers(&self) -> usize {
        layer_count(self.output_resolution)
    }

    /// Spatial size of layer `i` (`H0 · 2^i`).
    pub fn layer_resolution(&self, i: usize) -> usize {
        self.base_latent_shape[1] << i
    }

    pub fn layer_shape(&self, i: usize) -> [usize; 3] {
        let r = self.layer_resolution(i);
        [self.channels[i], r, r]
    }

    pub fn num_labels(&self) -> usize {
        self.label_set.len()
    }

    /// Channels of the stacked condition input (one-hot labels, then depth).
    pub fn condition_channels(&self) -> usize {
        self.num_labels() + usize::from(self.mode.uses_depth_input())
    }

    pub fn output_channels(&self) -> usize {
        self.mode.output_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !is_valid_resolution(self.output_resolution) {
            return Err(Error::InvalidResolution(self.output_resolution));
        }
        let [c0, h0, w0] = self.base_latent_shape;
        if h0 != 8 || w0 != 8 {
            return bad(format!("base latent must be 8x8, got {h0}x{w0}"));
        }
        if self.channels.len() != self.num_layers() {
            return bad(format!(
                "{} channel widths given for {} layers",
                self.channels.len(),
                self.num_layers()
            ));
        }
        if self.channels.iter().any(|&c| c == 0) || c0 != self.channels[0] {
            return bad(format!(
                "channel widths {:?} must be positive and start with C0 = {c0}",
                self.channels
            ));
        }
        if self.layer_resolution(self.num_layers() - 1) != self.output_resolution {
            return bad("last layer does not reach the output resolution".into());
        }
        if self.label_set.len() < 2 {
            return bad("label set needs at least two labels".into());
        }
        if self.z_dim == 0 || self.mapping_layers == 0 || self.mapping_hidden == 0 {
            return bad("mapping network dimensions must be positive".into());
        }
        if self.loss.r1_interval == 0 {
            return bad("r1_interval must be >= 1".into());
        }
        if self.optim.batch == 0 || self.optim.lr <= 0.0 {
            return bad("batch and learning rate must be positive".into());
        }
        Ok(())
    }
}

/// `log2(resolution / 8) + 1`.
pub fn layer_count(resolution: usize) -> usize {
    (resolution / 8).trailing_zeros() as usize + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = ModelConfig::default();
        assert_eq!(c.base_latent_shape, [64, 8, 8]);
        assert_eq!(c.optim.beta1, 0.0);
        assert_eq!(c.optim.beta2, 0.99);
        assert_eq!(c.optim.lr, 0.002);
        assert_eq!(c.optim.batch, 8);
        c.validate().unwrap();
        ModelConfig::full256(Mode::S2d).validate().unwrap();
    }

    #[test]
    fn layer_chain_doubles_to_output() {
        let c = ModelConfig::desk64(Mode::Sd2i);
        assert_eq!(c.num_layers(), 4);
        let shapes: Vec<_> = (0..4).map(|i| c.layer_shape(i)).collect();
        assert_eq!(shapes, vec![[64, 8, 8], [64, 16, 16], [64, 32, 32], [32, 64, 64]]);
        assert_eq!(ModelConfig::full256(Mode::Sd2i).num_layers(), 6);
    }

    #[test]
    fn mode_controls_channels() {
        assert_eq!(ModelConfig::desk64(Mode::Sd2i).condition_channels(), 8);
        assert_eq!(ModelConfig::desk64(Mode::S2d).condition_channels(), 7);
        assert_eq!(Mode::S2d.output_channels(), 1);
        assert_eq!("SD2I".parse::<Mode>().unwrap(), Mode::Sd2i);
    }

    #[test]
    fn rejects_inconsistent_channels() {
        let mut c = ModelConfig::desk64(Mode::Sd2i);
        c.channels.pop();
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk64(Mode::Sd2i);
        c.channels[0] = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_fills_defaults() {
        let c: ModelConfig = serde_json::from_str(r#"{"mode":"s2d","output_resolution":32,"channels":[64,32,16]}"#).unwrap();
        assert_eq!(c.mode, Mode::S2d);
        assert_eq!(c.optim.lr, 0.002);
        c.validate().unwrap();
    }
}
