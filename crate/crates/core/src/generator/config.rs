use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// SAR bands per acquisition (VV, VH).
    pub sar_channels: usize,
    /// Optical bands (RGB).
    pub opt_channels: usize,
    /// Width of the convolutional input branches.
    pub base_width: usize,
    pub swin_embed_dim: usize,
    pub swin_depths: [usize; 4],
    pub swin_heads: [usize; 4],
    pub window_size: usize,
    /// Query/key width of fusion attention; `None` means `base_width / 8`, at least 1.
    pub qk_channels: Option<usize>,
    pub mlp_ratio: f64,
    /// Hidden width of the continuous relative-position bias MLP.
    pub cpb_hidden: usize,
    pub dropout_rate: f64,
    pub gamma_init: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            sar_channels: 2,
            opt_channels: 3,
            base_width: 32,
            swin_embed_dim: 96,
            swin_depths: [2, 2, 6, 2],
            swin_heads: [3, 6, 12, 24],
            window_size: 8,
            qk_channels: None,
            mlp_ratio: 4.0,
            cpb_hidden: 512,
            dropout_rate: 0.2,
            gamma_init: 0.0,
        }
    }
}

impl GeneratorConfig {
    /// A narrow configuration for desk-scale experiments and tests.
    pub fn tiny() -> Self {
        GeneratorConfig {
            base_width: 8,
            swin_embed_dim: 8,
            swin_depths: [1, 1, 1, 1],
            swin_heads: [1, 2, 2, 4],
            window_size: 4,
            cpb_hidden: 16,
            mlp_ratio: 2.0,
            ..Default::default()
        }
    }

    pub fn qk(&self) -> usize {
        self.qk_channels.unwrap_or((self.base_width / 8).max(1))
    }

    pub fn stage_dims(&self) -> [usize; 4] {
        let e = self.swin_embed_dim;
        [e, 2 * e, 4 * e, 8 * e]
    }

    /// Tile-independent checks.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("sar_channels", self.sar_channels),
            ("opt_channels", self.opt_channels),
            ("base_width", self.base_width),
            ("swin_embed_dim", self.swin_embed_dim),
            ("window_size", self.window_size),
            ("cpb_hidden", self.cpb_hidden),
            ("qk_channels", self.qk()),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(config_err!("generator.{name} must be at least 1"));
            }
        }
        for (i, (&depth, &heads)) in self.swin_depths.iter().zip(&self.swin_heads).enumerate() {
            if depth == 0 || heads == 0 {
                return Err(config_err!("generator stage {i}: depth and heads must be at least 1"));
            }
            let dim = self.stage_dims()[i];
            if dim % heads != 0 {
                return Err(config_err!(
                    "generator stage {i}: width {dim} is not divisible by {heads} heads"
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(config_err!("generator.dropout_rate must lie in [0, 1)"));
        }
        if !(self.mlp_ratio > 0.0) || !self.gamma_init.is_finite() {
            return Err(config_err!("generator.mlp_ratio must be positive and gamma_init finite"));
        }
        Ok(())
    }

    /// Tile sizes must survive two 2× reductions and three patch merges into
    /// whole windows.
    pub fn validate_tile(&self, height: usize, width: usize) -> Result<()> {
        let unit = self.window_size * 8;
        for (name, v) in [("height", height), ("width", width)] {
            if v == 0 || v % 4 != 0 {
                return Err(config_err!("tile {name} {v} is not divisible by 4"));
            }
            if v % unit != 0 {
                return Err(config_err!(
                    "tile {name} {v} is not divisible by window_size x 8 = {unit}"
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = GeneratorConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.qk(), 4);
        cfg.validate_tile(128, 64).unwrap();
        GeneratorConfig::tiny().validate().unwrap();
    }

    #[test]
    fn indivisible_tiles_are_rejected() {
        let cfg = GeneratorConfig::tiny();
        let err = cfg.validate_tile(66, 64).unwrap_err().to_string();
        assert!(err.contains("height 66"), "{err}");
        assert!(GeneratorConfig::default().validate_tile(96, 64).is_err());
    }

    #[test]
    fn qk_floor_is_one() {
        let cfg = GeneratorConfig {
            base_width: 4,
            ..GeneratorConfig::tiny()
        };
        assert_eq!(cfg.qk(), 1);
    }
}
