use serde::{Deserialize, Serialize};

use crate::error::{CtError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_embed: usize,
    /// Observation/action pairs per window; the sequence has `2 * T` tokens.
    #[serde(rename = "T")]
    pub context_pairs: usize,
    /// Width of the common padded action space.
    pub a_max: usize,
    pub image_shape: [usize; 3],
    pub dropout: f64,
    pub momentum_tau: f64,
    pub conv_channels: [usize; 3],
    /// Replace masked tokens with learned embeddings instead of feeding
    /// the constant `-1` input through the tokenizers.
    pub learned_mask_embedding: bool,
    /// Multiplier applied to return-to-go values before tokenization.
    pub rtg_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 8,
            d_embed: 256,
            context_pairs: 30,
            a_max: 2,
            image_shape: [32, 32, 3],
            dropout: 0.1,
            momentum_tau: 0.99,
            conv_channels: [16, 32, 32],
            learned_mask_embedding: false,
            rtg_scale: 0.01,
        }
    }
}

/// Spatial size after one 3x3, stride-2, padding-1 convolution.
pub(crate) fn conv_out(size: usize) -> usize {
    (size - 1) / 2 + 1
}

impl ModelConfig {
    /// Width of the forward-dynamics target: the momentum tokenizer's output.
    pub fn latent(&self) -> usize {
        self.d_embed
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.n_heads
    }

    pub fn seq_len(&self) -> usize {
        2 * self.context_pairs
    }

    /// Flattened width of the last convolution's output.
    pub fn conv_flat(&self) -> usize {
        let h = conv_out(conv_out(conv_out(self.image_shape[0])));
        let w = conv_out(conv_out(conv_out(self.image_shape[1])));
        self.conv_channels[2] * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CtError::Config(m));
        if self.n_heads == 0 || self.d_embed % self.n_heads != 0 {
            return bad(format!(
                "d_embed {} must be divisible by n_heads {}",
                self.d_embed, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.context_pairs < 2 {
            return bad(format!("T must be at least 2, got {}", self.context_pairs));
        }
        if self.a_max == 0 {
            return bad("a_max must be at least 1".into());
        }
        if self.image_shape[2] != 3 || self.image_shape[0] == 0 || self.image_shape[1] == 0 {
            return bad(format!("image shape {:?} must be [H, W, 3]", self.image_shape));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.momentum_tau) {
            return bad(format!("momentum_tau {} outside [0, 1]", self.momentum_tau));
        }
        if self.conv_channels.contains(&0) {
            return bad("conv channels must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = ModelConfig::default();
        assert_eq!((c.n_layers, c.n_heads, c.d_embed, c.context_pairs), (8, 8, 256, 30));
        assert_eq!(c.dropout, 0.1);
        assert_eq!(c.momentum_tau, 0.99);
        assert_eq!(c.latent(), 256);
        c.validate().unwrap();
    }

    #[test]
    fn conv_flat_for_common_sizes() {
        let mut c = ModelConfig::default();
        assert_eq!(c.conv_flat(), 32 * 4 * 4);
        c.image_shape = [8, 8, 3];
        assert_eq!(c.conv_flat(), 32);
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = ModelConfig {
            d_embed: 30,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            context_pairs: 1,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_uses_t_key_and_rejects_typos() {
        let v = serde_json::to_value(ModelConfig::default()).unwrap();
        assert_eq!(v["T"], 30);
        let r: std::result::Result<ModelConfig, _> = serde_json::from_str(r#"{"nlayers": 3}"#);
        assert!(r.is_err());
    }
}
