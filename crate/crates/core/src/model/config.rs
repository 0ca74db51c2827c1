use serde::{Deserialize, Serialize};

use crate::attention::AttentionPath;
use crate::dataio::{ForecastMode, WindowSpec};
use crate::error::{Error, Result};
use crate::inputrep::InputVariant;
use crate::normflow::NfVariant;

/// Which candidate hidden-state sequence feeds the flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerChoice {
    First,
    #[default]
    Last,
}

/// Encoder and decoder latent choice for the flow head.
///
/// Candidates are the gate-GRU hidden sequences of a stack, ordered by SIRN
/// layer and then by GRU layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSelection {
    #[serde(default)]
    pub encoder: LayerChoice,
    #[serde(default)]
    pub decoder: LayerChoice,
}

impl LatentSelection {
    pub const ALL: [LatentSelection; 4] = [
        LatentSelection { encoder: LayerChoice::Last, decoder: LayerChoice::Last },
        LatentSelection { encoder: LayerChoice::First, decoder: LayerChoice::Last },
        LatentSelection { encoder: LayerChoice::First, decoder: LayerChoice::First },
        LatentSelection { encoder: LayerChoice::Last, decoder: LayerChoice::First },
    ];
}

/// Every architectural and training hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    /// Sliding-window span (even).
    pub w: usize,
    pub lambda: f64,
    pub eta: usize,
    pub decomp_kernel: usize,
    pub seasonal_kernel: usize,
    pub fusion_kernel: usize,
    /// Flow transformation count `T`.
    pub transforms: usize,
    pub input_len: usize,
    pub pred_len: usize,
    /// Start-token length; half the input length when absent.
    pub token_len: Option<usize>,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub mode: ForecastMode,
    pub input_variant: InputVariant,
    pub nf_variant: NfVariant,
    pub latent: LatentSelection,
    pub attention: AttentionPath,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Step between consecutive training windows.
    pub train_stride: usize,
    /// Flow draws averaged at evaluation and prediction.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            w: 2,
            lambda: 0.8,
            eta: 2,
            decomp_kernel: 25,
            seasonal_kernel: 3,
            fusion_kernel: 3,
            transforms: 2,
            input_len: 96,
            pred_len: 48,
            token_len: None,
            encoder_layers: 2,
            decoder_layers: 1,
            mode: ForecastMode::Multivariate,
            input_variant: InputVariant::Full,
            nf_variant: NfVariant::Full,
            latent: LatentSelection::default(),
            attention: AttentionPath::Banded,
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            train_stride: 1,
            eval_samples: 8,
            seed: 0,
        }
    }
}

/// Largest transformation count accepted.
pub const MAX_TRANSFORMS: usize = 8;

impl ModelConfig {
    /// The full-size setting: width 512 with 8 heads.
    pub fn paper_scale() -> Self {
        ModelConfig {
            d: 512,
            heads: 8,
            ..ModelConfig::default()
        }
    }

    pub fn token_len(&self) -> usize {
        self.token_len.unwrap_or(self.input_len / 2)
    }

    pub fn window_spec(&self) -> Result<WindowSpec> {
        WindowSpec::new(self.input_len, self.token_len(), self.pred_len)
    }

    pub fn decoder_len(&self) -> usize {
        self.token_len() + self.pred_len
    }

    /// GRU depth inside decoder SIRN layers.
    pub fn decoder_gru_layers(&self) -> usize {
        match self.mode {
            ForecastMode::Multivariate => 2,
            ForecastMode::Univariate => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("model width {} must be a positive multiple of heads {}", self.d, self.heads));
        }
        if self.w == 0 || self.w % 2 != 0 {
            return bad(format!("window size must be even and positive, got {}", self.w));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.eta == 0 {
            return bad("eta must be at least 1".into());
        }
        for (name, k) in [
            ("decomp_kernel", self.decomp_kernel),
            ("seasonal_kernel", self.seasonal_kernel),
            ("fusion_kernel", self.fusion_kernel),
        ] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.transforms > MAX_TRANSFORMS {
            return bad(format!("transforms must be at most {MAX_TRANSFORMS}, got {}", self.transforms));
        }
        if self.input_len < 2 || self.pred_len == 0 {
            return bad("input_len must be at least 2 and pred_len positive".into());
        }
        if self.token_len() > self.input_len {
            return bad(format!("token_len {} exceeds input_len {}", self.token_len(), self.input_len));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.train_stride == 0 || self.eval_samples == 0 {
            return bad("batch_size, train_stride and eval_samples must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
        assert_eq!(ModelConfig::default().token_len(), 48);
    }

    #[test]
    fn odd_window_rejected() {
        let c = ModelConfig { w: 3, ..Default::default() };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("window size must be even"), "{e}");
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = ModelConfig { lambda: 0.5, ..Default::default() };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"bogus": 1}"#).is_err());
        assert_eq!(serde_json::from_str::<ModelConfig>("{}").unwrap(), ModelConfig::default());
    }
}
