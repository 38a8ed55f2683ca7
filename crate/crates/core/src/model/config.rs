use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{MaskStrategy, DEFAULT_SPAN_MEAN};
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub st: f64,
    pub asr: f64,
    pub ctc: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            st: 1.0,
            asr: 1.0,
            ctc: 0.3,
            rec: 1.0,
        }
    }
}

/// Architecture and objective hyperparameters.
///
/// `vocab_st` / `vocab_asr` count every output class including the special
/// tokens. When a token list is attached it defines the size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab_st: usize,
    pub vocab_asr: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub st_vocab: Option<Vocab>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr_vocab: Option<Vocab>,
    pub lambda: f64,
    pub mask_strategy: MaskStrategy,
    pub span_mean: f64,
    pub weights: LossWeights,
    pub dropout: f64,
    /// Compute the reconstruction error on masked frames only.
    pub rec_masked_only: bool,
    /// Under MAM modes, feed the translation decoder from a clean encoder pass.
    pub st_on_clean: bool,
    /// Seeds the training-time mask plans. Inference never masks.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_x: 80,
            d_model: 256,
            n_heads: 4,
            ffn_dim: 2048,
            enc_layers: 12,
            dec_layers: 6,
            vocab_st: 8000,
            vocab_asr: 8000,
            st_vocab: None,
            asr_vocab: None,
            lambda: 0.3,
            mask_strategy: MaskStrategy::Frame,
            span_mean: DEFAULT_SPAN_MEAN,
            weights: LossWeights::default(),
            dropout: 0.1,
            rec_masked_only: false,
            st_on_clean: false,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks and toy experiments.
    pub fn toy(d_x: usize) -> Self {
        Self {
            d_x,
            d_model: 32,
            n_heads: 2,
            ffn_dim: 64,
            enc_layers: 2,
            dec_layers: 1,
            vocab_st: 16,
            vocab_asr: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_x", self.d_x),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_st", self.vocab_st),
            ("vocab_asr", self.vocab_asr),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model < 4 {
            return Err(Error::Config("d_model must be at least 4".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidLambda(self.lambda));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for (name, vocab, size) in [
            ("st", &self.st_vocab, self.vocab_st),
            ("asr", &self.asr_vocab, self.vocab_asr),
        ] {
            if let Some(v) = vocab {
                if v.len() != size {
                    return Err(Error::Config(format!(
                        "{name} vocabulary lists {} tokens but size is {size}",
                        v.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn with_st_vocab(mut self, vocab: Vocab) -> Self {
        self.vocab_st = vocab.len();
        self.st_vocab = Some(vocab);
        self
    }

    pub fn with_asr_vocab(mut self, vocab: Vocab) -> Self {
        self.vocab_asr = vocab.len();
        self.asr_vocab = Some(vocab);
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Channels of the first conv layer (and of the last upsampling layer's input).
    pub fn conv_channels(&self) -> usize {
        (self.d_model / 4).max(1)
    }

    /// Feature bins left after two stride-2 convolutions.
    pub fn reduced_bins(&self) -> usize {
        self.d_x.div_ceil(2).div_ceil(2)
    }

    /// CTC classes: the transcript vocabulary plus a trailing blank.
    pub fn ctc_classes(&self) -> usize {
        self.vocab_asr + 1
    }

    pub fn ctc_blank(&self) -> usize {
        self.vocab_asr
    }
}

/// Encoder frames left after two stride-2 convolutions.
pub fn encoder_frames(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}
