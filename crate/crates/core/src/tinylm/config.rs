use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::corpus::{DifficultyTier, VOCAB_SIZE};

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_init_std() -> f64 {
    0.02
}

/// Architecture of one Llama-style expert: pre-norm RMSNorm, rotary
/// attention, SwiGLU feed-forward, output head tied to the embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Difficulty tier this expert serves; `None` for seeds shared by all tiers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<DifficultyTier>,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    /// Std-dev of the normal initializer (residual outputs are further scaled).
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl Default for ExpertConfig {
    /// Desk-scale expert of about 195k parameters.
    fn default() -> Self {
        Self::new(80, 256, 2, 2)
    }
}

impl ExpertConfig {
    pub fn new(hidden: usize, intermediate: usize, heads: usize, layers: usize) -> Self {
        Self {
            hidden_size: hidden,
            intermediate_size: intermediate,
            num_heads: heads,
            num_layers: layers,
            vocab_size: VOCAB_SIZE,
            seq_len: 128,
            tier: None,
            norm_eps: default_norm_eps(),
            rope_theta: default_rope_theta(),
            init_std: default_init_std(),
        }
    }

    pub fn with_vocab(mut self, vocab_size: usize) -> Self {
        self.vocab_size = vocab_size;
        self
    }

    pub fn with_seq_len(mut self, seq_len: usize) -> Self {
        self.seq_len = seq_len;
        self
    }

    pub fn with_tier(mut self, tier: Option<DifficultyTier>) -> Self {
        self.tier = tier;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if [
            self.hidden_size,
            self.intermediate_size,
            self.num_heads,
            self.num_layers,
            self.vocab_size,
            self.seq_len,
        ]
        .contains(&0)
        {
            return fail("all sizes must be positive".into());
        }
        if self.hidden_size % self.num_heads != 0 {
            return fail(format!(
                "hidden_size {} not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("rotary embeddings need an even head dim, got {}", self.head_dim()));
        }
        if self.intermediate_size < self.hidden_size {
            return fail(format!(
                "intermediate_size {} smaller than hidden_size {}",
                self.intermediate_size, self.hidden_size
            ));
        }
        if !(self.norm_eps > 0.0 && self.rope_theta > 0.0 && self.init_std > 0.0) {
            return fail("norm_eps, rope_theta and init_std must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Weights of one transformer block (attention, SwiGLU, two norm gains).
    pub fn layer_param_count(&self) -> usize {
        let h = self.hidden_size;
        4 * h * h + 3 * h * self.intermediate_size + 2 * h
    }

    /// Parameters excluding the (tied) embedding table, which is how
    /// reference model sizes are quoted.
    pub fn transformer_param_count(&self) -> usize {
        self.num_layers * self.layer_param_count()
    }

    pub fn param_count(&self) -> usize {
        self.vocab_size * self.hidden_size + self.transformer_param_count() + self.hidden_size
    }

    /// Element count of the three SwiGLU matrices of a single layer.
    pub fn ffn_layer_params(&self) -> usize {
        3 * self.hidden_size * self.intermediate_size
    }

    /// True when both configs describe the same network, ignoring the tier label.
    pub fn same_architecture(&self, other: &Self) -> bool {
        self.clone().with_tier(None) == other.clone().with_tier(None)
    }
}

/// One column of the published seed-model hyper-parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    pub name: &'static str,
    pub config: ExpertConfig,
    /// Tokens per optimizer step.
    pub batch_tokens: usize,
    pub max_lr: f64,
}

/// (name, hidden, intermediate, heads, layers, batch tokens, max lr)
const REFERENCE_TABLE: [(&str, usize, usize, usize, usize, usize, f64); 8] = [
    ("5M", 272, 1088, 8, 4, 262_144, 0.005),
    ("7.5M", 272, 1088, 8, 6, 262_144, 0.005),
    ("10M", 320, 1280, 10, 6, 262_144, 0.005),
    ("12.5M", 330, 1320, 11, 7, 262_144, 0.005),
    ("15M", 340, 1360, 10, 8, 262_144, 0.005),
    ("90M", 768, 2304, 12, 12, 688_128, 0.0006),
    ("115M", 768, 3072, 12, 12, 688_128, 0.0006),
    ("135M", 768, 3840, 12, 12, 688_128, 0.0006),
];

/// Sequence length the reference models were pretrained with.
pub const REFERENCE_SEQ_LEN: usize = 1024;

impl ReferenceModel {
    pub fn all() -> Vec<ReferenceModel> {
        REFERENCE_TABLE
            .iter()
            .map(|&(name, h, i, heads, layers, batch_tokens, max_lr)| ReferenceModel {
                name,
                config: ExpertConfig::new(h, i, heads, layers).with_seq_len(REFERENCE_SEQ_LEN),
                batch_tokens,
                max_lr,
            })
            .collect()
    }

    pub fn by_name(name: &str) -> Option<ReferenceModel> {
        Self::all().into_iter().find(|m| m.name.eq_ignore_ascii_case(name))
    }
}
