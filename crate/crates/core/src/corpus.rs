//! Domain corpora: byte-level tokenization, deterministic held-out splits,
//! training batch streams and difficulty classification.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

/// Number of plain byte tokens.
pub const BYTE_TOKENS: usize = 256;
pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
/// 256 bytes plus BOS/EOS/PAD.
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus has {tokens} tokens but the split needs at least {required}")]
    CorpusTooSmall { tokens: usize, required: usize },
    #[error("sequence length {seq_len} needs more than {available} tokens")]
    SequenceTooLong { seq_len: usize, available: usize },
    #[error("difficulty classification needs at least 3 domains, got {0}")]
    TooFewDomains(usize),
    #[error("perplexity for domain `{domain}` must be finite and > 1, got {value}")]
    InvalidPerplexity { domain: String, value: f64 },
    #[error("invalid split spec: {0}")]
    InvalidSplitSpec(String),
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed domain registry {path}: {source}")]
    Registry {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate domain `{0}` in registry")]
    DuplicateDomain(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Maps every byte to its own id. Never produces special tokens.
pub fn tokenize(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| TokenId::from(b)).collect()
}

/// Inverse of [`tokenize`]; special tokens carry no bytes and are dropped.
pub fn detokenize(tokens: &[TokenId]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainCorpus {
    pub name: String,
    pub raw_bytes: Vec<u8>,
    pub tokens: Vec<TokenId>,
}

impl DomainCorpus {
    pub fn from_bytes(name: impl Into<String>, raw_bytes: Vec<u8>) -> Self {
        let tokens = tokenize(&raw_bytes);
        Self {
            name: name.into(),
            raw_bytes,
            tokens,
        }
    }

    /// Reads a text file verbatim; newlines and any non-UTF-8 bytes are kept.
    pub fn load(name: impl Into<String>, path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_bytes(name, raw))
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Fraction of the corpus (taken from its tail) reserved for val + test.
    pub holdout_fraction: f64,
    pub rng_seed: u64,
    /// Share of held-out blocks that go to validation.
    pub val_test_ratio: f64,
    /// Held-out block length in tokens; normally the model sequence length.
    pub block_size: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.05,
            rng_seed: 0,
            val_test_ratio: 0.5,
            block_size: 128,
        }
    }
}

/// Which token ranges of the source corpus ended up where.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitLayout {
    pub train: Range<usize>,
    pub val_blocks: Vec<Range<usize>>,
    pub test_blocks: Vec<Range<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<TokenId>,
    pub val: Vec<TokenId>,
    pub test: Vec<TokenId>,
    pub layout: SplitLayout,
}

/// Splits a corpus into train / validation / test.
///
/// The held-out region is the last `round(holdout_fraction * n)` tokens,
/// cut into contiguous blocks of `block_size` (shrunk so there are at least
/// two). A seeded shuffle decides which blocks are validation and which are
/// test; each split keeps its blocks in corpus order.
pub fn split(corpus: &DomainCorpus, spec: &SplitSpec) -> Result<CorpusSplit> {
    split_tokens(&corpus.tokens, spec)
}

pub fn split_tokens(tokens: &[TokenId], spec: &SplitSpec) -> Result<CorpusSplit> {
    if !(spec.holdout_fraction > 0.0 && spec.holdout_fraction < 1.0) {
        return Err(CorpusError::InvalidSplitSpec(format!(
            "holdout_fraction {} not in (0, 1)",
            spec.holdout_fraction
        )));
    }
    if !(spec.val_test_ratio > 0.0 && spec.val_test_ratio < 1.0) {
        return Err(CorpusError::InvalidSplitSpec(format!(
            "val_test_ratio {} not in (0, 1)",
            spec.val_test_ratio
        )));
    }
    if spec.block_size == 0 {
        return Err(CorpusError::InvalidSplitSpec("block_size must be positive".into()));
    }
    let n = tokens.len();
    let required = (10.0 / spec.holdout_fraction).ceil() as usize;
    if n < required {
        return Err(CorpusError::CorpusTooSmall {
            tokens: n,
            required,
        });
    }

    let holdout = ((spec.holdout_fraction * n as f64).round() as usize).clamp(2, n - 1);
    let block = spec.block_size.min(holdout.div_ceil(2));
    let start = n - holdout;
    let blocks: Vec<Range<usize>> = (start..n)
        .step_by(block)
        .map(|b| b..(b + block).min(n))
        .collect();

    let num_val = ((spec.val_test_ratio * blocks.len() as f64).round() as usize)
        .clamp(1, blocks.len() - 1);
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.rng_seed));
    let mut is_val = vec![false; blocks.len()];
    for &i in &order[..num_val] {
        is_val[i] = true;
    }

    let (mut val_blocks, mut test_blocks) = (Vec::new(), Vec::new());
    for (range, val) in blocks.into_iter().zip(is_val) {
        if val {
            val_blocks.push(range);
        } else {
            test_blocks.push(range);
        }
    }
    let gather = |ranges: &[Range<usize>]| -> Vec<TokenId> {
        ranges.iter().flat_map(|r| tokens[r.clone()].iter().copied()).collect()
    };
    Ok(CorpusSplit {
        train: tokens[..start].to_vec(),
        val: gather(&val_blocks),
        test: gather(&test_blocks),
        layout: SplitLayout {
            train: 0..start,
            val_blocks,
            test_blocks,
        },
    })
}

/// `batch_size` windows of `seq_len` tokens, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
}

impl Batch {
    pub fn from_rows(rows: &[(Vec<TokenId>, Vec<TokenId>)]) -> Self {
        let seq_len = rows.first().map_or(0, |r| r.0.len());
        let mut inputs = Vec::with_capacity(rows.len() * seq_len);
        let mut targets = Vec::with_capacity(rows.len() * seq_len);
        for (i, t) in rows {
            assert_eq!(i.len(), seq_len, "ragged batch");
            assert_eq!(t.len(), seq_len, "ragged batch");
            inputs.extend_from_slice(i);
            targets.extend_from_slice(t);
        }
        Self {
            batch_size: rows.len(),
            seq_len,
            inputs,
            targets,
        }
    }

    pub fn input_row(&self, b: usize) -> &[TokenId] {
        &self.inputs[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn target_row(&self, b: usize) -> &[TokenId] {
        &self.targets[b * self.seq_len..(b + 1) * self.seq_len]
    }

    pub fn token_count(&self) -> usize {
        self.batch_size * self.seq_len
    }
}

/// Endless stream of uniformly sampled training windows.
#[derive(Debug, Clone)]
pub struct BatchIterator<'a> {
    tokens: &'a [TokenId],
    seq_len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

pub fn batch_iterator(
    tokens: &[TokenId],
    seq_len: usize,
    batch_size: usize,
    rng_seed: u64,
) -> Result<BatchIterator<'_>> {
    if seq_len == 0 || seq_len >= tokens.len() {
        return Err(CorpusError::SequenceTooLong {
            seq_len,
            available: tokens.len(),
        });
    }
    if batch_size == 0 {
        return Err(CorpusError::EmptyBatch);
    }
    Ok(BatchIterator {
        tokens,
        seq_len,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
    })
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let max_start = self.tokens.len() - self.seq_len - 1;
        let mut inputs = Vec::with_capacity(self.batch_size * self.seq_len);
        let mut targets = Vec::with_capacity(self.batch_size * self.seq_len);
        for _ in 0..self.batch_size {
            let s = self.rng.random_range(0..=max_start);
            inputs.extend_from_slice(&self.tokens[s..s + self.seq_len]);
            targets.extend_from_slice(&self.tokens[s + 1..s + 1 + self.seq_len]);
        }
        Some(Batch {
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            inputs,
            targets,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyTier {
    Easy,
    Moderate,
    Difficult,
}

impl DifficultyTier {
    pub const ALL: [DifficultyTier; 3] = [Self::Easy, Self::Moderate, Self::Difficult];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Moderate => "moderate",
            Self::Difficult => "difficult",
        }
    }
}

impl fmt::Display for DifficultyTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DifficultyTier {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Self::Easy),
            "moderate" => Ok(Self::Moderate),
            "difficult" => Ok(Self::Difficult),
            other => Err(format!("unknown difficulty tier `{other}`")),
        }
    }
}

/// Sorts domains by seed-model perplexity (name breaks ties) and cuts the
/// ordering into tertiles: lowest third Easy, middle Moderate, top Difficult.
pub fn classify_difficulty(
    seed_ppls: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, DifficultyTier>> {
    if seed_ppls.len() < 3 {
        return Err(CorpusError::TooFewDomains(seed_ppls.len()));
    }
    if let Some((domain, &value)) = seed_ppls.iter().find(|(_, p)| !(p.is_finite() && **p > 1.0)) {
        return Err(CorpusError::InvalidPerplexity {
            domain: domain.clone(),
            value,
        });
    }
    let mut ranked: Vec<(&String, f64)> = seed_ppls.iter().map(|(d, &p)| (d, p)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let n = ranked.len();
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(i, (d, _))| (d.clone(), DifficultyTier::ALL[3 * i / n]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier_override: Option<DifficultyTier>,
    /// Evaluation-only domains are never trained on.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub eval_only: bool,
}

/// JSON list of domains; relative paths resolve against the registry file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl DomainRegistry {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries: Vec<RegistryEntry> =
            serde_json::from_slice(&text).map_err(|source| CorpusError::Registry {
                path: path.to_path_buf(),
                source,
            })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        let registry = Self { entries };
        registry.check_unique()?;
        Ok(registry)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(CorpusError::DuplicateDomain(e.name.clone()));
            }
        }
        Ok(())
    }

    pub fn trained(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.entries.iter().filter(|e| !e.eval_only)
    }

    pub fn load_corpora(&self) -> Result<Vec<DomainCorpus>> {
        self.entries
            .iter()
            .map(|e| DomainCorpus::load(e.name.clone(), &e.path))
            .collect()
    }
}
