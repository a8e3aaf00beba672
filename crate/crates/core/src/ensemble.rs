//! Bayesian domain-posterior ensembling.
//!
//! The next-token distribution of a forest is
//! `p(x_t | x<t) = Σ_i p(x_t | x<t, D_i) · p(D_i | x<t)` with the posterior
//! `p(D_i | x<t) ∝ p(x<t | D_i) · p(D_i)`. Everything stays in log space; the
//! posterior for position `t` only sees tokens strictly before `t`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, BOS};
use crate::tinylm::{self, ExpertCheckpoint, ModelError};

/// Tolerance on `logsumexp(row)` for an expert distribution to count as normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("expected {expected} experts, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("expert {expert} is not normalized (logsumexp = {logsumexp:e})")]
    UnnormalizedExpert { expert: usize, logsumexp: f64 },
    #[error("experts disagree on vocabulary size")]
    VocabMismatch,
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("forest has no experts")]
    EmptyForest,
    #[error("nothing to evaluate")]
    EmptyEval,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing posterior trace: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EnsembleError> = std::result::Result<T, E>;

/// Anything that yields next-token log-probabilities for a prefix.
pub trait LanguageModel: Sync {
    fn vocab_size(&self) -> usize;

    /// Longest context accepted by one call to [`prefix_logprobs`](Self::prefix_logprobs).
    fn max_context(&self) -> usize;

    /// Row `t` holds `log p(· | tokens[..=t])`.
    fn prefix_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, ModelError>;

    /// Token that opens every evaluated sequence.
    fn bos_token(&self) -> TokenId {
        BOS
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn max_context(&self) -> usize {
        (**self).max_context()
    }
    fn prefix_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, ModelError> {
        (**self).prefix_logprobs(tokens)
    }
    fn bos_token(&self) -> TokenId {
        (**self).bos_token()
    }
}

impl LanguageModel for ExpertCheckpoint {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn max_context(&self) -> usize {
        self.config().seq_len
    }

    fn prefix_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, ModelError> {
        tinylm::prefix_logprobs(self, tokens)
    }

    /// Vocabularies smaller than the byte tokenizer's (tests only) use their
    /// last id as BOS.
    fn bos_token(&self) -> TokenId {
        BOS.min(self.vocab_size() as TokenId - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum DomainPrior {
    #[default]
    Uniform,
    Fixed(Vec<f64>),
}

impl DomainPrior {
    pub fn validate(&self) -> Result<()> {
        if let Self::Fixed(p) = self {
            if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(EnsembleError::InvalidPrior("values must be finite and non-negative".into()));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(EnsembleError::InvalidPrior(format!("values sum to {total}, not 1")));
            }
        }
        Ok(())
    }

    pub fn log_values(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(EnsembleError::EmptyForest);
        }
        self.validate()?;
        match self {
            Self::Uniform => Ok(vec![-(n as f64).ln(); n]),
            Self::Fixed(p) if p.len() != n => Err(EnsembleError::DimensionMismatch {
                expected: n,
                actual: p.len(),
            }),
            Self::Fixed(p) => Ok(p.iter().map(|x| x.ln()).collect()),
        }
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorState {
    /// `log p(x<t | D_i)` per expert.
    pub cum_loglik: Vec<f64>,
    pub log_prior: Vec<f64>,
    pub t: usize,
}

pub fn init_posterior(n: usize, prior: &DomainPrior) -> Result<PosteriorState> {
    Ok(PosteriorState {
        cum_loglik: vec![0.0; n],
        log_prior: prior.log_values(n)?,
        t: 0,
    })
}

impl PosteriorState {
    pub fn len(&self) -> usize {
        self.cum_loglik.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cum_loglik.is_empty()
    }

    /// Normalized log posterior; `-inf` entries stay `-inf`.
    pub fn log_weights(&self) -> Vec<f64> {
        let joint: Vec<f64> = self.cum_loglik.iter().zip(&self.log_prior).map(|(l, p)| l + p).collect();
        let norm = logsumexp(&joint);
        if !norm.is_finite() {
            // Every expert has ruled itself out; fall back to the prior.
            let norm = logsumexp(&self.log_prior);
            return self.log_prior.iter().map(|p| p - norm).collect();
        }
        joint.iter().map(|j| j - norm).collect()
    }
}

/// `softmax(cum_loglik + log_prior)`.
pub fn posterior_weights(state: &PosteriorState) -> Vec<f64> {
    state.log_weights().into_iter().map(f64::exp).collect()
}

/// Log-probabilities over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDistribution {
    pub logprobs: Vec<f64>,
}

impl EnsembleDistribution {
    pub fn logprob(&self, token: TokenId) -> f64 {
        self.logprobs[token as usize]
    }
}

/// Mixes the experts' distributions with the current posterior, then folds
/// `observed` into the likelihoods.
pub fn step(
    state: &PosteriorState,
    per_expert_logprobs: &[Vec<f64>],
    observed: TokenId,
) -> Result<(EnsembleDistribution, PosteriorState)> {
    let n = state.len();
    if per_expert_logprobs.len() != n {
        return Err(EnsembleError::DimensionMismatch {
            expected: n,
            actual: per_expert_logprobs.len(),
        });
    }
    let vocab = per_expert_logprobs.first().ok_or(EnsembleError::EmptyForest)?.len();
    for (expert, row) in per_expert_logprobs.iter().enumerate() {
        if row.len() != vocab {
            return Err(EnsembleError::VocabMismatch);
        }
        let lse = logsumexp(row);
        if !(lse.abs() <= NORMALIZATION_TOLERANCE) {
            return Err(EnsembleError::UnnormalizedExpert { expert, logsumexp: lse });
        }
    }
    if observed as usize >= vocab {
        return Err(EnsembleError::TokenOutOfRange { token: observed, vocab });
    }

    let log_w = state.log_weights();
    let live: Vec<usize> = (0..n).filter(|&i| log_w[i] > f64::NEG_INFINITY).collect();
    let mut terms = vec![0.0; live.len()];
    let logprobs = (0..vocab)
        .map(|v| {
            for (slot, &i) in terms.iter_mut().zip(&live) {
                *slot = log_w[i] + per_expert_logprobs[i][v];
            }
            logsumexp(&terms)
        })
        .collect();

    let mut next = state.clone();
    for (acc, row) in next.cum_loglik.iter_mut().zip(per_expert_logprobs) {
        *acc += row[observed as usize];
    }
    next.t += 1;
    Ok((EnsembleDistribution { logprobs }, next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceNll {
    pub total: f64,
    pub per_token: Vec<f64>,
    /// Posterior weights in force before each prediction.
    pub posterior_trace: Vec<Vec<f64>>,
}

impl SequenceNll {
    pub fn token_count(&self) -> usize {
        self.per_token.len()
    }
}

/// `log p(· | context)` for every position of `full[..]` that predicts a token,
/// i.e. positions `0..full.len() - 1`, with contexts truncated to the model's
/// window.
fn expert_rows<M: LanguageModel>(model: &M, full: &[TokenId], range: std::ops::Range<usize>) -> Result<Vec<Vec<f64>>> {
    let window = model.max_context();
    if range.end <= window {
        let mut rows = model.prefix_logprobs(&full[..range.end])?;
        rows.drain(..range.start);
        return Ok(rows);
    }
    range
        .map(|pos| {
            let lo = (pos + 1).saturating_sub(window);
            let mut rows = model.prefix_logprobs(&full[lo..=pos])?;
            Ok(rows.pop().expect("non-empty window"))
        })
        .collect()
}

fn check_forest<M: LanguageModel>(models: &[M]) -> Result<(usize, TokenId)> {
    let first = models.first().ok_or(EnsembleError::EmptyForest)?;
    let (vocab, bos) = (first.vocab_size(), first.bos_token());
    if models.iter().any(|m| m.vocab_size() != vocab || m.bos_token() != bos) {
        return Err(EnsembleError::VocabMismatch);
    }
    Ok((vocab, bos))
}

/// Ensemble negative log-likelihood of `tokens`, the first predicted from a
/// lone BOS with the posterior equal to the prior.
pub fn sequence_nll<M: LanguageModel>(models: &[M], prior: &DomainPrior, tokens: &[TokenId]) -> Result<SequenceNll> {
    let (_, bos) = check_forest(models)?;
    if tokens.is_empty() {
        return Err(EnsembleError::EmptyEval);
    }
    let mut state = init_posterior(models.len(), prior)?;
    let mut full = Vec::with_capacity(tokens.len() + 1);
    full.push(bos);
    full.extend_from_slice(tokens);

    let chunk = models.iter().map(LanguageModel::max_context).min().unwrap_or(1).max(1);
    let mut out = SequenceNll {
        total: 0.0,
        per_token: Vec::with_capacity(tokens.len()),
        posterior_trace: Vec::with_capacity(tokens.len()),
    };
    let mut start = 0;
    while start < tokens.len() {
        let end = (start + chunk).min(tokens.len());
        let rows: Vec<Vec<Vec<f64>>> = models
            .iter()
            .map(|m| expert_rows(m, &full, start..end))
            .collect::<Result<_>>()?;
        for pos in start..end {
            let per_expert: Vec<Vec<f64>> = rows.iter().map(|r| r[pos - start].clone()).collect();
            out.posterior_trace.push(posterior_weights(&state));
            let (dist, next) = step(&state, &per_expert, tokens[pos])?;
            let nll = -dist.logprob(tokens[pos]);
            out.per_token.push(nll);
            out.total += nll;
            state = next;
        }
        start = end;
    }
    Ok(out)
}

/// `exp(nll / tokens)` over one continuous sequence.
pub fn perplexity<M: LanguageModel>(models: &[M], prior: &DomainPrior, eval_tokens: &[TokenId]) -> Result<f64> {
    let nll = sequence_nll(models, prior, eval_tokens)?;
    Ok((nll.total / nll.token_count() as f64).exp())
}

/// Perplexity pooled over documents, with the posterior reset at the start
/// of each one.
pub fn document_perplexity<M: LanguageModel>(
    models: &[M],
    prior: &DomainPrior,
    documents: &[&[TokenId]],
) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for doc in documents.iter().filter(|d| !d.is_empty()) {
        let nll = sequence_nll(models, prior, doc)?;
        total += nll.total;
        count += nll.token_count();
    }
    if count == 0 {
        return Err(EnsembleError::EmptyEval);
    }
    Ok((total / count as f64).exp())
}

/// Cuts `tokens` into consecutive documents of `len` tokens; the last may be shorter.
pub fn documents(tokens: &[TokenId], len: usize) -> Vec<&[TokenId]> {
    tokens.chunks(len.max(1)).collect()
}

/// CSV with one row per position: `t` followed by one weight column per expert.
pub fn write_trace_csv<W: Write>(trace: &[Vec<f64>], expert_names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend(expert_names.iter().cloned());
    w.write_record(&header)?;
    for (t, weights) in trace.iter().enumerate() {
        if weights.len() != expert_names.len() {
            return Err(EnsembleError::DimensionMismatch {
                expected: expert_names.len(),
                actual: weights.len(),
            });
        }
        let mut record = vec![t.to_string()];
        record.extend(weights.iter().map(|x| x.to_string()));
        w.write_record(&record)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Emits the same distribution at every position.
    struct Constant {
        logprobs: Vec<f64>,
        bos: TokenId,
    }

    impl Constant {
        fn new(probs: &[f64]) -> Self {
            Self {
                logprobs: probs.iter().map(|p| p.ln()).collect(),
                bos: 0,
            }
        }
    }

    impl LanguageModel for Constant {
        fn vocab_size(&self) -> usize {
            self.logprobs.len()
        }
        fn max_context(&self) -> usize {
            4
        }
        fn prefix_logprobs(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>, ModelError> {
            assert!(tokens.len() <= 4);
            Ok(vec![self.logprobs.clone(); tokens.len()])
        }
        fn bos_token(&self) -> TokenId {
            self.bos
        }
    }

    #[test]
    fn init_and_prior_errors() {
        let s = init_posterior(3, &DomainPrior::Uniform).unwrap();
        for w in posterior_weights(&s) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(posterior_weights(&init_posterior(1, &DomainPrior::Uniform).unwrap()), vec![1.0]);
        assert!(matches!(
            init_posterior(3, &DomainPrior::Fixed(vec![0.5, 0.5])),
            Err(EnsembleError::DimensionMismatch { expected: 3, actual: 2 })
        ));
        assert!(matches!(
            init_posterior(2, &DomainPrior::Fixed(vec![0.5, 0.6])),
            Err(EnsembleError::InvalidPrior(_))
        ));
        assert!(matches!(init_posterior(0, &DomainPrior::Uniform), Err(EnsembleError::EmptyForest)));
    }

    #[test]
    fn hand_posterior_and_mixture() {
        let s = PosteriorState {
            cum_loglik: vec![0.9f64.ln(), 0.1f64.ln()],
            log_prior: vec![0.5f64.ln(); 2],
            t: 1,
        };
        let w = posterior_weights(&s);
        assert!((w[0] - 0.9).abs() < 1e-12 && (w[1] - 0.1).abs() < 1e-12);
        let rows = vec![vec![0.9f64.ln(), 0.1f64.ln()], vec![0.1f64.ln(), 0.9f64.ln()]];
        let (dist, next) = step(&s, &rows, 0).unwrap();
        assert!((dist.logprob(0).exp() - 0.82).abs() < 1e-12);
        assert_eq!(next.t, 2);
        assert!((next.cum_loglik[0] - 2.0 * 0.9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_bad_rows() {
        let s = init_posterior(2, &DomainPrior::Uniform).unwrap();
        let good = vec![0.5f64.ln(); 2];
        let bad = vec![0.6f64.ln(); 2];
        assert!(matches!(
            step(&s, &[good.clone(), bad], 0),
            Err(EnsembleError::UnnormalizedExpert { expert: 1, .. })
        ));
        assert!(matches!(step(&s, &[good.clone()], 0), Err(EnsembleError::DimensionMismatch { .. })));
        assert!(matches!(
            step(&s, &[good.clone(), good], 5),
            Err(EnsembleError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn uniform_model_gives_closed_form() {
        let m = Constant::new(&[0.25; 4]);
        let tokens = [1, 2, 3, 0, 1, 2, 3, 0, 1, 2];
        let nll = sequence_nll(&[&m], &DomainPrior::Uniform, &tokens).unwrap();
        assert!((nll.total - 10.0 * 4f64.ln()).abs() < 1e-12);
        let ppl = perplexity(&[&m], &DomainPrior::Uniform, &tokens).unwrap();
        assert!((ppl - 4.0).abs() < 1e-9);
        assert!(matches!(
            perplexity(&[&m], &DomainPrior::Uniform, &[]),
            Err(EnsembleError::EmptyEval)
        ));
    }

    #[test]
    fn identical_experts_keep_the_prior() {
        let a = Constant::new(&[0.7, 0.2, 0.1]);
        let b = Constant::new(&[0.7, 0.2, 0.1]);
        let nll = sequence_nll(&[&a, &b], &DomainPrior::Fixed(vec![0.3, 0.7]), &[0, 1, 2, 0]).unwrap();
        for w in &nll.posterior_trace {
            assert!((w[0] - 0.3).abs() < 1e-12);
        }
        let solo = sequence_nll(&[&a], &DomainPrior::Uniform, &[0, 1, 2, 0]).unwrap();
        assert!((nll.total - solo.total).abs() < 1e-12);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_trace_csv(&[vec![0.5, 0.5], vec![0.9, 0.1]], &["a".into(), "b".into()], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().collect::<Vec<_>>(), vec!["t,a,b", "0,0.5,0.5", "1,0.9,0.1"]);
    }

    #[test]
    fn documents_reset_posterior() {
        let a = Constant::new(&[0.9, 0.1]);
        let b = Constant::new(&[0.1, 0.9]);
        let tokens = [0, 0, 0, 1, 1, 1];
        let docs = documents(&tokens, 3);
        assert_eq!(docs.len(), 2);
        let pooled = document_perplexity(&[&a, &b], &DomainPrior::Uniform, &docs).unwrap();
        let first = sequence_nll(&[&a, &b], &DomainPrior::Uniform, docs[0]).unwrap();
        let second = sequence_nll(&[&a, &b], &DomainPrior::Uniform, docs[1]).unwrap();
        // By symmetry both documents score the same.
        assert!((first.total - second.total).abs() < 1e-12);
        assert!((pooled - (first.total / 3.0).exp()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn shift_invariance(ll in prop::collection::vec(-50.0f64..0.0, 1..6), c in -100.0f64..100.0) {
            let n = ll.len();
            let s = PosteriorState { cum_loglik: ll.clone(), log_prior: vec![-(n as f64).ln(); n], t: 3 };
            let shifted = PosteriorState { cum_loglik: ll.iter().map(|x| x + c).collect(), ..s.clone() };
            for (a, b) in posterior_weights(&s).iter().zip(posterior_weights(&shifted)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let total: f64 = posterior_weights(&s).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn concentration_bound(n in 2usize..6, margin in 0.0f64..30.0, rest in prop::collection::vec(-20.0f64..0.0, 5)) {
            let mut ll: Vec<f64> = rest[..n - 1].to_vec();
            let top = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max) + margin;
            ll.insert(0, top);
            let s = init_posterior(n, &DomainPrior::Uniform).unwrap();
            let s = PosteriorState { cum_loglik: ll, ..s };
            let bound = 1.0 / (1.0 + (n as f64 - 1.0) * (-margin).exp());
            prop_assert!(posterior_weights(&s)[0] >= bound - 1e-12);
        }
    }
}
