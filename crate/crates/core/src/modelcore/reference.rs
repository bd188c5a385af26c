//! In-process reference backend: an order-n conditional count model over the
//! stream `[begin, source.., separator, target.., end]` with add-k smoothing.
//!
//! Only target-side positions are modelled. Ordinary tokens get `k`
//! pseudo-counts; the end token gets none, so a context that was never seen
//! ending a sequence never stops generation early and every scored token has
//! nonzero probability whenever `k > 0`.
//!
//! The fit is the exact minimizer of the pseudo-count augmented weighted
//! cross-entropy `-sum_ctx sum_tok (w(ctx, tok) + k [tok is ordinary]) ln p(tok | ctx)`,
//! whose solution is `p = (w + k) / (W + kV)` per context.

use std::any::Any;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sampling::choose_next;
use super::tokenizer::{BEGIN, END, FIRST_WORD, SEPARATOR};
use super::{Backend, Capabilities, DecodeParams, FitOptions, ModelError, NllScore, TokenId, WeightedExample, check_examples};
use crate::seeding::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    /// Number of preceding tokens in the conditioning context.
    pub order: usize,
    pub add_k: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { order: 2, add_k: 0.5 }
    }
}

/// Weighted next-token counts observed after one context.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NextTokenCounts {
    counts: BTreeMap<TokenId, f64>,
    total: f64,
}

impl NextTokenCounts {
    pub fn add(&mut self, token: TokenId, weight: f64) {
        *self.counts.entry(token).or_insert(0.0) += weight;
        self.total += weight;
    }

    pub fn count(&self, token: TokenId) -> f64 {
        self.counts.get(&token).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Smoothed probability of an ordinary token under a vocabulary of
    /// `vocab_size` ordinary tokens.
    pub fn word_probability(&self, token: TokenId, add_k: f64, vocab_size: usize) -> f64 {
        let denom = self.total + add_k * vocab_size as f64;
        if denom <= 0.0 {
            return 1.0 / vocab_size as f64;
        }
        (self.count(token) + add_k) / denom
    }

    pub fn end_probability(&self, add_k: f64, vocab_size: usize) -> f64 {
        let denom = self.total + add_k * vocab_size as f64;
        if denom <= 0.0 { 0.0 } else { self.count(END) / denom }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceModel {
    config: ReferenceConfig,
    vocab_size: usize,
    table: BTreeMap<Vec<TokenId>, NextTokenCounts>,
    max_concurrency: usize,
}

impl PartialEq for ReferenceModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocab_size == other.vocab_size && self.table == other.table
    }
}

impl ReferenceModel {
    /// An unfitted model: uniform over the `vocab_size` ordinary tokens.
    pub fn new(config: ReferenceConfig, vocab_size: usize) -> Self {
        assert!(config.order >= 1, "reference order must be at least 1");
        assert!(vocab_size >= 1, "vocabulary must not be empty");
        Self { config, vocab_size, table: BTreeMap::new(), max_concurrency: rayon::current_num_threads() }
    }

    pub fn config(&self) -> ReferenceConfig {
        self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn context_count(&self) -> usize {
        self.table.len()
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Self {
        self.max_concurrency = n.max(1);
        self
    }

    fn id_limit(&self) -> TokenId {
        FIRST_WORD + self.vocab_size as TokenId
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        match tokens.iter().find(|&&t| t < FIRST_WORD || t >= self.id_limit()) {
            Some(&bad) => Err(ModelError::UnknownToken(bad)),
            None => Ok(()),
        }
    }

    fn history(&self, source: &[TokenId]) -> Vec<TokenId> {
        let mut h = vec![BEGIN; self.config.order];
        h.extend_from_slice(source);
        h.push(SEPARATOR);
        h
    }

    fn context<'a>(&self, history: &'a [TokenId]) -> &'a [TokenId] {
        &history[history.len() - self.config.order..]
    }

    fn probability(&self, context: &[TokenId], token: TokenId) -> f64 {
        let empty = NextTokenCounts::default();
        let counts = self.table.get(context).unwrap_or(&empty);
        if token == END {
            counts.end_probability(self.config.add_k, self.vocab_size)
        } else {
            counts.word_probability(token, self.config.add_k, self.vocab_size)
        }
    }

    /// Full next-token distribution indexed by token id.
    pub fn distribution(&self, context: &[TokenId]) -> Vec<f64> {
        let mut dist = vec![0.0; self.id_limit() as usize];
        dist[END as usize] = self.probability(context, END);
        for id in FIRST_WORD..self.id_limit() {
            dist[id as usize] = self.probability(context, id);
        }
        dist
    }

    /// Fit without capability wrapping; same semantics as [`Backend::fit_weighted`].
    pub fn fitted(&self, examples: &[WeightedExample]) -> Result<ReferenceModel, ModelError> {
        check_examples(examples)?;
        let mut table: BTreeMap<Vec<TokenId>, NextTokenCounts> = BTreeMap::new();
        for ex in examples {
            self.check_tokens(&ex.source)?;
            self.check_tokens(&ex.target)?;
            if ex.weight == 0.0 {
                continue;
            }
            let mut history = self.history(&ex.source);
            for &tok in ex.target.iter().chain(std::iter::once(&END)) {
                let ctx = self.context(&history).to_vec();
                table.entry(ctx).or_default().add(tok, ex.weight);
                history.push(tok);
            }
        }
        Ok(Self { table, ..self.clone() })
    }
}

impl Backend for ReferenceModel {
    fn backend_id(&self) -> String {
        format!("reference(order={}, k={})", self.config.order, self.config.add_k)
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::all(self.max_concurrency)
    }

    fn fit_weighted(&self, examples: &[WeightedExample], _options: &FitOptions) -> Result<Arc<dyn Backend>, ModelError> {
        Ok(Arc::new(self.fitted(examples)?))
    }

    fn generate(&self, source: &[TokenId], params: &DecodeParams) -> Result<Vec<TokenId>, ModelError> {
        self.check_tokens(source)?;
        let mut rng = rng_for(params.stream);
        let mut history = self.history(source);
        let mut out = Vec::new();
        while out.len() < params.max_new_tokens {
            let dist = self.distribution(self.context(&history));
            let next = choose_next(&dist, params, &mut rng)? as TokenId;
            if next == END || next < FIRST_WORD {
                break;
            }
            out.push(next);
            history.push(next);
        }
        Ok(out)
    }

    fn score_nll(&self, source: &[TokenId], target: &[TokenId]) -> Result<NllScore, ModelError> {
        if target.is_empty() {
            return Err(ModelError::EmptyScoreTarget);
        }
        self.check_tokens(source)?;
        self.check_tokens(target)?;
        let mut history = self.history(source);
        let mut per_token = Vec::with_capacity(target.len());
        for &tok in target {
            per_token.push(-self.probability(self.context(&history), tok).ln());
            history.push(tok);
        }
        Ok(NllScore::from_per_token(per_token))
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[derive(Serialize, Deserialize)]
struct ContextRepr {
    context: Vec<TokenId>,
    next: NextTokenCounts,
}

#[derive(Serialize, Deserialize)]
struct ReferenceRepr {
    config: ReferenceConfig,
    vocab_size: usize,
    contexts: Vec<ContextRepr>,
}

impl Serialize for ReferenceModel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ReferenceRepr {
            config: self.config,
            vocab_size: self.vocab_size,
            contexts: self
                .table
                .iter()
                .map(|(context, next)| ContextRepr { context: context.clone(), next: next.clone() })
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ReferenceModel {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = ReferenceRepr::deserialize(deserializer)?;
        if repr.config.order == 0 || repr.vocab_size == 0 {
            return Err(serde::de::Error::custom("reference model needs order >= 1 and a non-empty vocabulary"));
        }
        let mut model = ReferenceModel::new(repr.config, repr.vocab_size);
        model.table = repr.contexts.into_iter().map(|c| (c.context, c.next)).collect();
        Ok(model)
    }
}
