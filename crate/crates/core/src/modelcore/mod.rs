//! The conditional sequence-model contract shared by every pipeline stage.
//!
//! Both directions of the pipeline are instances of one contract: the forward
//! model scores and generates responses from instructions, the reverse model
//! does the same with the roles swapped. Backends implement [`Backend`];
//! stages only ever talk to a [`ModelHandle`], which enforces the advertised
//! capabilities before delegating.

pub mod codec;
pub mod reference;
pub mod sampling;
pub mod tokenizer;

use std::any::Any;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fanout::Fanout;

pub use codec::{PromptTemplates, TextCodec};
pub use reference::{ReferenceConfig, ReferenceModel};
pub use sampling::{nucleus_filter, apply_temperature};
pub use tokenizer::{Tokenizer, TokenizerMode, TokenizerSpec};

pub type TokenId = u32;

/// Serialized with a `code` tag so the same error can cross the wire.
#[derive(Debug, Error, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail", rename_all = "snake_case")]
pub enum ModelError {
    #[error("backend `{backend}` does not support {verb}")]
    Unsupported { backend: String, verb: String },
    #[error("no training examples")]
    EmptyExamples,
    #[error("example {index} has invalid weight {weight}")]
    InvalidWeight { index: usize, weight: f64 },
    #[error("example {index} has an empty target")]
    EmptyTarget { index: usize },
    #[error("total example weight is zero")]
    ZeroTotalWeight,
    #[error("epochs must be positive")]
    ZeroEpochs,
    #[error("target sequence is empty")]
    EmptyScoreTarget,
    #[error("cannot tokenize {0:?}")]
    Untokenizable(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(TokenId),
    #[error("invalid prompt template: {0}")]
    InvalidTemplate(String),
    #[error("invalid decode parameters: {0}")]
    InvalidDecode(String),
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error("remote {endpoint}: {message}")]
    Remote { endpoint: String, message: String },
    #[error("protocol error from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("backend failure: {0}")]
    Backend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_fit: bool,
    pub supports_score: bool,
    pub supports_generate: bool,
    pub max_concurrency: usize,
}

impl Capabilities {
    pub fn all(max_concurrency: usize) -> Self {
        Self { supports_fit: true, supports_score: true, supports_generate: true, max_concurrency }
    }
}

/// One training example of the weighted objective. Synthetic pairs carry the
/// mixing weight, seed pairs its complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedExample {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub weight: f64,
}

impl WeightedExample {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>, weight: f64) -> Self {
        Self { source, target, weight }
    }
}

/// Directives for a fit call. Closed-form backends ignore everything but
/// validate `epochs`; neural backends receive them verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { epochs: 1, learning_rate: 1e-5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Argmax decoding; the zero-temperature limit.
    pub greedy: bool,
    #[serde(skip)]
    pub stream: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 0.7, top_p: 0.9, max_new_tokens: 256, greedy: false, stream: 0 }
    }
}

impl DecodeParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { temperature: 1.0, top_p: 1.0, max_new_tokens, greedy: true, stream: 0 }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(ModelError::InvalidDecode(format!("temperature {} must be > 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ModelError::InvalidDecode(format!("top_p {} must be in (0, 1]", self.top_p)));
        }
        if self.max_new_tokens == 0 {
            return Err(ModelError::InvalidDecode("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Teacher-forced negative log-likelihood of a target sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllScore {
    pub per_token: Vec<f64>,
    pub mean: f64,
    pub sum: f64,
}

impl NllScore {
    pub fn from_per_token(per_token: Vec<f64>) -> Self {
        let sum: f64 = per_token.iter().sum();
        let mean = sum / per_token.len() as f64;
        Self { per_token, mean, sum }
    }
}

/// A trainable conditional model p(target | source).
pub trait Backend: Send + Sync + fmt::Debug {
    fn backend_id(&self) -> String;

    fn capabilities(&self) -> Capabilities;

    /// Return a new model minimizing the weighted token cross-entropy over
    /// `examples`. The receiver is left unchanged.
    fn fit_weighted(
        &self,
        examples: &[WeightedExample],
        options: &FitOptions,
    ) -> Result<Arc<dyn Backend>, ModelError>;

    fn generate(&self, source: &[TokenId], params: &DecodeParams) -> Result<Vec<TokenId>, ModelError>;

    fn score_nll(&self, source: &[TokenId], target: &[TokenId]) -> Result<NllScore, ModelError>;

    fn as_any(&self) -> &dyn Any;
}

/// Validation shared by in-process backends and the remote server contract.
pub fn check_examples(examples: &[WeightedExample]) -> Result<(), ModelError> {
    if examples.is_empty() {
        return Err(ModelError::EmptyExamples);
    }
    let mut total = 0.0;
    for (index, ex) in examples.iter().enumerate() {
        if !ex.weight.is_finite() || ex.weight < 0.0 {
            return Err(ModelError::InvalidWeight { index, weight: ex.weight });
        }
        if ex.target.is_empty() {
            return Err(ModelError::EmptyTarget { index });
        }
        total += ex.weight;
    }
    if total <= 0.0 {
        return Err(ModelError::ZeroTotalWeight);
    }
    Ok(())
}

/// Capability-checked reference to a model. Cloning is cheap and shares the
/// underlying (immutable) model.
#[derive(Clone, Debug)]
pub struct ModelHandle {
    inner: Arc<dyn Backend>,
}

impl ModelHandle {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self { inner: Arc::new(backend) }
    }

    pub fn from_arc(inner: Arc<dyn Backend>) -> Self {
        Self { inner }
    }

    pub fn backend_id(&self) -> String {
        self.inner.backend_id()
    }

    pub fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    pub fn max_concurrency(&self) -> usize {
        self.capabilities().max_concurrency.max(1)
    }

    pub fn backend(&self) -> &dyn Backend {
        self.inner.as_ref()
    }

    /// Downcast to a concrete backend type.
    pub fn downcast<T: 'static>(&self) -> Option<&T> {
        self.inner.as_any().downcast_ref::<T>()
    }

    /// True when both handles point at the same model instance.
    pub fn same_model(&self, other: &ModelHandle) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    fn require(&self, supported: bool, verb: &'static str) -> Result<(), ModelError> {
        if supported {
            Ok(())
        } else {
            Err(ModelError::Unsupported { backend: self.backend_id(), verb: verb.into() })
        }
    }

    pub fn fit_weighted(&self, examples: &[WeightedExample], options: &FitOptions) -> Result<ModelHandle, ModelError> {
        self.require(self.capabilities().supports_fit, "fit")?;
        if options.epochs == 0 {
            return Err(ModelError::ZeroEpochs);
        }
        self.inner.fit_weighted(examples, options).map(ModelHandle::from_arc)
    }

    pub fn generate(&self, source: &[TokenId], params: &DecodeParams) -> Result<Vec<TokenId>, ModelError> {
        self.require(self.capabilities().supports_generate, "generate")?;
        params.validate()?;
        self.inner.generate(source, params)
    }

    pub fn score_nll(&self, source: &[TokenId], target: &[TokenId]) -> Result<NllScore, ModelError> {
        self.require(self.capabilities().supports_score, "score")?;
        if target.is_empty() {
            return Err(ModelError::EmptyScoreTarget);
        }
        self.inner.score_nll(source, target)
    }

    /// Mean of per-example mean token NLLs.
    ///
    /// The means are summed in sorted order so the result does not depend on
    /// the order of `examples`.
    pub fn eval_loss(&self, examples: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64, ModelError> {
        if examples.is_empty() {
            return Err(ModelError::EmptyEvaluation);
        }
        let fanout = Fanout::new(self.max_concurrency());
        let mut means = fanout.try_map(examples, |(s, t)| self.score_nll(s, t).map(|n| n.mean))?;
        means.sort_by(f64::total_cmp);
        Ok(means.iter().sum::<f64>() / means.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform4() -> ModelHandle {
        ModelHandle::new(ReferenceModel::new(ReferenceConfig::default(), 4))
    }

    #[test]
    fn uniform_model_scores_ln_vocab() {
        let m = uniform4();
        let s = m.score_nll(&[3], &[3, 4, 5]).unwrap();
        assert_eq!(s.per_token.len(), 3);
        for v in &s.per_token {
            assert!((v - 4f64.ln()).abs() < 1e-12);
        }
        assert!((s.mean - 1.3862943611198906).abs() < 1e-12);
        assert!((s.sum - 4.1588830833596715).abs() < 1e-12);
    }

    #[test]
    fn eval_loss_is_mean_of_means() {
        let m = uniform4();
        let one = m.eval_loss(&[(vec![3], vec![4])]).unwrap();
        assert_eq!(one, m.score_nll(&[3], &[4]).unwrap().mean);
        assert!(matches!(m.eval_loss(&[]), Err(ModelError::EmptyEvaluation)));
    }

    #[test]
    fn check_examples_rejects_degenerate_sets() {
        assert_eq!(check_examples(&[]), Err(ModelError::EmptyExamples));
        let zero = vec![WeightedExample::new(vec![], vec![3], 0.0); 3];
        assert_eq!(check_examples(&zero), Err(ModelError::ZeroTotalWeight));
        let nan = vec![WeightedExample::new(vec![], vec![3], f64::NAN)];
        assert!(matches!(check_examples(&nan), Err(ModelError::InvalidWeight { index: 0, .. })));
        let empty_target = vec![WeightedExample::new(vec![3], vec![], 1.0)];
        assert_eq!(check_examples(&empty_target), Err(ModelError::EmptyTarget { index: 0 }));
    }

    #[test]
    fn decode_params_validation() {
        assert!(DecodeParams::default().validate().is_ok());
        assert!(DecodeParams { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(DecodeParams { top_p: 0.0, ..Default::default() }.validate().is_err());
        assert!(DecodeParams { top_p: 1.5, ..Default::default() }.validate().is_err());
    }

    #[derive(Debug)]
    struct ScoreOnly;

    impl Backend for ScoreOnly {
        fn backend_id(&self) -> String {
            "score-only".into()
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities { supports_fit: false, supports_score: true, supports_generate: false, max_concurrency: 1 }
        }
        fn fit_weighted(&self, _: &[WeightedExample], _: &FitOptions) -> Result<Arc<dyn Backend>, ModelError> {
            panic!("engine called an unsupported verb")
        }
        fn generate(&self, _: &[TokenId], _: &DecodeParams) -> Result<Vec<TokenId>, ModelError> {
            panic!("engine called an unsupported verb")
        }
        fn score_nll(&self, _: &[TokenId], target: &[TokenId]) -> Result<NllScore, ModelError> {
            Ok(NllScore::from_per_token(vec![0.0; target.len()]))
        }
        fn as_any(&self) -> &dyn Any {
            self
        }
    }

    #[test]
    fn handle_never_calls_unsupported_verbs() {
        let h = ModelHandle::new(ScoreOnly);
        let ex = [WeightedExample::new(vec![], vec![3], 1.0)];
        assert!(matches!(h.fit_weighted(&ex, &FitOptions::default()), Err(ModelError::Unsupported { verb, .. }) if verb == "fit"));
        assert!(matches!(h.generate(&[3], &DecodeParams::default()), Err(ModelError::Unsupported { .. })));
        assert_eq!(h.score_nll(&[3], &[3, 3]).unwrap().mean, 0.0);
        assert_eq!(h.score_nll(&[3], &[]), Err(ModelError::EmptyScoreTarget));
    }
}
