//! The model contract over HTTP+JSON, so an external server can act as the
//! forward or reverse model.
//!
//! Token ids never cross the wire: sources and targets travel as text and
//! generated text is re-tokenized on arrival. A server holds one live model,
//! so a remote handle is only as functional as the server it points at: a
//! fit moves every handle sharing that server to the new version.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::evalkit::judge::{Judge, JudgeRequest};
use crate::modelcore::{
    Backend, Capabilities, DecodeParams, FitOptions, ModelError, NllScore, TokenId, Tokenizer, WeightedExample,
};
use crate::seeding::sha256_hex;

/// Environment variable holding the bearer token.
pub const TOKEN_ENV: &str = "MAIN_FORGE_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, backoff_base_ms: 1000 }
    }
}

impl RetryPolicy {
    /// Wait before retry number `retry` (0-based): base, 2·base, 4·base, ...
    pub fn delay(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << retry.min(20)))
    }
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub timeout_secs: f64,
    pub retry: RetryPolicy,
    /// Caps the server's advertised concurrency.
    pub max_concurrency: Option<usize>,
    #[serde(skip)]
    pub auth_token: Option<String>,
}

impl fmt::Debug for RemoteConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteConfig")
            .field("base_url", &self.base_url)
            .field("timeout_secs", &self.timeout_secs)
            .field("retry", &self.retry)
            .field("max_concurrency", &self.max_concurrency)
            .field("auth_token", &self.auth_token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self { base_url: String::new(), timeout_secs: 120.0, retry: RetryPolicy::default(), max_concurrency: None, auth_token: None }
    }
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self { base_url: base_url.into(), ..Default::default() }
    }

    /// Pick up the bearer token from the environment when set.
    pub fn with_env_token(mut self) -> Self {
        self.auth_token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(format!("base_url {:?} must be an http(s) URL", self.base_url));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(format!("timeout_secs must be positive, got {}", self.timeout_secs));
        }
        if self.max_concurrency == Some(0) {
            return Err("max_concurrency must be positive".into());
        }
        Ok(())
    }
}

/// Request and response bodies of the `/v1` protocol.
pub mod wire {
    use serde::{Deserialize, Serialize};

    use crate::modelcore::ModelError;

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct CapabilitiesResponse {
        #[serde(default)]
        pub supports_fit: bool,
        #[serde(default)]
        pub supports_score: bool,
        #[serde(default)]
        pub supports_generate: bool,
        #[serde(default = "one")]
        pub max_concurrency: usize,
        #[serde(default)]
        pub model_id: String,
    }

    fn one() -> usize {
        1
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct Example {
        pub source: String,
        pub target: String,
        pub weight: f64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct FitRequest {
        pub examples: Vec<Example>,
        pub epochs: usize,
        pub lr: f64,
        pub idempotency_key: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct FitResponse {
        pub model_version: String,
    }

    /// `temperature` 0 asks for greedy decoding.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct GenerateRequest {
        pub source: String,
        pub temperature: f64,
        pub top_p: f64,
        pub max_new_tokens: usize,
        pub seed: u64,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct GenerateResponse {
        /// Server-side token ids; informational.
        #[serde(default)]
        pub tokens: Vec<u32>,
        pub text: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ScoreRequest {
        pub source: String,
        pub target: String,
    }

    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ScoreResponse {
        pub nll_per_token: Vec<f64>,
        pub mean: f64,
        pub sum: f64,
    }

    /// Body of every non-2xx response.
    #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
    pub struct ErrorBody {
        pub error: ModelError,
        pub message: String,
    }

    impl ErrorBody {
        pub fn new(error: ModelError) -> Self {
            let message = error.to_string();
            Self { error, message }
        }
    }
}

enum Method {
    Get,
    Post,
}

/// Blocking HTTP client with retries.
pub struct RemoteClient {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteClient").field("cfg", &self.cfg).finish()
    }
}

fn retryable(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

impl RemoteClient {
    pub fn new(cfg: RemoteConfig) -> Result<Self, ModelError> {
        cfg.validate().map_err(|message| ModelError::Remote { endpoint: cfg.base_url.clone(), message })?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.cfg.base_url.trim_end_matches('/'))
    }

    fn send(&self, method: &Method, url: &str, body: Option<&[u8]>) -> Result<(u16, String), ureq::Error> {
        let auth = self.cfg.auth_token.as_ref().map(|t| format!("Bearer {t}"));
        let mut response = match method {
            Method::Get => {
                let mut req = self.agent.get(url);
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.call()?
            }
            Method::Post => {
                let mut req = self.agent.post(url).header("Content-Type", "application/json");
                if let Some(a) = &auth {
                    req = req.header("Authorization", a);
                }
                req.send(body.unwrap_or_default())?
            }
        };
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string()?;
        Ok((status, text))
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&Req>) -> Result<Resp, ModelError> {
        let url = self.url(path);
        let payload = body.map(|b| serde_json::to_vec(b).expect("request bodies serialize"));
        let protocol = |message: String| ModelError::Protocol { endpoint: url.clone(), message };
        let mut last = String::new();
        for attempt in 0..=self.cfg.retry.max_retries {
            if attempt > 0 {
                let wait = self.cfg.retry.delay(attempt - 1);
                log::warn!("{url}: {last}; retry {attempt} in {wait:?}");
                std::thread::sleep(wait);
            }
            match self.send(&method, &url, payload.as_deref()) {
                Err(e) => last = e.to_string(),
                Ok((status, text)) if (200..300).contains(&status) => {
                    return serde_json::from_str(&text).map_err(|e| protocol(format!("malformed response body: {e}")));
                }
                Ok((status, text)) if retryable(status) => last = format!("HTTP {status}: {}", text.trim()),
                Ok((status, text)) => {
                    return Err(match serde_json::from_str::<wire::ErrorBody>(&text) {
                        Ok(body) => body.error,
                        Err(_) => ModelError::Remote { endpoint: url.clone(), message: format!("HTTP {status}: {}", text.trim()) },
                    });
                }
            }
        }
        let attempts = self.cfg.retry.max_retries + 1;
        Err(ModelError::Remote { endpoint: url, message: format!("giving up after {attempts} attempts: {last}") })
    }

    pub fn capabilities(&self) -> Result<wire::CapabilitiesResponse, ModelError> {
        self.call::<(), _>(Method::Get, "/v1/capabilities", None)
    }

    pub fn fit(&self, req: &wire::FitRequest) -> Result<wire::FitResponse, ModelError> {
        self.call(Method::Post, "/v1/fit", Some(req))
    }

    pub fn generate(&self, req: &wire::GenerateRequest) -> Result<wire::GenerateResponse, ModelError> {
        self.call(Method::Post, "/v1/generate", Some(req))
    }

    pub fn score(&self, req: &wire::ScoreRequest) -> Result<wire::ScoreResponse, ModelError> {
        self.call(Method::Post, "/v1/score", Some(req))
    }
}

/// Ask a server what it supports.
pub fn handshake(cfg: &RemoteConfig) -> Result<wire::CapabilitiesResponse, ModelError> {
    RemoteClient::new(cfg.clone())?.capabilities()
}

/// A server-side model behind the in-process contract.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    client: Arc<RemoteClient>,
    tokenizer: Tokenizer,
    capabilities: Capabilities,
    model_id: String,
    model_version: Option<String>,
}

impl RemoteBackend {
    /// Handshake and wrap. `tokenizer` maps between engine token ids and the
    /// text sent over the wire.
    pub fn connect(cfg: RemoteConfig, tokenizer: Tokenizer) -> Result<Self, ModelError> {
        let client = RemoteClient::new(cfg)?;
        let caps = client.capabilities()?;
        let cap = client.config().max_concurrency.unwrap_or(usize::MAX);
        let capabilities = Capabilities {
            supports_fit: caps.supports_fit,
            supports_score: caps.supports_score,
            supports_generate: caps.supports_generate,
            max_concurrency: caps.max_concurrency.min(cap).max(1),
        };
        Ok(Self { client: Arc::new(client), tokenizer, capabilities, model_id: caps.model_id, model_version: None })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Version returned by the last fit through this handle.
    pub fn model_version(&self) -> Option<&str> {
        self.model_version.as_deref()
    }

    pub fn base_url(&self) -> &str {
        &self.client.config().base_url
    }

    fn text(&self, ids: &[TokenId]) -> String {
        self.tokenizer.decode(ids)
    }

    /// Tokenize generated text, dropping words outside the vocabulary.
    fn ids(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        let mut skipped = 0usize;
        for word in text.split_whitespace() {
            match self.tokenizer.encode(word) {
                Ok(ids) => out.extend(ids),
                Err(_) => skipped += 1,
            }
        }
        if skipped > 0 {
            log::warn!("{}: dropped {skipped} out-of-vocabulary words from a generation", self.base_url());
        }
        out
    }

    /// Deterministic key for a fit request so a retried fit is applied once.
    pub fn idempotency_key(previous_version: Option<&str>, examples: &[wire::Example], epochs: usize, lr: f64) -> String {
        let body = serde_json::to_vec(&(previous_version, examples, epochs, lr)).expect("serializable");
        sha256_hex(&body)
    }
}

impl Backend for RemoteBackend {
    fn backend_id(&self) -> String {
        format!("remote({}, {})", self.base_url(), self.model_id)
    }

    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn fit_weighted(&self, examples: &[WeightedExample], options: &FitOptions) -> Result<Arc<dyn Backend>, ModelError> {
        let examples: Vec<wire::Example> = examples
            .iter()
            .map(|e| wire::Example { source: self.text(&e.source), target: self.text(&e.target), weight: e.weight })
            .collect();
        let idempotency_key = Self::idempotency_key(self.model_version(), &examples, options.epochs, options.learning_rate);
        let req = wire::FitRequest { examples, epochs: options.epochs, lr: options.learning_rate, idempotency_key };
        let resp = self.client.fit(&req)?;
        Ok(Arc::new(Self { model_version: Some(resp.model_version), ..self.clone() }))
    }

    fn generate(&self, source: &[TokenId], params: &DecodeParams) -> Result<Vec<TokenId>, ModelError> {
        let req = wire::GenerateRequest {
            source: self.text(source),
            temperature: if params.greedy { 0.0 } else { params.temperature },
            top_p: params.top_p,
            max_new_tokens: params.max_new_tokens,
            seed: params.stream,
        };
        let resp = self.client.generate(&req)?;
        let mut ids = self.ids(&resp.text);
        ids.truncate(params.max_new_tokens);
        Ok(ids)
    }

    fn score_nll(&self, source: &[TokenId], target: &[TokenId]) -> Result<NllScore, ModelError> {
        let req = wire::ScoreRequest { source: self.text(source), target: self.text(target) };
        let resp = self.client.score(&req)?;
        let endpoint = self.client.url("/v1/score");
        if resp.nll_per_token.is_empty() {
            return Err(ModelError::Protocol { endpoint, message: "score has no per-token values".into() });
        }
        if resp.nll_per_token.iter().any(|x| x.is_nan() || *x < 0.0) {
            return Err(ModelError::Protocol { endpoint, message: "per-token NLLs must be non-negative".into() });
        }
        Ok(NllScore { per_token: resp.nll_per_token, mean: resp.mean, sum: resp.sum })
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// A judge reached through a server's generate verb.
#[derive(Debug)]
pub struct RemoteJudge {
    client: RemoteClient,
    decode: DecodeParams,
    max_concurrency: usize,
}

impl RemoteJudge {
    pub fn connect(cfg: RemoteConfig, decode: DecodeParams) -> Result<Self, ModelError> {
        let client = RemoteClient::new(cfg)?;
        let caps = client.capabilities()?;
        if !caps.supports_generate {
            return Err(ModelError::Unsupported { backend: client.config().base_url.clone(), verb: "generate".into() });
        }
        let max_concurrency = caps.max_concurrency.min(client.config().max_concurrency.unwrap_or(usize::MAX)).max(1);
        Ok(Self { client, decode, max_concurrency })
    }
}

impl Judge for RemoteJudge {
    fn judge(&self, request: &JudgeRequest<'_>) -> Result<String, ModelError> {
        let req = wire::GenerateRequest {
            source: request.prompt.to_owned(),
            temperature: if self.decode.greedy { 0.0 } else { self.decode.temperature },
            top_p: self.decode.top_p,
            max_new_tokens: self.decode.max_new_tokens,
            seed: request.stream,
        };
        Ok(self.client.generate(&req)?.text)
    }

    fn max_concurrency(&self) -> usize {
        self.max_concurrency
    }
}
