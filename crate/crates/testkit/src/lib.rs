//! Loopback `/v1` server wrapping the reference model, for tests that drive
//! the remote backend end to end.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use mainforge_core::modelcore::{Backend, DecodeParams, ModelError, ReferenceModel, TokenId, Tokenizer, WeightedExample};
use mainforge_core::remote::wire;
use serde_json::{Value, json};
use tiny_http::{Header, Method, Response, Server};

/// One request/response pair as seen by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub method: String,
    pub path: String,
    pub request: String,
    pub status: u16,
    pub response: String,
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Body served at `/v1/capabilities`, verbatim.
    pub capabilities: Value,
    /// Answer this many requests with `fail_status` before behaving.
    pub fail_first: usize,
    pub fail_status: u16,
    /// Sleep before answering every request.
    pub delay: Duration,
    /// Reject requests without this bearer token.
    pub require_token: Option<String>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            capabilities: json!({
                "supports_fit": true,
                "supports_score": true,
                "supports_generate": true,
                "max_concurrency": 4,
                "model_id": "reference-loopback",
            }),
            fail_first: 0,
            fail_status: 503,
            delay: Duration::ZERO,
            require_token: None,
        }
    }
}

struct State {
    model: ReferenceModel,
    version: usize,
    applied: HashMap<String, String>,
    fits_applied: usize,
    failures_left: usize,
    log: Vec<Exchange>,
}

pub struct LoopbackServer {
    url: String,
    server: Arc<Server>,
    state: Arc<Mutex<State>>,
    workers: Vec<JoinHandle<()>>,
}

impl LoopbackServer {
    pub fn start(model: ReferenceModel, tokenizer: Tokenizer, options: ServerOptions) -> Self {
        let server = Arc::new(Server::http("127.0.0.1:0").expect("bind loopback"));
        let url = format!("http://{}", server.server_addr().to_ip().expect("ip listener"));
        let state = Arc::new(Mutex::new(State {
            model,
            version: 0,
            applied: HashMap::new(),
            fits_applied: 0,
            failures_left: options.fail_first,
            log: Vec::new(),
        }));
        let workers = (0..4)
            .map(|_| {
                let (server, state, tokenizer, options) = (server.clone(), state.clone(), tokenizer.clone(), options.clone());
                std::thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handle(req, &state, &tokenizer, &options);
                    }
                })
            })
            .collect();
        Self { url, server, state, workers }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Fits that changed the model; replays of a known key do not count.
    pub fn fits_applied(&self) -> usize {
        self.state.lock().unwrap().fits_applied
    }

    pub fn requests(&self) -> usize {
        self.state.lock().unwrap().log.len()
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.state.lock().unwrap().log.clone()
    }

    pub fn model(&self) -> ReferenceModel {
        self.state.lock().unwrap().model.clone()
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn handle(mut req: tiny_http::Request, state: &Mutex<State>, tokenizer: &Tokenizer, options: &ServerOptions) {
    let mut body = String::new();
    let _ = req.as_reader().read_to_string(&mut body);
    let method = req.method().to_string();
    let path = req.url().to_owned();
    if !options.delay.is_zero() {
        std::thread::sleep(options.delay);
    }
    let authorized = match &options.require_token {
        None => true,
        Some(t) => req.headers().iter().any(|h| h.field.equiv("Authorization") && h.value.as_str() == format!("Bearer {t}")),
    };
    let (status, response) = {
        let mut st = state.lock().unwrap();
        if st.failures_left > 0 {
            st.failures_left -= 1;
            (options.fail_status, json!({"message": "injected failure"}).to_string())
        } else if !authorized {
            (401, json!({"message": "missing or wrong bearer token"}).to_string())
        } else {
            route(&mut st, req.method(), &path, &body, tokenizer, options)
        }
    };
    state.lock().unwrap().log.push(Exchange { method, path, request: body, status, response: response.clone() });
    let header = Header::from_bytes("Content-Type", "application/json").unwrap();
    let _ = req.respond(Response::from_string(response).with_status_code(status).with_header(header));
}

fn error(e: ModelError) -> (u16, String) {
    (422, serde_json::to_string(&wire::ErrorBody::new(e)).unwrap())
}

fn ok<T: serde::Serialize>(body: &T) -> (u16, String) {
    (200, serde_json::to_string(body).unwrap())
}

fn bad_request(message: String) -> (u16, String) {
    (400, json!({"message": message}).to_string())
}

fn ids(tokenizer: &Tokenizer, text: &str) -> Result<Vec<TokenId>, ModelError> {
    tokenizer.encode(text)
}

fn route(st: &mut State, method: &Method, path: &str, body: &str, tokenizer: &Tokenizer, options: &ServerOptions) -> (u16, String) {
    match (method, path) {
        (Method::Get, "/v1/capabilities") => (200, options.capabilities.to_string()),
        (Method::Post, "/v1/fit") => {
            let req: wire::FitRequest = match serde_json::from_str(body) {
                Ok(r) => r,
                Err(e) => return bad_request(e.to_string()),
            };
            if let Some(version) = st.applied.get(&req.idempotency_key) {
                return ok(&wire::FitResponse { model_version: version.clone() });
            }
            let examples: Result<Vec<WeightedExample>, ModelError> = req
                .examples
                .iter()
                .map(|e| Ok(WeightedExample::new(ids(tokenizer, &e.source)?, ids(tokenizer, &e.target)?, e.weight)))
                .collect();
            match examples.and_then(|ex| st.model.fitted(&ex)) {
                Ok(model) => {
                    st.model = model;
                    st.version += 1;
                    st.fits_applied += 1;
                    let version = format!("v{}", st.version);
                    st.applied.insert(req.idempotency_key, version.clone());
                    ok(&wire::FitResponse { model_version: version })
                }
                Err(e) => error(e),
            }
        }
        (Method::Post, "/v1/generate") => {
            let req: wire::GenerateRequest = match serde_json::from_str(body) {
                Ok(r) => r,
                Err(e) => return bad_request(e.to_string()),
            };
            let params = if req.temperature == 0.0 {
                DecodeParams::greedy(req.max_new_tokens)
            } else {
                DecodeParams { temperature: req.temperature, top_p: req.top_p, max_new_tokens: req.max_new_tokens, greedy: false, stream: 0 }
            }
            .with_stream(req.seed);
            let out = params.validate().and_then(|_| st.model.generate(&ids(tokenizer, &req.source)?, &params));
            match out {
                Ok(tokens) => ok(&wire::GenerateResponse { text: tokenizer.decode(&tokens), tokens }),
                Err(e) => error(e),
            }
        }
        (Method::Post, "/v1/score") => {
            let req: wire::ScoreRequest = match serde_json::from_str(body) {
                Ok(r) => r,
                Err(e) => return bad_request(e.to_string()),
            };
            let scored = ids(tokenizer, &req.target).and_then(|target| {
                if target.is_empty() {
                    return Err(ModelError::EmptyScoreTarget);
                }
                st.model.score_nll(&ids(tokenizer, &req.source)?, &target)
            });
            match scored {
                Ok(s) => ok(&wire::ScoreResponse { nll_per_token: s.per_token, mean: s.mean, sum: s.sum }),
                Err(e) => error(e),
            }
        }
        _ => (404, json!({"message": format!("no route for {method} {path}")}).to_string()),
    }
}
