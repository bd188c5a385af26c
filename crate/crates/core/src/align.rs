//! Mutual alignment: alternate weighted refits of the forward and reverse
//! models on seed pairs mixed with pairs synthesized by the other direction.
//!
//! One iteration `k` is
//!
//! 1. forward step: the reverse model back-translates every seed response
//!    into a synthetic instruction; the forward model is refit on those
//!    synthetic pairs with weight `alpha` plus the seed pairs with `1 - alpha`;
//! 2. reverse step: the freshly updated forward model generates a synthetic
//!    response for every seed instruction and the reverse model is refit the
//!    same way with the roles swapped.
//!
//! With dynamic weighting `alpha` is the synthetic share of the two component
//! losses, measured under the model about to be refit and clamped to
//! `[eps, 1 - eps]`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, InstructionResponsePair, JsonlWriter};
use crate::fanout::Fanout;
use crate::modelcore::{DecodeParams, FitOptions, ModelError, ModelHandle, TextCodec, TokenId, WeightedExample};
use crate::seeding::derive_stream;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("loss must be finite and non-negative, got {0}")]
    InvalidLoss(f64),
    #[error("invalid alignment config: {0}")]
    InvalidConfig(String),
    #[error("seed data is empty")]
    EmptySeed,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    Dynamic,
    Fixed(f64),
}

impl AlphaMode {
    pub fn label(&self) -> String {
        match self {
            AlphaMode::Dynamic => "dynamic".into(),
            AlphaMode::Fixed(a) => format!("fixed({a})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignmentConfig {
    pub iterations: usize,
    pub epochs_per_update: usize,
    pub alpha_mode: AlphaMode,
    pub alpha_clamp: f64,
    pub warm_start: bool,
    pub decode: DecodeParams,
    /// Passed to neural backends; the closed-form reference fit ignores it.
    pub learning_rate: f64,
    pub lr_schedule: String,
    pub batch_size: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            epochs_per_update: 1,
            alpha_mode: AlphaMode::Dynamic,
            alpha_clamp: 0.01,
            warm_start: true,
            decode: DecodeParams::default(),
            learning_rate: 1e-5,
            lr_schedule: "linear".into(),
            batch_size: 32,
        }
    }
}

impl AlignmentConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        let bad = |m: String| Err(AlignError::InvalidConfig(m));
        if !(self.alpha_clamp > 0.0 && self.alpha_clamp < 0.5) {
            return bad(format!("alpha_clamp {} must be in (0, 0.5)", self.alpha_clamp));
        }
        if let AlphaMode::Fixed(a) = self.alpha_mode
            && !(0.0..=1.0).contains(&a) {
                return bad(format!("fixed alpha {a} must be in [0, 1]"));
            }
        if self.epochs_per_update == 0 {
            return bad("epochs_per_update must be positive".into());
        }
        self.decode.validate().map_err(|e| AlignError::InvalidConfig(e.to_string()))
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions { epochs: self.epochs_per_update, learning_rate: self.learning_rate }
    }
}

/// Synthetic share of the total loss, clamped to `[eps, 1 - eps]`; 0.5 when
/// both losses vanish.
pub fn compute_alpha(loss_synthetic: f64, loss_seed: f64, eps: f64) -> Result<f64, AlignError> {
    for l in [loss_synthetic, loss_seed] {
        if !l.is_finite() || l < 0.0 {
            return Err(AlignError::InvalidLoss(l));
        }
    }
    let total = loss_synthetic + loss_seed;
    let alpha = if total == 0.0 { 0.5 } else { loss_synthetic / total };
    Ok(alpha.clamp(eps, 1.0 - eps))
}

/// The weighted objective `alpha * L_synthetic + (1 - alpha) * L_seed`.
pub fn combined_loss(alpha: f64, loss_synthetic: f64, loss_seed: f64) -> f64 {
    alpha * loss_synthetic + (1.0 - alpha) * loss_seed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub kind: StepKind,
    /// Iteration index; warm-start records use 0.
    pub k: usize,
    pub warm_start: bool,
    pub alpha: Option<f64>,
    pub loss_synthetic: Option<f64>,
    pub loss_seed: f64,
    pub combined_loss: f64,
    /// Synthetic generations that came back empty (kept at weight 0).
    pub generation_failures: usize,
}

#[derive(Debug, Clone)]
pub struct AlignmentState {
    /// Number of completed iterations.
    pub k: usize,
    pub forward: ModelHandle,
    pub reverse: ModelHandle,
    pub history: Vec<StepRecord>,
}

impl AlignmentState {
    pub fn new(forward: ModelHandle, reverse: ModelHandle) -> Self {
        Self { k: 0, forward, reverse, history: Vec::new() }
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.history.iter().filter_map(|r| r.alpha).collect()
    }
}

/// Seed pairs encoded once for both directions.
#[derive(Debug, Clone)]
pub struct SeedTokens {
    pub ids: Vec<String>,
    pub instructions: Vec<Vec<TokenId>>,
    pub responses: Vec<Vec<TokenId>>,
}

impl SeedTokens {
    pub fn encode(codec: &TextCodec, seed: &[InstructionResponsePair]) -> Result<Self, ModelError> {
        let mut out = Self { ids: Vec::new(), instructions: Vec::new(), responses: Vec::new() };
        for p in seed {
            out.ids.push(p.id.clone());
            out.instructions.push(codec.encode(&p.instruction)?);
            out.responses.push(codec.encode(&p.response)?);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// (wrapped instruction, response) pairs for the forward model.
    pub fn forward_pairs(&self, codec: &TextCodec) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
        self.instructions.iter().zip(&self.responses).map(|(i, r)| (codec.wrap_instruction(i), r.clone())).collect()
    }

    /// (wrapped response, instruction) pairs for the reverse model.
    pub fn reverse_pairs(&self, codec: &TextCodec) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
        self.responses.iter().zip(&self.instructions).map(|(r, i)| (codec.wrap_response(r), i.clone())).collect()
    }
}

/// Shared inputs of every step.
#[derive(Debug, Clone, Copy)]
pub struct AlignContext<'a> {
    pub codec: &'a TextCodec,
    pub global_seed: u64,
}

fn weighted(pairs: &[(Vec<TokenId>, Vec<TokenId>)], weight: f64) -> impl Iterator<Item = WeightedExample> + '_ {
    pairs.iter().map(move |(s, t)| WeightedExample::new(s.clone(), t.clone(), weight))
}

/// Fit both directions on the seed pairs alone (weight 1). Returns the
/// untouched bases when warm start is disabled.
pub fn warm_start(
    forward: ModelHandle,
    reverse: ModelHandle,
    seed: &SeedTokens,
    cfg: &AlignmentConfig,
    ctx: AlignContext<'_>,
) -> Result<AlignmentState, AlignError> {
    let mut state = AlignmentState::new(forward, reverse);
    if !cfg.warm_start {
        return Ok(state);
    }
    if seed.is_empty() {
        return Err(AlignError::EmptySeed);
    }
    let opts = cfg.fit_options();
    for kind in [StepKind::Forward, StepKind::Reverse] {
        let (model, pairs) = match kind {
            StepKind::Forward => (&state.forward, seed.forward_pairs(ctx.codec)),
            StepKind::Reverse => (&state.reverse, seed.reverse_pairs(ctx.codec)),
        };
        let loss_seed = model.eval_loss(&pairs)?;
        let examples: Vec<_> = weighted(&pairs, 1.0).collect();
        let fitted = model.fit_weighted(&examples, &opts)?;
        match kind {
            StepKind::Forward => state.forward = fitted,
            StepKind::Reverse => state.reverse = fitted,
        }
        state.history.push(StepRecord {
            kind,
            k: 0,
            warm_start: true,
            alpha: None,
            loss_synthetic: None,
            loss_seed,
            combined_loss: loss_seed,
            generation_failures: 0,
        });
    }
    Ok(state)
}

/// One forward half-iteration. On error the input state is untouched.
pub fn forward_step(
    state: &AlignmentState,
    seed: &SeedTokens,
    cfg: &AlignmentConfig,
    ctx: AlignContext<'_>,
) -> Result<AlignmentState, AlignError> {
    let (model, record) = half_step(state, seed, cfg, ctx, StepKind::Forward)?;
    let mut next = state.clone();
    next.forward = model;
    next.history.push(record);
    Ok(next)
}

/// One reverse half-iteration using the current (already updated) forward
/// model. Completes iteration `k`.
pub fn reverse_step(
    state: &AlignmentState,
    seed: &SeedTokens,
    cfg: &AlignmentConfig,
    ctx: AlignContext<'_>,
) -> Result<AlignmentState, AlignError> {
    let (model, record) = half_step(state, seed, cfg, ctx, StepKind::Reverse)?;
    let mut next = state.clone();
    next.reverse = model;
    next.history.push(record);
    next.k += 1;
    Ok(next)
}

type Wrap<'a> = dyn Fn(&[TokenId]) -> Vec<TokenId> + Sync + 'a;

fn half_step(
    state: &AlignmentState,
    seed: &SeedTokens,
    cfg: &AlignmentConfig,
    ctx: AlignContext<'_>,
    kind: StepKind,
) -> Result<(ModelHandle, StepRecord), AlignError> {
    if seed.is_empty() {
        return Err(AlignError::EmptySeed);
    }
    let codec = ctx.codec;
    let wrap_i = |b: &[TokenId]| codec.wrap_instruction(b);
    let wrap_r = |b: &[TokenId]| codec.wrap_response(b);
    // (model refit, generator, seed bodies of the refit model's source,
    //  its targets, source wrapper, generator wrapper, stream tag)
    let (model, generator, sources, targets, wrap_source, wrap_prompt, tag): (
        _,
        _,
        _,
        _,
        &Wrap,
        &Wrap,
        _,
    ) = match kind {
        StepKind::Forward => {
            (&state.forward, &state.reverse, &seed.instructions, &seed.responses, &wrap_i, &wrap_r, "forward")
        }
        StepKind::Reverse => {
            (&state.reverse, &state.forward, &seed.responses, &seed.instructions, &wrap_r, &wrap_i, "reverse")
        }
    };

    let k = state.k.to_string();
    let indices: Vec<usize> = (0..seed.len()).collect();
    let generated = Fanout::new(generator.max_concurrency()).try_map(&indices, |&j| {
        let stream = derive_stream(ctx.global_seed, &["align", &k, tag, &seed.ids[j]]);
        generator.generate(&wrap_prompt(&targets[j]), &cfg.decode.with_stream(stream))
    })?;

    let seed_pairs: Vec<_> = sources.iter().zip(targets).map(|(s, t)| (wrap_source(s), t.clone())).collect();
    let mut synthetic = Vec::new();
    let mut failed = Vec::new();
    for (j, body) in generated.iter().enumerate() {
        if body.is_empty() {
            failed.push(seed_pairs[j].clone());
        } else {
            synthetic.push((wrap_source(body), targets[j].clone()));
        }
    }

    let loss_seed = model.eval_loss(&seed_pairs)?;
    let loss_synthetic = if synthetic.is_empty() { None } else { Some(model.eval_loss(&synthetic)?) };
    // every generation failed: nothing to mix in, the seed carries the fit
    let alpha = match (cfg.alpha_mode, loss_synthetic) {
        (_, None) => None,
        (AlphaMode::Fixed(a), Some(_)) => Some(a),
        (AlphaMode::Dynamic, Some(ls)) => Some(compute_alpha(ls, loss_seed, cfg.alpha_clamp)?),
    };
    let a = alpha.unwrap_or(0.0);

    let mut examples: Vec<WeightedExample> = weighted(&synthetic, a).collect();
    examples.extend(weighted(&failed, 0.0));
    examples.extend(weighted(&seed_pairs, 1.0 - a));
    let fitted = model.fit_weighted(&examples, &cfg.fit_options())?;
    let record = StepRecord {
        kind,
        k: state.k,
        warm_start: false,
        alpha,
        loss_synthetic,
        loss_seed,
        combined_loss: combined_loss(a, loss_synthetic.unwrap_or(0.0), loss_seed),
        generation_failures: failed.len(),
    };
    Ok((fitted, record))
}

/// Final models and the full step history.
#[derive(Debug, Clone)]
pub struct AlignmentOutcome {
    pub reverse: ModelHandle,
    pub forward: ModelHandle,
    pub history: Vec<StepRecord>,
}

/// Warm start (if enabled) followed by `cfg.iterations` forward/reverse
/// iterations. `observe` sees the state after the warm start and after every
/// completed iteration.
pub fn run_alignment_observed(
    seed: &SeedTokens,
    base_forward: ModelHandle,
    base_reverse: ModelHandle,
    cfg: &AlignmentConfig,
    ctx: AlignContext<'_>,
    observe: &mut dyn FnMut(&AlignmentState) -> Result<(), AlignError>,
) -> Result<AlignmentOutcome, AlignError> {
    cfg.validate()?;
    if seed.is_empty() {
        return Err(AlignError::EmptySeed);
    }
    let mut state = warm_start(base_forward, base_reverse, seed, cfg, ctx)?;
    observe(&state)?;
    for _ in 0..cfg.iterations {
        state = forward_step(&state, seed, cfg, ctx)?;
        state = reverse_step(&state, seed, cfg, ctx)?;
        log::debug!("alignment iteration {} done", state.k);
        observe(&state)?;
    }
    Ok(AlignmentOutcome { reverse: state.reverse, forward: state.forward, history: state.history })
}

pub fn run_alignment(
    seed: &SeedTokens,
    base_forward: ModelHandle,
    base_reverse: ModelHandle,
    cfg: &AlignmentConfig,
    ctx: AlignContext<'_>,
) -> Result<AlignmentOutcome, AlignError> {
    run_alignment_observed(seed, base_forward, base_reverse, cfg, ctx, &mut |_| Ok(()))
}

/// One record per step, for downstream reports.
pub fn write_history(path: &Path, config_digest: &str, history: &[StepRecord]) -> Result<(), CorpusError> {
    #[derive(Serialize)]
    struct Header<'a> {
        format: &'a str,
        config_digest: &'a str,
        engine_version: &'a str,
        steps: usize,
    }
    let header =
        Header { format: "mainforge/history-v1", config_digest, engine_version: crate::ENGINE_VERSION, steps: history.len() };
    let mut w = JsonlWriter::create(path, &header)?;
    for r in history {
        w.push(r)?;
    }
    w.finish()
}
