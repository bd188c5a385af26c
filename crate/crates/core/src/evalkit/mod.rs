//! Alignment measurements, ablation sweeps and the pairwise judge harness.

pub mod fixture;
pub mod judge;

use serde::{Deserialize, Serialize};

use crate::align::{
    AlignContext, AlignError, AlignmentConfig, AlignmentOutcome, AlignmentState, AlphaMode, SeedTokens, StepRecord,
    run_alignment_observed,
};
use crate::corpus::ScoreSummary;
use crate::fanout::Fanout;
use crate::modelcore::{DecodeParams, ModelError, ModelHandle, TextCodec};
use crate::seeding::derive_stream;

pub use fixture::{DESK_ADD_K, DESK_GLOBAL_SEED, DeskFixture, FixtureSpec};

/// Mean teacher-forced NLL of recovering each side after a trip through the
/// other model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    /// NLL of R given the reverse model's Î.
    pub forward: f64,
    /// NLL of I given the forward model's R̂.
    pub reverse: f64,
}

impl RoundTrip {
    pub fn mean(&self) -> f64 {
        (self.forward + self.reverse) / 2.0
    }
}

/// Decoding for the round trip and the seed its streams derive from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    pub decode: DecodeParams,
    pub seed: u64,
}

pub fn roundtrip_metric(
    forward: &ModelHandle,
    reverse: &ModelHandle,
    pairs: &SeedTokens,
    codec: &TextCodec,
    probe: &ProbeSettings,
) -> Result<RoundTrip, ModelError> {
    if pairs.is_empty() {
        return Err(ModelError::EmptyEvaluation);
    }
    let indices: Vec<usize> = (0..pairs.len()).collect();
    let fanout = Fanout::new(forward.max_concurrency().min(reverse.max_concurrency()));
    let trips = fanout.try_map(&indices, |&j| {
        let id = &pairs.ids[j];
        let (i, r) = (&pairs.instructions[j], &pairs.responses[j]);
        let stream = |dir| probe.decode.with_stream(derive_stream(probe.seed, &["roundtrip", dir, id]));
        let i_hat = reverse.generate(&codec.wrap_response(r), &stream("forward"))?;
        let r_hat = forward.generate(&codec.wrap_instruction(i), &stream("reverse"))?;
        let f = forward.score_nll(&codec.wrap_instruction(&i_hat), r)?.mean;
        let b = reverse.score_nll(&codec.wrap_response(&r_hat), i)?.mean;
        Ok::<_, ModelError>((f, b))
    })?;
    let mut fwd: Vec<f64> = trips.iter().map(|t| t.0).collect();
    let mut rev: Vec<f64> = trips.iter().map(|t| t.1).collect();
    let mean = |xs: &mut Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    Ok(RoundTrip { forward: mean(&mut fwd), reverse: mean(&mut rev) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetric {
    /// Completed iterations; 0 is the warm-start (or base) pair.
    pub k: usize,
    pub roundtrip: RoundTrip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub global_seed: u64,
    pub alpha_mode: String,
    pub iterations: usize,
    pub engine_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub run: RunInfo,
    pub per_iteration: Vec<IterationMetric>,
    pub alphas: Vec<f64>,
    pub history: Vec<StepRecord>,
    #[serde(default)]
    pub selected_scores: Option<ScoreSummary>,
}

/// Everything an alignment run needs besides its config.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentTask<'a> {
    pub seed: &'a SeedTokens,
    pub heldout: &'a SeedTokens,
    pub base_forward: &'a ModelHandle,
    pub base_reverse: &'a ModelHandle,
    pub codec: &'a TextCodec,
    pub global_seed: u64,
    pub probe: ProbeSettings,
}

/// Run alignment and measure the held-out round trip after the warm start
/// and after every iteration.
pub fn align_with_report(task: AlignmentTask<'_>, cfg: &AlignmentConfig) -> Result<(AlignmentOutcome, AlignmentReport), AlignError> {
    let mut per_iteration = Vec::new();
    let mut observe = |s: &AlignmentState| -> Result<(), AlignError> {
        let roundtrip = roundtrip_metric(&s.forward, &s.reverse, task.heldout, task.codec, &task.probe)?;
        per_iteration.push(IterationMetric { k: s.k, roundtrip });
        Ok(())
    };
    let ctx = AlignContext { codec: task.codec, global_seed: task.global_seed };
    let outcome = run_alignment_observed(task.seed, task.base_forward.clone(), task.base_reverse.clone(), cfg, ctx, &mut observe)?;
    let report = AlignmentReport {
        run: RunInfo {
            global_seed: task.global_seed,
            alpha_mode: cfg.alpha_mode.label(),
            iterations: cfg.iterations,
            engine_version: crate::ENGINE_VERSION.into(),
        },
        per_iteration,
        alphas: outcome.history.iter().filter_map(|r| r.alpha).collect(),
        history: outcome.history.clone(),
        selected_scores: None,
    };
    Ok((outcome, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub iterations: usize,
    pub alpha_mode: AlphaMode,
    pub roundtrip: RoundTrip,
    pub alphas: Vec<f64>,
}

impl SweepRow {
    pub fn metric(&self) -> f64 {
        self.roundtrip.mean()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub title: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Row with the lowest metric; earlier rows win ties.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().reduce(|best, r| if r.metric() < best.metric() { r } else { best })
    }

    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// One row per requested iteration count. Stream derivation depends only on
/// the iteration index, so a run of N iterations is a prefix of any longer
/// run; a single run to the largest N is measured along the way.
pub fn sweep_iterations(task: AlignmentTask<'_>, cfg: &AlignmentConfig, counts: &[usize]) -> Result<SweepTable, AlignError> {
    let longest = counts.iter().copied().max().unwrap_or(0);
    let (_, report) = align_with_report(task, &AlignmentConfig { iterations: longest, ..cfg.clone() })?;
    let rows = counts
        .iter()
        .map(|&n| {
            let alphas = report.history.iter().filter(|r| !r.warm_start && r.k < n).filter_map(|r| r.alpha).collect();
            SweepRow {
                label: format!("N={n}"),
                iterations: n,
                alpha_mode: cfg.alpha_mode,
                roundtrip: report.per_iteration[n].roundtrip,
                alphas,
            }
        })
        .collect();
    Ok(SweepTable { title: "iteration count".into(), rows })
}

/// The weighting modes compared in the alpha ablation.
pub fn alpha_modes() -> Vec<AlphaMode> {
    let mut modes: Vec<AlphaMode> = [0.3, 0.5, 0.7, 0.8, 1.0].into_iter().map(AlphaMode::Fixed).collect();
    modes.push(AlphaMode::Dynamic);
    modes
}

/// One full run per mode at `cfg.iterations`.
pub fn sweep_alpha(task: AlignmentTask<'_>, cfg: &AlignmentConfig, modes: &[AlphaMode]) -> Result<SweepTable, AlignError> {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let (_, report) = align_with_report(task, &AlignmentConfig { alpha_mode: mode, ..cfg.clone() })?;
        let last = report.per_iteration.last().expect("at least the starting point is measured");
        rows.push(SweepRow {
            label: mode.label(),
            iterations: cfg.iterations,
            alpha_mode: mode,
            roundtrip: last.roundtrip,
            alphas: report.alphas,
        });
    }
    Ok(SweepTable { title: "alpha weighting".into(), rows })
}

/// Markdown summary of a sweep.
pub fn render_table(table: &SweepTable) -> String {
    let best = table.best().map(|r| r.label.clone());
    let mut out = format!("### {}\n\n| setting | forward NLL | reverse NLL | mean | alpha range |\n|---|---|---|---|---|\n", table.title);
    for r in &table.rows {
        let range = match (r.alphas.iter().copied().reduce(f64::min), r.alphas.iter().copied().reduce(f64::max)) {
            (Some(lo), Some(hi)) => format!("{lo:.3}..{hi:.3}"),
            _ => "-".into(),
        };
        let mark = if Some(&r.label) == best.as_ref() { " (best)" } else { "" };
        out += &format!(
            "| {}{mark} | {:.4} | {:.4} | {:.4} | {range} |\n",
            r.label, r.roundtrip.forward, r.roundtrip.reverse, r.metric()
        );
    }
    out
}
