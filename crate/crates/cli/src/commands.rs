//! The pipeline stages behind each subcommand and the artifacts they leave
//! in the output directory.
//!
//! Artifacts are written as `<name>.partial` and renamed once complete, so a
//! failed stage leaves its partial output clearly marked.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, bail};
use mainforge_core::align::{AlignContext, AlignmentOutcome, SeedTokens, run_alignment, write_history};
use mainforge_core::augment::{CandidatesHeader, DropCounts, clean_candidates, generate_instructions, open_candidates, write_candidates};
use mainforge_core::corpus::{
    InstructionResponsePair, ManifestInfo, UnlabeledResponse, export, load_manifest, load_seed, load_unlabeled,
};
use mainforge_core::curate::curate_dataset;
use mainforge_core::evalkit::{AlignmentReport, AlignmentTask, align_with_report, render_table, sweep_alpha, sweep_iterations};
use mainforge_core::modelcore::{ModelHandle, ReferenceModel, TextCodec, Tokenizer};
use mainforge_core::remote::RemoteBackend;
use serde::{Deserialize, Serialize};

use crate::config::{BackendConfig, ConfigError, LoadedConfig};

pub const ALIGNMENT_FILE: &str = "alignment.json";
pub const ALIGNMENT_REPORT_FILE: &str = "alignment_report.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REPORT_DIR: &str = "report";

const ALIGNMENT_FORMAT: &str = "mainforge/alignment-v1";

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Stage(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Stage(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Stage(e)
    }
}

/// Where a final model lives after alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ModelArtifact {
    Reference { model: ReferenceModel },
    Remote { base_url: String, model_id: String, model_version: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentArtifact {
    pub format: String,
    pub config_digest: String,
    pub engine_version: String,
    pub iterations: usize,
    pub alphas: Vec<f64>,
    pub forward: ModelArtifact,
    pub reverse: ModelArtifact,
}

/// Loaded corpora plus the codec induced from them.
pub struct Session {
    pub loaded: LoadedConfig,
    pub codec: TextCodec,
    pub seed: Vec<InstructionResponsePair>,
    pub heldout: Option<Vec<InstructionResponsePair>>,
    pub unlabeled: Vec<UnlabeledResponse>,
}

impl Session {
    pub fn open(loaded: LoadedConfig) -> anyhow::Result<Self> {
        let paths = &loaded.config.paths;
        let seed = load_seed(&paths.seed)?;
        let heldout = paths.heldout.as_ref().map(load_seed).transpose()?;
        let unlabeled = load_unlabeled(&paths.unlabeled)?.records;
        let texts = seed
            .iter()
            .chain(heldout.iter().flatten())
            .flat_map(|p| [p.instruction.as_str(), p.response.as_str()])
            .chain(unlabeled.iter().map(|u| u.response.as_str()));
        let tokenizer = Tokenizer::induce(loaded.config.tokenizer, texts);
        let codec = TextCodec::new(tokenizer, loaded.config.templates.clone())?;
        fs::create_dir_all(&paths.output).with_context(|| format!("creating {}", paths.output.display()))?;
        Ok(Self { loaded, codec, seed, heldout, unlabeled })
    }

    fn digest(&self) -> &str {
        &self.loaded.digest
    }

    fn out(&self, name: &str) -> PathBuf {
        self.loaded.config.paths.output.join(name)
    }

    fn base(&self, role: &str, backend: &BackendConfig) -> anyhow::Result<ModelHandle> {
        Ok(match backend {
            BackendConfig::Reference(rc) => ModelHandle::new(ReferenceModel::new(*rc, self.codec.tokenizer().word_count())),
            BackendConfig::Remote(rc) => ModelHandle::new(
                RemoteBackend::connect(rc.clone().with_env_token(), self.codec.tokenizer().clone())
                    .with_context(|| format!("connecting the {role} backend"))?,
            ),
        })
    }

    fn bases(&self) -> anyhow::Result<(ModelHandle, ModelHandle)> {
        Ok((self.base("forward", &self.loaded.config.forward)?, self.base("reverse", &self.loaded.config.reverse)?))
    }

    fn restore(&self, role: &str, artifact: &ModelArtifact) -> anyhow::Result<ModelHandle> {
        match (artifact, role) {
            (ModelArtifact::Reference { model }, _) => Ok(ModelHandle::new(model.clone())),
            (ModelArtifact::Remote { .. }, "forward") => self.base(role, &self.loaded.config.forward),
            (ModelArtifact::Remote { .. }, _) => self.base(role, &self.loaded.config.reverse),
        }
    }

    fn check_digest(&self, path: &Path, digest: &str) -> anyhow::Result<()> {
        if digest != self.digest() {
            bail!(
                "{} was produced by config {}, but the current config digest is {}; rerun the earlier stages",
                path.display(),
                short(digest),
                short(self.digest())
            );
        }
        Ok(())
    }

    fn alignment(&self) -> anyhow::Result<AlignmentArtifact> {
        let path = self.out(ALIGNMENT_FILE);
        if !path.is_file() {
            bail!("missing alignment artifact {}; run `align` first", path.display());
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let artifact: AlignmentArtifact = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if artifact.format != ALIGNMENT_FORMAT {
            bail!("{}: unknown format {:?}", path.display(), artifact.format);
        }
        self.check_digest(&path, &artifact.config_digest)?;
        Ok(artifact)
    }
}

fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

/// Run `write` against `<path>.partial`, then move it into place.
fn publish(path: &Path, write: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    write(&partial).with_context(|| format!("writing {} (partial output left at {})", path.display(), partial.display()))?;
    fs::rename(&partial, path).with_context(|| format!("moving {} into place", partial.display()))?;
    Ok(())
}

fn model_artifact(handle: &ModelHandle) -> anyhow::Result<ModelArtifact> {
    if let Some(m) = handle.downcast::<ReferenceModel>() {
        return Ok(ModelArtifact::Reference { model: m.clone() });
    }
    if let Some(r) = handle.downcast::<RemoteBackend>() {
        return Ok(ModelArtifact::Remote {
            base_url: r.base_url().to_owned(),
            model_id: r.model_id().to_owned(),
            model_version: r.model_version().map(str::to_owned),
        });
    }
    bail!("backend {} cannot be recorded in an artifact", handle.backend_id())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    publish(path, |p| Ok(fs::write(p, serde_json::to_string_pretty(value)? + "\n")?))
}

pub fn cmd_align(s: &Session) -> anyhow::Result<AlignmentOutcome> {
    let cfg = &s.loaded.config;
    let seed = SeedTokens::encode(&s.codec, &s.seed)?;
    let (base_forward, base_reverse) = s.bases()?;
    let outcome = match &s.heldout {
        Some(heldout) => {
            let heldout = SeedTokens::encode(&s.codec, heldout)?;
            let task = AlignmentTask {
                seed: &seed,
                heldout: &heldout,
                base_forward: &base_forward,
                base_reverse: &base_reverse,
                codec: &s.codec,
                global_seed: cfg.global_seed,
                probe: cfg.report.probe,
            };
            let (outcome, report) = align_with_report(task, &cfg.alignment)?;
            write_json(&s.out(ALIGNMENT_REPORT_FILE), &report)?;
            outcome
        }
        None => {
            let ctx = AlignContext { codec: &s.codec, global_seed: cfg.global_seed };
            run_alignment(&seed, base_forward, base_reverse, &cfg.alignment, ctx)?
        }
    };
    publish(&s.out(HISTORY_FILE), |p| Ok(write_history(p, s.digest(), &outcome.history)?))?;
    let artifact = AlignmentArtifact {
        format: ALIGNMENT_FORMAT.into(),
        config_digest: s.digest().to_owned(),
        engine_version: mainforge_core::ENGINE_VERSION.into(),
        iterations: cfg.alignment.iterations,
        alphas: outcome.history.iter().filter_map(|r| r.alpha).collect(),
        forward: model_artifact(&outcome.forward)?,
        reverse: model_artifact(&outcome.reverse)?,
    };
    write_json(&s.out(ALIGNMENT_FILE), &artifact)?;
    log::info!("aligned {} iterations, {} steps", cfg.alignment.iterations, outcome.history.len());
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSummary {
    pub input: usize,
    pub kept: usize,
    pub dropped: DropCounts,
}

pub fn cmd_augment(s: &Session) -> anyhow::Result<AugmentSummary> {
    let artifact = s.alignment()?;
    let reverse = s.restore("reverse", &artifact.reverse)?;
    let cfg = &s.loaded.config;
    let generated = generate_instructions(&reverse, &s.unlabeled, &cfg.decode, &s.codec, cfg.global_seed)?;
    let cleaned = clean_candidates(generated.candidates, s.codec.tokenizer());
    let mut dropped = generated.dropped;
    dropped.merge(&cleaned.dropped);
    let header = CandidatesHeader::new(s.digest(), s.unlabeled.len(), dropped);
    publish(&s.out(CANDIDATES_FILE), |p| Ok(write_candidates(p, &header, &cleaned.candidates)?))?;
    log::info!("kept {} of {} candidates", cleaned.candidates.len(), s.unlabeled.len());
    Ok(AugmentSummary { input: s.unlabeled.len(), kept: cleaned.candidates.len(), dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurateSummary {
    pub seen: usize,
    pub failed: usize,
    pub selected: usize,
    pub seed: usize,
}

pub fn cmd_curate(s: &Session) -> anyhow::Result<CurateSummary> {
    let path = s.out(CANDIDATES_FILE);
    if !path.is_file() {
        bail!("missing candidates artifact {}; run `augment` first", path.display());
    }
    let (header, reader) = open_candidates(&path)?;
    s.check_digest(&path, &header.config_digest)?;
    let artifact = s.alignment()?;
    let forward = s.restore("forward", &artifact.forward)?;
    let cfg = &s.loaded.config;
    let info = ManifestInfo {
        rng_seed: cfg.global_seed,
        config_digest: s.digest().to_owned(),
        trainer_hints: cfg.trainer_hints.clone(),
        score_summary: None,
    };
    let outcome = curate_dataset(&forward, reader, &s.seed, &s.codec, &cfg.curation, info)?;
    publish(&s.out(MANIFEST_FILE), |p| Ok(export(&outcome.manifest, p)?))?;
    log::info!("selected {} candidates plus {} seed pairs", outcome.manifest.selected_count, outcome.manifest.seed_count);
    Ok(CurateSummary {
        seen: outcome.seen,
        failed: outcome.failed,
        selected: outcome.manifest.selected_count,
        seed: outcome.manifest.seed_count,
    })
}

pub fn cmd_run(s: &Session) -> anyhow::Result<CurateSummary> {
    cmd_align(s)?;
    cmd_augment(s)?;
    cmd_curate(s)
}

/// Iteration and weighting sweeps on the held-out pairs.
pub fn cmd_report(s: &Session) -> anyhow::Result<PathBuf> {
    let Some(heldout) = &s.heldout else { bail!("report needs paths.heldout") };
    let cfg = &s.loaded.config;
    let seed = SeedTokens::encode(&s.codec, &s.seed)?;
    let heldout = SeedTokens::encode(&s.codec, heldout)?;
    let (base_forward, base_reverse) = s.bases()?;
    let task = AlignmentTask {
        seed: &seed,
        heldout: &heldout,
        base_forward: &base_forward,
        base_reverse: &base_reverse,
        codec: &s.codec,
        global_seed: cfg.global_seed,
        probe: cfg.report.probe,
    };
    let iterations = sweep_iterations(task, &cfg.alignment, &cfg.report.iterations)?;
    let alpha = sweep_alpha(task, &cfg.alignment, &cfg.report.alpha_modes)?;
    let dir = s.out(REPORT_DIR);
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("iterations.json"), &iterations)?;
    write_json(&dir.join("alpha.json"), &alpha)?;

    let mut summary = format!("# Alignment report\n\nconfig digest `{}`, global seed {}\n\n", s.digest(), cfg.global_seed);
    summary += "Metric: mean held-out round-trip NLL per token (lower is better).\n\n";
    summary += &render_table(&iterations);
    summary += "\n";
    summary += &render_table(&alpha);
    let manifest_path = s.out(MANIFEST_FILE);
    if manifest_path.is_file() {
        let manifest = load_manifest(&manifest_path)?;
        if manifest.config_digest == s.digest()
            && let Some(sc) = manifest.score_summary {
                summary += &format!(
                    "\n### selected scores\n\n{} selected: min {:.4}, median {:.4}, max {:.4}\n",
                    sc.count, sc.min, sc.median, sc.max
                );
            }
    }
    if let Ok(text) = fs::read_to_string(s.out(ALIGNMENT_REPORT_FILE))
        && let Ok(report) = serde_json::from_str::<AlignmentReport>(&text) {
            summary += "\n### last alignment run\n\n| k | forward NLL | reverse NLL |\n|---|---|---|\n";
            for m in &report.per_iteration {
                summary += &format!("| {} | {:.4} | {:.4} |\n", m.k, m.roundtrip.forward, m.roundtrip.reverse);
            }
        }
    let path = dir.join("summary.md");
    publish(&path, |p| Ok(fs::write(p, summary)?))?;
    Ok(path)
}
