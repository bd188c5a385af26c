//! Pipeline configuration: one TOML file, leaf overrides from the command
//! line, validation with field-level diagnostics, and the config digest.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mainforge_core::align::{AlignmentConfig, AlphaMode};
use mainforge_core::corpus::TrainerHints;
use mainforge_core::curate::CurationConfig;
use mainforge_core::evalkit::{ProbeSettings, alpha_modes};
use mainforge_core::modelcore::codec::{INSTRUCTION_MARKER, RESPONSE_MARKER};
use mainforge_core::modelcore::{DecodeParams, PromptTemplates, ReferenceConfig, TokenizerSpec};
use mainforge_core::remote::RemoteConfig;
use mainforge_core::seeding::sha256_hex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub seed: PathBuf,
    pub unlabeled: PathBuf,
    /// Held-out seed pairs for round-trip measurements.
    pub heldout: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { seed: "seed.jsonl".into(), unlabeled: "unlabeled.jsonl".into(), heldout: None, output: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Reference(ReferenceConfig),
    Remote(RemoteConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Reference(ReferenceConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportConfig {
    pub iterations: Vec<usize>,
    pub alpha_modes: Vec<AlphaMode>,
    pub probe: ProbeSettings,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self { iterations: vec![0, 1, 2, 3, 4, 5, 10, 20], alpha_modes: alpha_modes(), probe: ProbeSettings::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub global_seed: u64,
    pub paths: Paths,
    pub tokenizer: TokenizerSpec,
    pub templates: PromptTemplates,
    pub forward: BackendConfig,
    pub reverse: BackendConfig,
    pub alignment: AlignmentConfig,
    pub curation: CurationConfig,
    /// Decoding for back-translation of the unlabeled responses.
    pub decode: DecodeParams,
    pub report: ReportConfig,
    pub trainer_hints: TrainerHints,
}

/// Field-level problems; any of them makes the config unusable.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config:")?;
        for e in &self.0 {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn one(message: impl Into<String>) -> Self {
        Self(vec![message.into()])
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `dotted.key=value` pairs; values parse as TOML, else as strings.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub digest: String,
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| format!("--set {assignment:?}: expected KEY=VALUE"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("--set {assignment:?}: malformed key"));
    }
    let (leaf, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        let slot = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = slot.as_table_mut().ok_or_else(|| format!("--set {key}: {p} is not a table"))?;
    }
    table.insert(leaf.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

fn file_digest(path: &Path) -> Result<String, String> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| format!("{}: {e}", path.display()))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let mut need = |field: &str, p: &Path| {
            if !p.is_file() {
                errors.push(format!("paths.{field}: {} does not exist", p.display()));
            }
        };
        need("seed", &self.paths.seed);
        need("unlabeled", &self.paths.unlabeled);
        if let Some(h) = &self.paths.heldout {
            need("heldout", h);
        }
        if self.tokenizer.max_sequence_length == 0 {
            errors.push("tokenizer.max_sequence_length: must be positive".into());
        }
        for (field, template, marker) in
            [("templates.forward", &self.templates.forward, INSTRUCTION_MARKER), ("templates.reverse", &self.templates.reverse, RESPONSE_MARKER)]
        {
            if template.matches(marker).count() != 1 {
                errors.push(format!("{field}: must contain {marker} exactly once"));
            }
        }
        for (role, backend) in [("forward", &self.forward), ("reverse", &self.reverse)] {
            match backend {
                BackendConfig::Reference(r) => {
                    if r.order == 0 {
                        errors.push(format!("{role}.order: must be positive"));
                    }
                    if !(r.add_k.is_finite() && r.add_k > 0.0) {
                        errors.push(format!("{role}.add_k: must be positive, got {}", r.add_k));
                    }
                }
                BackendConfig::Remote(r) => {
                    if let Err(e) = r.validate() {
                        errors.push(format!("{role}: {e}"));
                    }
                }
            }
        }
        if let (BackendConfig::Remote(f), BackendConfig::Remote(r)) = (&self.forward, &self.reverse)
            && f.base_url.trim_end_matches('/') == r.base_url.trim_end_matches('/') {
                errors.push("reverse.base_url: a server holds one model, so each role needs its own".into());
            }
        if let Err(e) = self.alignment.validate() {
            errors.push(format!("alignment: {e}"));
        }
        if self.curation.top_k == 0 {
            errors.push("curation.top_k: must be positive".into());
        }
        if self.curation.batch_size == 0 {
            errors.push("curation.batch_size: must be positive".into());
        }
        if let Err(e) = self.curation.decode.validate() {
            errors.push(format!("curation.decode: {e}"));
        }
        if let Err(e) = self.decode.validate() {
            errors.push(format!("decode: {e}"));
        }
        if let Err(e) = self.report.probe.decode.validate() {
            errors.push(format!("report.probe.decode: {e}"));
        }
        if self.report.iterations.is_empty() {
            errors.push("report.iterations: must list at least one count".into());
        }
        if errors.is_empty() { Ok(()) } else { Err(ConfigError(errors)) }
    }

    /// Digest of the canonical JSON form. Input files enter by content hash
    /// and the output directory is left out, so the same data and settings
    /// give the same digest wherever they live.
    pub fn digest(&self) -> Result<String, ConfigError> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let hash = |p: &Path| file_digest(p).map_err(ConfigError::one);
        value["paths"] = serde_json::json!({
            "seed": hash(&self.paths.seed)?,
            "unlabeled": hash(&self.paths.unlabeled)?,
            "heldout": self.paths.heldout.as_deref().map(hash).transpose()?,
        });
        Ok(sha256_hex(value.to_string().as_bytes()))
    }
}

/// Parse `text`, apply overrides, resolve relative paths against `base_dir`
/// (the config file's directory) and validate.
pub fn load_str(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<LoadedConfig, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::one(e.to_string().trim().to_owned()))?;
    let errors: Vec<String> = overrides.set.iter().filter_map(|s| apply_override(&mut table, s).err()).collect();
    if !errors.is_empty() {
        return Err(ConfigError(errors));
    }
    let mut unknown = Vec::new();
    let parsed: Result<PipelineConfig, _> =
        serde_ignored::deserialize(toml::Value::Table(table), |path| unknown.push(format!("{path}: unknown field")));
    let mut config = parsed.map_err(|e: toml::de::Error| ConfigError::one(e.to_string().trim().to_owned()))?;
    if !unknown.is_empty() {
        return Err(ConfigError(unknown));
    }
    if let Some(seed) = overrides.seed {
        config.global_seed = seed;
    }
    let paths = &mut config.paths;
    paths.seed = resolve(base_dir, &paths.seed);
    paths.unlabeled = resolve(base_dir, &paths.unlabeled);
    paths.heldout = paths.heldout.as_deref().map(|h| resolve(base_dir, h));
    paths.output = match &overrides.output {
        Some(o) => o.clone(),
        None => resolve(base_dir, &paths.output),
    };
    config.validate()?;
    let digest = config.digest()?;
    Ok(LoadedConfig { config, digest })
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<LoadedConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::one(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    load_str(&text, base, overrides)
}
