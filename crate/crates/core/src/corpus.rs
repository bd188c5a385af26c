//! Line-delimited JSON ingestion and export of seed pairs, unlabeled
//! responses and curated dataset manifests.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::augment::CandidatePair;

pub const MANIFEST_FORMAT: &str = "mainforge/manifest-v1";
/// Meta key under which a synthetic pair carries its mutual-filter score.
pub const SCORE_KEY: &str = "mutual_score";

pub type Meta = BTreeMap<String, Value>;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}:{line}: malformed record: {message}", path.display())]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{}:{line}: {message}", path.display())]
    Invalid { path: PathBuf, line: usize, message: String },
    #[error("{}: duplicate id {id:?}", path.display())]
    DuplicateId { path: PathBuf, id: String },
    #[error("{}: no records", path.display())]
    Empty { path: PathBuf },
    #[error("{}: no usable responses", path.display())]
    NoUsableResponses { path: PathBuf },
    #[error("id {0:?} appears in both the selected candidates and the seed data")]
    IdCollision(String),
    #[error("candidate {0:?} has no mutual-filter score")]
    Unscored(String),
    #[error("{}: inconsistent artifact: {message}", path.display())]
    Inconsistent { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Seed,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionResponsePair {
    pub id: String,
    pub instruction: String,
    pub response: String,
    pub origin: Origin,
    #[serde(default)]
    pub meta: Meta,
}

impl InstructionResponsePair {
    pub fn seed(id: impl Into<String>, instruction: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            instruction: instruction.into(),
            response: response.into(),
            origin: Origin::Seed,
            meta: Meta::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledResponse {
    pub id: String,
    pub response: String,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl ScoreSummary {
    /// `None` for an empty slice. Reorders `scores`.
    pub fn from_scores(scores: &mut [f64]) -> Option<Self> {
        if scores.is_empty() {
            return None;
        }
        scores.sort_by(f64::total_cmp);
        let n = scores.len();
        let median = if n % 2 == 1 { scores[n / 2] } else { (scores[n / 2 - 1] + scores[n / 2]) / 2.0 };
        Some(Self { count: n, min: scores[0], median, max: scores[n - 1] })
    }
}

/// Fine-tuning settings for whoever trains on the curated dataset. This
/// engine does not fine-tune; the values travel in the manifest header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerHints {
    pub epochs: usize,
    pub batch_size_per_device: usize,
    pub max_sequence_length: usize,
    pub learning_rate: f64,
    pub optimizer: String,
    pub adam_epsilon: f64,
    pub adam_betas: [f64; 2],
    pub lr_scheduler: String,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub dropout: f64,
}

impl Default for TrainerHints {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size_per_device: 64,
            max_sequence_length: 1024,
            learning_rate: 2e-5,
            optimizer: "adam".into(),
            adam_epsilon: 1e-8,
            adam_betas: [0.9, 0.999],
            lr_scheduler: "warmup-linear".into(),
            weight_decay: 0.1,
            warmup_steps: 100,
            dropout: 0.1,
        }
    }
}

/// Run-level metadata stamped into a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestInfo {
    pub rng_seed: u64,
    pub config_digest: String,
    pub trainer_hints: TrainerHints,
    pub score_summary: Option<ScoreSummary>,
}

/// The curated dataset: selected synthetic pairs in score order, then seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub pairs: Vec<InstructionResponsePair>,
    pub seed_count: usize,
    pub selected_count: usize,
    pub rng_seed: u64,
    pub engine_version: String,
    pub config_digest: String,
    pub score_summary: Option<ScoreSummary>,
    pub trainer_hints: TrainerHints,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    seed_count: usize,
    selected_count: usize,
    rng_seed: u64,
    engine_version: String,
    config_digest: String,
    score_summary: Option<ScoreSummary>,
    trainer_hints: TrainerHints,
}

#[derive(Deserialize)]
struct SeedRecord {
    id: Option<String>,
    instruction: String,
    response: String,
    #[serde(default)]
    meta: Meta,
}

#[derive(Deserialize)]
struct UnlabeledRecord {
    id: Option<String>,
    response: String,
    source: Option<String>,
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn open_lines(path: &Path) -> Result<Lines<BufReader<File>>, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(BufReader::new(file).lines())
}

fn parse_line<T: for<'de> Deserialize<'de>>(path: &Path, line: usize, text: &str) -> Result<T, CorpusError> {
    serde_json::from_str(text).map_err(|e| CorpusError::Malformed { path: path.to_path_buf(), line, message: e.to_string() })
}

/// Load seed pairs. Blank lines are skipped; line numbers are 1-based.
pub fn load_seed(path: impl AsRef<Path>) -> Result<Vec<InstructionResponsePair>, CorpusError> {
    let path = path.as_ref();
    let stem = file_stem(path);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in open_lines(path)?.enumerate() {
        let line_no = i + 1;
        let text = line.map_err(io_err(path))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: SeedRecord = parse_line(path, line_no, &text)?;
        for (field, value) in [("instruction", &rec.instruction), ("response", &rec.response)] {
            if value.trim().is_empty() {
                return Err(CorpusError::Invalid { path: path.into(), line: line_no, message: format!("empty {field}") });
            }
        }
        let id = rec.id.unwrap_or_else(|| format!("{stem}:{line_no}"));
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { path: path.into(), id });
        }
        out.push(InstructionResponsePair {
            id,
            instruction: rec.instruction,
            response: rec.response,
            origin: Origin::Seed,
            meta: rec.meta,
        });
    }
    if out.is_empty() {
        return Err(CorpusError::Empty { path: path.into() });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamStats {
    pub records: usize,
    pub dropped_empty: usize,
    /// Largest number of records held at once.
    pub peak_batch: usize,
}

/// Batched reader over an unlabeled-response file. At most `batch_size`
/// records are resident per batch regardless of file length.
pub struct UnlabeledStream {
    path: PathBuf,
    stem: String,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    batch_size: usize,
    seen: HashSet<String>,
    stats: StreamStats,
    done: bool,
}

impl UnlabeledStream {
    pub fn open(path: impl AsRef<Path>, batch_size: usize) -> Result<Self, CorpusError> {
        let path = path.as_ref().to_path_buf();
        Ok(Self {
            stem: file_stem(&path),
            lines: open_lines(&path)?,
            path,
            line_no: 0,
            batch_size: batch_size.max(1),
            seen: HashSet::new(),
            stats: StreamStats::default(),
            done: false,
        })
    }

    pub fn stats(&self) -> StreamStats {
        self.stats
    }

    fn next_batch(&mut self) -> Result<Vec<UnlabeledResponse>, CorpusError> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            let Some(line) = self.lines.next() else {
                self.done = true;
                break;
            };
            self.line_no += 1;
            let text = line.map_err(io_err(&self.path))?;
            if text.trim().is_empty() {
                continue;
            }
            let rec: UnlabeledRecord = parse_line(&self.path, self.line_no, &text)?;
            if rec.response.trim().is_empty() {
                self.stats.dropped_empty += 1;
                log::warn!("{}:{}: dropping empty response", self.path.display(), self.line_no);
                continue;
            }
            let id = rec.id.unwrap_or_else(|| format!("{}:{}", self.stem, self.line_no));
            if !self.seen.insert(id.clone()) {
                return Err(CorpusError::DuplicateId { path: self.path.clone(), id });
            }
            batch.push(UnlabeledResponse { id, response: rec.response, source: rec.source.unwrap_or_else(|| self.stem.clone()) });
        }
        self.stats.records += batch.len();
        self.stats.peak_batch = self.stats.peak_batch.max(batch.len());
        Ok(batch)
    }
}

impl Iterator for UnlabeledStream {
    type Item = Result<Vec<UnlabeledResponse>, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_batch() {
            Ok(batch) if batch.is_empty() => None,
            Ok(batch) => Some(Ok(batch)),
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    pub records: Vec<UnlabeledResponse>,
    pub dropped_empty: usize,
}

/// Load every usable unlabeled response into memory.
pub fn load_unlabeled(path: impl AsRef<Path>) -> Result<UnlabeledSet, CorpusError> {
    let mut stream = UnlabeledStream::open(path.as_ref(), 4096)?;
    let mut records = Vec::new();
    for batch in stream.by_ref() {
        records.extend(batch?);
    }
    if records.is_empty() {
        return Err(CorpusError::NoUsableResponses { path: path.as_ref().into() });
    }
    Ok(UnlabeledSet { records, dropped_empty: stream.stats().dropped_empty })
}

/// Selected synthetic pairs (in the given order) followed by the seed pairs.
pub fn assemble_final(
    selected: &[CandidatePair],
    seed: &[InstructionResponsePair],
    info: ManifestInfo,
) -> Result<DatasetManifest, CorpusError> {
    let seed_ids: HashSet<&str> = seed.iter().map(|p| p.id.as_str()).collect();
    let mut pairs = Vec::with_capacity(selected.len() + seed.len());
    for cand in selected {
        let score = cand.score.ok_or_else(|| CorpusError::Unscored(cand.id.clone()))?;
        if seed_ids.contains(cand.id.as_str()) {
            return Err(CorpusError::IdCollision(cand.id.clone()));
        }
        let mut meta = cand.meta.clone();
        meta.insert(SCORE_KEY.into(), Value::from(score));
        pairs.push(InstructionResponsePair {
            id: cand.id.clone(),
            instruction: cand.pseudo_instruction.clone(),
            response: cand.response.clone(),
            origin: Origin::Synthetic,
            meta,
        });
    }
    pairs.extend(seed.iter().cloned().map(|mut p| {
        p.origin = Origin::Seed;
        p
    }));
    let mut ids = HashSet::new();
    if let Some(dup) = pairs.iter().find(|p| !ids.insert(p.id.as_str())) {
        return Err(CorpusError::IdCollision(dup.id.clone()));
    }
    Ok(DatasetManifest {
        pairs,
        seed_count: seed.len(),
        selected_count: selected.len(),
        rng_seed: info.rng_seed,
        engine_version: crate::ENGINE_VERSION.into(),
        config_digest: info.config_digest,
        score_summary: info.score_summary,
        trainer_hints: info.trainer_hints,
    })
}

/// Incremental writer: one header line, then records as they arrive.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
    count: usize,
}

impl JsonlWriter {
    pub fn create<H: Serialize>(path: &Path, header: &H) -> Result<Self, CorpusError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = Self { path: path.to_path_buf(), out: BufWriter::new(file), count: 0 };
        w.line(header)?;
        Ok(w)
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<(), CorpusError> {
        let res = serde_json::to_writer(&mut self.out, value)
            .map_err(io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        res.map_err(io_err(&self.path))
    }

    pub fn push<T: Serialize>(&mut self, record: &T) -> Result<(), CorpusError> {
        self.count += 1;
        self.line(record)
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(mut self) -> Result<(), CorpusError> {
        self.out.flush().map_err(io_err(&self.path))?;
        self.out.get_ref().sync_all().map_err(io_err(&self.path))
    }
}

/// Write a header line followed by any records, one JSON object per line.
pub fn write_jsonl<H: Serialize, R: Serialize>(path: &Path, header: &H, records: &[R]) -> Result<(), CorpusError> {
    let mut w = JsonlWriter::create(path, header)?;
    for r in records {
        w.push(r)?;
    }
    w.finish()
}

/// Streaming reader over the records that follow a header line.
pub struct JsonlReader<R> {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    _record: std::marker::PhantomData<R>,
}

impl<R: for<'de> Deserialize<'de>> JsonlReader<R> {
    pub fn open<H: for<'de> Deserialize<'de>>(path: &Path) -> Result<(H, Self), CorpusError> {
        let mut reader = Self { path: path.to_path_buf(), lines: open_lines(path)?, line_no: 0, _record: Default::default() };
        let Some(first) = reader.next_text() else {
            return Err(CorpusError::Empty { path: path.into() });
        };
        let header = parse_line(path, reader.line_no, &first?)?;
        Ok((header, reader))
    }

    fn next_text(&mut self) -> Option<Result<String, CorpusError>> {
        loop {
            let line = self.lines.next()?;
            self.line_no += 1;
            match line {
                Ok(t) if t.trim().is_empty() => continue,
                Ok(t) => return Some(Ok(t)),
                Err(e) => return Some(Err(io_err(&self.path)(e))),
            }
        }
    }
}

impl<R: for<'de> Deserialize<'de>> Iterator for JsonlReader<R> {
    type Item = Result<R, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        let text = self.next_text()?;
        Some(text.and_then(|t| parse_line(&self.path, self.line_no, &t)))
    }
}

/// Read a header line followed by records.
pub fn read_jsonl<H, R>(path: &Path) -> Result<(H, Vec<R>), CorpusError>
where
    H: for<'de> Deserialize<'de>,
    R: for<'de> Deserialize<'de>,
{
    let (header, reader) = JsonlReader::<R>::open::<H>(path)?;
    let records = reader.collect::<Result<Vec<_>, _>>()?;
    Ok((header, records))
}

/// Export a manifest: header record, then one pair per line. Output is a pure
/// function of the manifest.
pub fn export(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let header = ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        seed_count: manifest.seed_count,
        selected_count: manifest.selected_count,
        rng_seed: manifest.rng_seed,
        engine_version: manifest.engine_version.clone(),
        config_digest: manifest.config_digest.clone(),
        score_summary: manifest.score_summary,
        trainer_hints: manifest.trainer_hints.clone(),
    };
    write_jsonl(path.as_ref(), &header, &manifest.pairs)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, CorpusError> {
    let path = path.as_ref();
    let (header, pairs): (ManifestHeader, Vec<InstructionResponsePair>) = read_jsonl(path)?;
    let bad = |message: String| CorpusError::Inconsistent { path: path.into(), message };
    if header.format != MANIFEST_FORMAT {
        return Err(bad(format!("unknown format {:?}", header.format)));
    }
    if pairs.len() != header.seed_count + header.selected_count {
        return Err(bad(format!(
            "{} records but header declares {} selected + {} seed",
            pairs.len(),
            header.selected_count,
            header.seed_count
        )));
    }
    let mut ids = HashSet::new();
    for (i, p) in pairs.iter().enumerate() {
        if !ids.insert(p.id.as_str()) {
            return Err(CorpusError::DuplicateId { path: path.into(), id: p.id.clone() });
        }
        let synthetic = i < header.selected_count;
        if synthetic != (p.origin == Origin::Synthetic) {
            return Err(bad(format!("record {:?} is out of place for origin {:?}", p.id, p.origin)));
        }
        if synthetic && !p.meta.get(SCORE_KEY).is_some_and(Value::is_number) {
            return Err(bad(format!("synthetic record {:?} lacks {SCORE_KEY}", p.id)));
        }
    }
    Ok(DatasetManifest {
        pairs,
        seed_count: header.seed_count,
        selected_count: header.selected_count,
        rng_seed: header.rng_seed,
        engine_version: header.engine_version,
        config_digest: header.config_digest,
        score_summary: header.score_summary,
        trainer_hints: header.trainer_hints,
    })
}
