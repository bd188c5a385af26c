//! Back-translation of unlabeled responses into candidate instructions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusError, JsonlReader, JsonlWriter, Meta, UnlabeledResponse};
use crate::fanout::Fanout;
use crate::modelcore::{DecodeParams, ModelError, ModelHandle, TextCodec, Tokenizer};
use crate::seeding::derive_stream;

pub const CANDIDATES_FORMAT: &str = "mainforge/candidates-v1";

/// An unlabeled response paired with the instruction the reverse model
/// inferred for it. `score` is filled in by curation; lower is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub id: String,
    pub response: String,
    pub pseudo_instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// RNG stream the pseudo-instruction was decoded with.
    pub stream: u64,
    #[serde(default)]
    pub meta: Meta,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    /// Generation produced nothing but whitespace.
    pub empty: usize,
    /// Instruction repeats the response verbatim.
    pub echo: usize,
    /// Instruction longer than the tokenizer's sequence limit.
    pub length: usize,
    pub untokenizable: usize,
}

impl DropCounts {
    pub fn total(&self) -> usize {
        self.empty + self.echo + self.length + self.untokenizable
    }

    pub fn merge(&mut self, other: &DropCounts) {
        self.empty += other.empty;
        self.echo += other.echo;
        self.length += other.length;
        self.untokenizable += other.untokenizable;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutput {
    pub candidates: Vec<CandidatePair>,
    pub dropped: DropCounts,
}

/// Generate one pseudo-instruction per response with the reverse model.
/// Output order equals input order; empty generations are dropped and counted.
pub fn generate_instructions(
    reverse: &ModelHandle,
    unlabeled: &[UnlabeledResponse],
    params: &DecodeParams,
    codec: &TextCodec,
    global_seed: u64,
) -> Result<AugmentOutput, ModelError> {
    let fanout = Fanout::new(reverse.max_concurrency());
    let generated = fanout.try_map(unlabeled, |u| {
        let stream = derive_stream(global_seed, &["augment", &u.id]);
        let source = codec.wrap_response(&codec.encode(&u.response)?);
        let ids = reverse.generate(&source, &params.with_stream(stream))?;
        Ok::<_, ModelError>((stream, codec.decode(&ids)))
    })?;
    let mut dropped = DropCounts::default();
    let mut candidates = Vec::with_capacity(unlabeled.len());
    for (u, (stream, text)) in unlabeled.iter().zip(generated) {
        if text.trim().is_empty() {
            dropped.empty += 1;
            continue;
        }
        candidates.push(CandidatePair {
            id: u.id.clone(),
            response: u.response.clone(),
            pseudo_instruction: text,
            score: None,
            stream,
            meta: Meta::new(),
        });
    }
    Ok(AugmentOutput { candidates, dropped })
}

/// Trim pseudo-instructions and drop echoes and over-long instructions.
pub fn clean_candidates(candidates: Vec<CandidatePair>, tokenizer: &Tokenizer) -> AugmentOutput {
    let limit = tokenizer.spec().max_sequence_length;
    let mut dropped = DropCounts::default();
    let mut kept = Vec::with_capacity(candidates.len());
    for mut c in candidates {
        let trimmed = c.pseudo_instruction.trim();
        if trimmed.is_empty() {
            dropped.empty += 1;
            continue;
        }
        if trimmed == c.response.trim() {
            dropped.echo += 1;
            continue;
        }
        match tokenizer.token_len(trimmed) {
            Ok(n) if n > limit => {
                dropped.length += 1;
                continue;
            }
            Err(_) => {
                dropped.untokenizable += 1;
                continue;
            }
            Ok(_) => {}
        }
        if trimmed.len() != c.pseudo_instruction.len() {
            c.pseudo_instruction = trimmed.to_owned();
        }
        kept.push(c);
    }
    AugmentOutput { candidates: kept, dropped }
}

/// Header line of a candidates artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatesHeader {
    pub format: String,
    pub config_digest: String,
    pub engine_version: String,
    pub input_count: usize,
    pub dropped: DropCounts,
}

impl CandidatesHeader {
    pub fn new(config_digest: impl Into<String>, input_count: usize, dropped: DropCounts) -> Self {
        Self {
            format: CANDIDATES_FORMAT.into(),
            config_digest: config_digest.into(),
            engine_version: crate::ENGINE_VERSION.into(),
            input_count,
            dropped,
        }
    }
}

pub fn write_candidates(path: &Path, header: &CandidatesHeader, candidates: &[CandidatePair]) -> Result<(), CorpusError> {
    let mut w = JsonlWriter::create(path, header)?;
    for c in candidates {
        w.push(c)?;
    }
    w.finish()
}

/// Open a candidates artifact for streaming.
pub fn open_candidates(path: &Path) -> Result<(CandidatesHeader, JsonlReader<CandidatePair>), CorpusError> {
    let (header, reader) = JsonlReader::<CandidatePair>::open::<CandidatesHeader>(path)?;
    if header.format != CANDIDATES_FORMAT {
        return Err(CorpusError::Inconsistent { path: path.into(), message: format!("unknown format {:?}", header.format) });
    }
    Ok((header, reader))
}
