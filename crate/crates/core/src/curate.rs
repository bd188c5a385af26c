//! Mutual-filter curation: score every candidate by how well the forward
//! model recovers its response from the pseudo-instruction, keep the K
//! lowest scores, and append the seed data.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::augment::CandidatePair;
use crate::corpus::{CorpusError, DatasetManifest, InstructionResponsePair, ManifestInfo, ScoreSummary, assemble_final};
use crate::fanout::Fanout;
use crate::modelcore::{DecodeParams, ModelError, ModelHandle, TextCodec};
use crate::seeding::derive_stream;

/// Meta key holding the forward model's own response in diagnostic mode.
pub const REGENERATED_KEY: &str = "regenerated_response";

#[derive(Debug, Error)]
pub enum CurateError {
    #[error("top_k must be at least 1")]
    ZeroTopK,
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    TeacherForcedNll,
    /// Also decode a response from the pseudo-instruction and keep it in
    /// meta. Ranking is unaffected.
    DiagnosticWithRegeneration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    PerTokenMean,
    SequenceSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub top_k: usize,
    pub score_mode: ScoreMode,
    pub normalization: Normalization,
    /// Candidates scored per parallel batch while streaming.
    pub batch_size: usize,
    /// Decoding for diagnostic regeneration.
    pub decode: DecodeParams,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            top_k: 16_800,
            score_mode: ScoreMode::default(),
            normalization: Normalization::default(),
            batch_size: 4096,
            decode: DecodeParams::default(),
        }
    }
}

/// Score one candidate; lower means better aligned.
pub fn mutual_score(
    forward: &ModelHandle,
    candidate: &CandidatePair,
    codec: &TextCodec,
    cfg: &CurationConfig,
) -> Result<CandidatePair, ModelError> {
    let source = codec.wrap_instruction(&codec.encode(&candidate.pseudo_instruction)?);
    let target = codec.encode(&candidate.response)?;
    let nll = forward.score_nll(&source, &target)?;
    let score = match cfg.normalization {
        Normalization::PerTokenMean => nll.mean,
        Normalization::SequenceSum => nll.sum,
    };
    if !score.is_finite() {
        return Err(ModelError::Backend(format!("non-finite score {score}")));
    }
    let mut out = candidate.clone();
    out.score = Some(score);
    if cfg.score_mode == ScoreMode::DiagnosticWithRegeneration {
        let stream = derive_stream(candidate.stream, &["curate", &candidate.id]);
        let regenerated = forward.generate(&source, &cfg.decode.with_stream(stream))?;
        out.meta.insert(REGENERATED_KEY.into(), Value::from(codec.decode(&regenerated)));
    }
    Ok(out)
}

struct Ranked<T> {
    score: f64,
    index: u64,
    item: T,
}

impl<T> Ranked<T> {
    fn key_cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then(self.index.cmp(&other.index))
    }
}

impl<T> PartialEq for Ranked<T> {
    fn eq(&self, other: &Self) -> bool {
        self.key_cmp(other) == Ordering::Equal
    }
}

impl<T> Eq for Ranked<T> {}

impl<T> PartialOrd for Ranked<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T> Ord for Ranked<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key_cmp(other)
    }
}

/// Keeps the `k` smallest `(score, index)` keys seen so far in a max-heap,
/// so memory stays at `k` items however many are pushed.
pub struct KBest<T> {
    k: usize,
    heap: BinaryHeap<Ranked<T>>,
}

impl<T> KBest<T> {
    pub fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k.min(1 << 20) + 1) }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn push(&mut self, score: f64, index: u64, item: T) {
        if self.k == 0 {
            return;
        }
        let entry = Ranked { score, index, item };
        if self.heap.len() < self.k {
            self.heap.push(entry);
        } else if let Some(mut worst) = self.heap.peek_mut()
            && entry < *worst {
                *worst = entry;
            }
    }

    /// Kept items in ascending `(score, index)` order.
    pub fn into_sorted(self) -> Vec<(f64, T)> {
        self.heap.into_sorted_vec().into_iter().map(|r| (r.score, r.item)).collect()
    }
}

/// Ascending by (score, input position); the first `min(k, n)` are returned.
pub fn rank_and_select(candidates: Vec<CandidatePair>, k: usize) -> Result<Vec<CandidatePair>, CorpusError> {
    let mut best = KBest::new(k);
    for (i, c) in candidates.into_iter().enumerate() {
        let score = c.score.ok_or_else(|| CorpusError::Unscored(c.id.clone()))?;
        best.push(score, i as u64, c);
    }
    Ok(best.into_sorted().into_iter().map(|(_, c)| c).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationOutcome {
    pub manifest: DatasetManifest,
    /// Candidates read from the input.
    pub seen: usize,
    pub scored: usize,
    /// Candidates whose scoring failed; excluded from ranking.
    pub failed: usize,
}

/// Score a stream of candidates batch by batch, keep the best `top_k`, and
/// assemble the final dataset with the seed pairs. The manifest's score
/// summary describes the selected scores.
pub fn curate_dataset<I>(
    forward: &ModelHandle,
    candidates: I,
    seed: &[InstructionResponsePair],
    codec: &TextCodec,
    cfg: &CurationConfig,
    info: ManifestInfo,
) -> Result<CurationOutcome, CurateError>
where
    I: IntoIterator<Item = Result<CandidatePair, CorpusError>>,
{
    if cfg.top_k == 0 {
        return Err(CurateError::ZeroTopK);
    }
    let fanout = Fanout::new(forward.max_concurrency());
    let batch_size = cfg.batch_size.max(1);
    let mut best = KBest::new(cfg.top_k);
    let (mut seen, mut scored, mut failed) = (0usize, 0usize, 0usize);
    let mut batch = Vec::with_capacity(batch_size);
    let mut input = candidates.into_iter().peekable();
    while input.peek().is_some() {
        batch.clear();
        while batch.len() < batch_size {
            match input.next() {
                Some(c) => batch.push(c?),
                None => break,
            }
        }
        let results = fanout.map(&batch, |c| mutual_score(forward, c, codec, cfg));
        for (offset, result) in results.into_iter().enumerate() {
            let index = (seen + offset) as u64;
            match result {
                Ok(c) => {
                    scored += 1;
                    best.push(c.score.expect("scored"), index, c);
                }
                Err(e) => {
                    failed += 1;
                    log::warn!("scoring candidate {:?} failed: {e}", batch[offset].id);
                }
            }
        }
        seen += batch.len();
    }
    if scored == 0 {
        log::warn!("no candidate could be scored; the dataset is seed only");
    }
    let selected: Vec<CandidatePair> = best.into_sorted().into_iter().map(|(_, c)| c).collect();
    let mut scores: Vec<f64> = selected.iter().filter_map(|c| c.score).collect();
    let info = ManifestInfo { score_summary: ScoreSummary::from_scores(&mut scores), ..info };
    let manifest = assemble_final(&selected, seed, info)?;
    Ok(CurationOutcome { manifest, seen, scored, failed })
}
