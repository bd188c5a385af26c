//! Desk-scale synthetic task: each topic owns a few instruction words and a
//! few response words, so a response determines its topic and the topic
//! determines most of the instruction.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::augment::CandidatePair;
use crate::corpus::{InstructionResponsePair, Meta, UnlabeledResponse};
use crate::seeding::{derive_stream, rng_for};

const INSTRUCTION_WORDS: [[&str; 2]; 8] = [
    ["sky", "weather"],
    ["sea", "ocean"],
    ["farm", "harvest"],
    ["city", "traffic"],
    ["forest", "woods"],
    ["desert", "sahara"],
    ["arctic", "polar"],
    ["moon", "lunar"],
];
const RESPONSE_WORDS: [[&str; 4]; 8] = [
    ["blue", "cloud", "wind", "bird"],
    ["wave", "salt", "fish", "tide"],
    ["cow", "hay", "barn", "corn"],
    ["road", "car", "tower", "crowd"],
    ["tree", "leaf", "moss", "owl"],
    ["dune", "heat", "camel", "dust"],
    ["snow", "cold", "frost", "seal"],
    ["crater", "night", "orbit", "dark"],
];

/// Smoothing for reference models on this fixture.
pub const DESK_ADD_K: f64 = 0.1;
/// Global seed the desk-scale expectations were measured with.
pub const DESK_GLOBAL_SEED: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureSpec {
    pub topics: usize,
    pub instruction_words: usize,
    pub response_words: usize,
    pub min_instruction_len: usize,
    pub max_instruction_len: usize,
    pub min_response_len: usize,
    pub max_response_len: usize,
    /// Chance that a response word is drawn from a random topic instead.
    pub noise: f64,
    pub seed_pairs: usize,
    pub heldout_pairs: usize,
    pub unlabeled: usize,
    pub fixture_seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            topics: 5,
            instruction_words: 2,
            response_words: 3,
            min_instruction_len: 1,
            max_instruction_len: 2,
            min_response_len: 3,
            max_response_len: 6,
            noise: 0.05,
            seed_pairs: 200,
            heldout_pairs: 1000,
            unlabeled: 2000,
            fixture_seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskFixture {
    pub spec: FixtureSpec,
    pub seed: Vec<InstructionResponsePair>,
    pub heldout: Vec<InstructionResponsePair>,
    pub unlabeled: Vec<UnlabeledResponse>,
}

struct Sample {
    topic: usize,
    instruction: String,
    response: String,
}

impl FixtureSpec {
    pub fn vocabulary(&self) -> Vec<&'static str> {
        let mut words = Vec::new();
        for t in 0..self.topics {
            words.extend(&INSTRUCTION_WORDS[t][..self.instruction_words]);
            words.extend(&RESPONSE_WORDS[t][..self.response_words]);
        }
        words
    }

    fn instruction(&self, topic: usize, rng: &mut impl Rng) -> String {
        let len = rng.random_range(self.min_instruction_len..=self.max_instruction_len);
        let words: Vec<&str> = (0..len).map(|_| *INSTRUCTION_WORDS[topic][..self.instruction_words].choose(rng).expect("words")).collect();
        words.join(" ")
    }

    fn sample(&self, rng: &mut impl Rng) -> Sample {
        let topic = rng.random_range(0..self.topics);
        let instruction = self.instruction(topic, rng);
        let len = rng.random_range(self.min_response_len..=self.max_response_len);
        let words: Vec<&str> = (0..len)
            .map(|_| {
                let t = if rng.random::<f64>() < self.noise { rng.random_range(0..self.topics) } else { topic };
                RESPONSE_WORDS[t][rng.random_range(0..self.response_words)]
            })
            .collect();
        Sample { topic, instruction, response: words.join(" ") }
    }

    fn samples(&self, label: &str, n: usize) -> Vec<Sample> {
        let mut rng = rng_for(derive_stream(self.fixture_seed, &["fixture", label]));
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }

    pub fn generate(&self) -> DeskFixture {
        assert!(
            self.topics <= RESPONSE_WORDS.len() && self.instruction_words <= 2 && self.response_words <= 4,
            "fixture spec exceeds the word lists"
        );
        let pairs = |label: &str, n| {
            self.samples(label, n)
                .into_iter()
                .enumerate()
                .map(|(i, s)| InstructionResponsePair::seed(format!("{label}-{i}"), s.instruction, s.response))
                .collect()
        };
        let unlabeled = self
            .samples("unlabeled", self.unlabeled)
            .into_iter()
            .enumerate()
            .map(|(i, s)| UnlabeledResponse { id: format!("u-{i}"), response: s.response, source: "desk".into() })
            .collect();
        DeskFixture { spec: self.clone(), seed: pairs("seed", self.seed_pairs), heldout: pairs("heldout", self.heldout_pairs), unlabeled }
    }

    /// `aligned` candidates carrying their true instruction followed by
    /// `mismatched` ones whose instruction names a different topic. The flag
    /// says which is which.
    pub fn discrimination_candidates(&self, aligned: usize, mismatched: usize) -> Vec<(CandidatePair, bool)> {
        let mut rng = rng_for(derive_stream(self.fixture_seed, &["fixture", "mismatch"]));
        let samples = self.samples("discrimination", aligned + mismatched);
        samples
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let is_aligned = i < aligned;
                let instruction = if is_aligned {
                    s.instruction
                } else {
                    let other = (s.topic + rng.random_range(1..self.topics)) % self.topics;
                    self.instruction(other, &mut rng)
                };
                let cand = CandidatePair {
                    id: format!("c-{i}"),
                    response: s.response,
                    pseudo_instruction: instruction,
                    score: None,
                    stream: 0,
                    meta: Meta::new(),
                };
                (cand, is_aligned)
            })
            .collect()
    }
}

#[derive(Serialize)]
struct SeedLine<'a> {
    id: &'a str,
    instruction: &'a str,
    response: &'a str,
}

impl DeskFixture {
    /// Write `seed.jsonl`, `heldout.jsonl` and `unlabeled.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        let pairs = |ps: &[InstructionResponsePair]| -> String {
            ps.iter()
                .map(|p| {
                    let line = SeedLine { id: &p.id, instruction: &p.instruction, response: &p.response };
                    serde_json::to_string(&line).expect("serializable") + "\n"
                })
                .collect()
        };
        fs::write(dir.join("seed.jsonl"), pairs(&self.seed))?;
        fs::write(dir.join("heldout.jsonl"), pairs(&self.heldout))?;
        let unlabeled: String =
            self.unlabeled.iter().map(|u| serde_json::to_string(u).expect("serializable") + "\n").collect();
        fs::write(dir.join("unlabeled.jsonl"), unlabeled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_seed, load_unlabeled};

    #[test]
    fn default_fixture_fits_the_desk_budget() {
        let spec = FixtureSpec::default();
        assert!(spec.vocabulary().len() + 3 <= 32);
        let f = spec.generate();
        assert_eq!((f.seed.len(), f.heldout.len(), f.unlabeled.len()), (200, 1000, 2000));
        assert_eq!(f, spec.generate());
    }

    #[test]
    fn written_fixture_loads_back() {
        let f = FixtureSpec { unlabeled: 20, ..Default::default() }.generate();
        let dir = tempfile::tempdir().unwrap();
        f.write(dir.path()).unwrap();
        assert_eq!(load_seed(dir.path().join("seed.jsonl")).unwrap(), f.seed);
        assert_eq!(load_seed(dir.path().join("heldout.jsonl")).unwrap(), f.heldout);
        assert_eq!(load_unlabeled(dir.path().join("unlabeled.jsonl")).unwrap().records, f.unlabeled);
    }

    #[test]
    fn mismatched_candidates_name_another_topic() {
        let spec = FixtureSpec::default();
        let topic_of = |w: &str| INSTRUCTION_WORDS.iter().position(|ws| ws.contains(&w)).unwrap();
        for (c, aligned) in spec.discrimination_candidates(50, 50) {
            let topic = topic_of(c.pseudo_instruction.split(' ').next().unwrap());
            assert!(c.pseudo_instruction.split(' ').all(|w| topic_of(w) == topic));
            let own = c.response.split(' ').filter(|w| RESPONSE_WORDS[topic].contains(w)).count();
            if !aligned {
                // noise can lend a word or two, never the majority
                assert!(own * 2 < c.response.split(' ').count(), "{c:?}");
            }
        }
    }
}
