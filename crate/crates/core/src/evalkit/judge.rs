//! Blind pairwise judging of two candidate instructions for one response.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fanout::Fanout;
use crate::modelcore::{ModelError, ModelHandle, TextCodec};
use crate::seeding::{derive_stream, rng_for};

pub const JUDGE_TEMPLATE: &str = include_str!("judge_prompt.txt");

const MARKERS: [&str; 3] = ["{response}", "{instruction_A}", "{instruction_B}"];

#[derive(Debug, Error, PartialEq)]
pub enum JudgeError {
    #[error("judge prompt field {0} is empty")]
    EmptyField(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Fill the three template slots in one left-to-right pass; marker text
/// inside the inputs is left alone.
pub fn render_judge_prompt(response: &str, instruction_a: &str, instruction_b: &str) -> Result<String, JudgeError> {
    let values = [response, instruction_a, instruction_b];
    for (name, v) in ["response", "instruction_A", "instruction_B"].iter().zip(values) {
        if v.trim().is_empty() {
            return Err(JudgeError::EmptyField(name));
        }
    }
    let mut out = String::with_capacity(JUDGE_TEMPLATE.len() + values.iter().map(|v| v.len()).sum::<usize>());
    let mut rest = JUDGE_TEMPLATE;
    while let Some((at, slot)) = MARKERS.iter().enumerate().filter_map(|(i, m)| rest.find(m).map(|p| (p, i))).min() {
        out.push_str(&rest[..at]);
        out.push_str(values[slot]);
        rest = &rest[at + MARKERS[slot].len()..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "A win")]
    AWin,
    #[serde(rename = "B win")]
    BWin,
    Tie,
}

/// Exactly one of "A win", "B win", "Tie" after trimming; anything else is
/// not a verdict.
pub fn parse_verdict(text: &str) -> Option<Verdict> {
    match text.trim() {
        "A win" => Some(Verdict::AWin),
        "B win" => Some(Verdict::BWin),
        "Tie" => Some(Verdict::Tie),
        _ => None,
    }
}

/// Result from the point of view of the system under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Tie,
    Loss,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeCase {
    pub id: String,
    pub response: String,
    /// Instruction produced by the system under test.
    pub ours: String,
    pub baseline: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub case_id: String,
    /// Whether our instruction was shown in position A.
    pub ours_in_a: bool,
    pub verdict: Option<Verdict>,
    pub raw: String,
    pub outcome: Outcome,
}

/// What a judge sees: the rendered prompt plus its parts, for judges that
/// do not read prose.
#[derive(Debug, Clone, Copy)]
pub struct JudgeRequest<'a> {
    pub prompt: &'a str,
    pub response: &'a str,
    pub instruction_a: &'a str,
    pub instruction_b: &'a str,
    pub stream: u64,
}

pub trait Judge: Send + Sync {
    /// Raw judge output.
    fn judge(&self, request: &JudgeRequest<'_>) -> Result<String, ModelError>;

    fn max_concurrency(&self) -> usize {
        1
    }
}

/// Map a positional verdict back to our side.
pub fn attribute(verdict: Option<Verdict>, ours_in_a: bool) -> Outcome {
    match (verdict, ours_in_a) {
        (None, _) => Outcome::Invalid,
        (Some(Verdict::Tie), _) => Outcome::Tie,
        (Some(Verdict::AWin), true) | (Some(Verdict::BWin), false) => Outcome::Win,
        (Some(Verdict::AWin), false) | (Some(Verdict::BWin), true) => Outcome::Loss,
    }
}

/// Whether our instruction goes in slot A for this case.
pub fn ours_in_a(global_seed: u64, case_id: &str) -> bool {
    rng_for(derive_stream(global_seed, &["judge", case_id])).random::<bool>()
}

/// Judge every case with a per-case random A/B order. Judge transport
/// errors abort; unparseable answers are recorded as invalid.
pub fn judge_pairwise(judge: &dyn Judge, cases: &[JudgeCase], global_seed: u64) -> Result<Vec<JudgeVerdict>, JudgeError> {
    let fanout = Fanout::new(judge.max_concurrency());
    fanout.try_map(cases, |case| {
        let first = ours_in_a(global_seed, &case.id);
        let (a, b) = if first { (&case.ours, &case.baseline) } else { (&case.baseline, &case.ours) };
        let prompt = render_judge_prompt(&case.response, a, b)?;
        let stream = derive_stream(global_seed, &["judge-decode", &case.id]);
        let request = JudgeRequest { prompt: &prompt, response: &case.response, instruction_a: a, instruction_b: b, stream };
        let raw = judge.judge(&request)?;
        let verdict = parse_verdict(&raw);
        if verdict.is_none() {
            log::warn!("case {:?}: judge answered {raw:?}, counted invalid", case.id);
        }
        Ok(JudgeVerdict { case_id: case.id.clone(), ours_in_a: first, verdict, raw, outcome: attribute(verdict, first) })
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub win: usize,
    pub tie: usize,
    pub loss: usize,
    pub invalid: usize,
}

impl Tally {
    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a Outcome>) -> Self {
        let mut t = Self::default();
        for o in outcomes {
            match o {
                Outcome::Win => t.win += 1,
                Outcome::Tie => t.tie += 1,
                Outcome::Loss => t.loss += 1,
                Outcome::Invalid => t.invalid += 1,
            }
        }
        t
    }

    pub fn from_verdicts(verdicts: &[JudgeVerdict]) -> Self {
        Self::from_outcomes(verdicts.iter().map(|v| &v.outcome))
    }

    pub fn total(&self) -> usize {
        self.win + self.tie + self.loss + self.invalid
    }

    pub fn valid(&self) -> usize {
        self.win + self.tie + self.loss
    }

    /// Win, tie and loss rates in percent of valid verdicts.
    pub fn rates(&self) -> Option<Rates> {
        let n = self.valid();
        (n > 0).then(|| {
            let pct = |x: usize| 100.0 * x as f64 / n as f64;
            Rates { win: pct(self.win), tie: pct(self.tie), loss: pct(self.loss) }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub win: f64,
    pub tie: f64,
    pub loss: f64,
}

impl Rates {
    pub fn delta(&self) -> f64 {
        self.win - self.loss
    }
}

/// A published comparison row with its printed margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub baseline: &'static str,
    pub rates: Rates,
    pub printed_delta: f64,
}

pub const PUBLISHED_ROWS: [PublishedRow; 4] = [
    PublishedRow { baseline: "Humpback", rates: Rates { win: 69.3, tie: 18.6, loss: 12.1 }, printed_delta: 56.2 },
    PublishedRow { baseline: "Longform", rates: Rates { win: 81.6, tie: 8.6, loss: 8.8 }, printed_delta: 72.8 },
    PublishedRow { baseline: "Dog Instruct", rates: Rates { win: 61.7, tie: 15.1, loss: 23.2 }, printed_delta: 38.5 },
    PublishedRow { baseline: "Better Alignment", rates: Rates { win: 64.7, tie: 12.4, loss: 22.9 }, printed_delta: 41.8 },
];

/// Printed margins further than this from Win − Loss are flagged.
pub const DELTA_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCheck {
    pub baseline: String,
    pub computed: f64,
    pub printed: f64,
    pub consistent: bool,
    /// Win + Tie + Loss as printed.
    pub rate_sum: f64,
    pub partitions: bool,
}

pub fn check_published(row: &PublishedRow) -> DeltaCheck {
    let computed = row.rates.delta();
    let rate_sum = row.rates.win + row.rates.tie + row.rates.loss;
    DeltaCheck {
        baseline: row.baseline.into(),
        computed,
        printed: row.printed_delta,
        consistent: (computed - row.printed_delta).abs() <= DELTA_TOLERANCE,
        rate_sum,
        partitions: (rate_sum - 100.0).abs() <= DELTA_TOLERANCE,
    }
}

/// Prefers the instruction under which the forward model finds the response
/// more likely. Unscorable instructions make it answer with an error string.
pub struct StubJudge {
    pub forward: ModelHandle,
    pub codec: TextCodec,
}

impl StubJudge {
    fn nll(&self, instruction: &str, response: &str) -> Result<f64, ModelError> {
        let source = self.codec.wrap_instruction(&self.codec.encode(instruction)?);
        Ok(self.forward.score_nll(&source, &self.codec.encode(response)?)?.mean)
    }
}

impl Judge for StubJudge {
    fn judge(&self, r: &JudgeRequest<'_>) -> Result<String, ModelError> {
        let (a, b) = match (self.nll(r.instruction_a, r.response), self.nll(r.instruction_b, r.response)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Ok(format!("cannot judge: {e}")),
        };
        Ok(match a.total_cmp(&b) {
            std::cmp::Ordering::Less => "A win",
            std::cmp::Ordering::Greater => "B win",
            std::cmp::Ordering::Equal => "Tie",
        }
        .into())
    }

    fn max_concurrency(&self) -> usize {
        self.forward.max_concurrency()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    struct Always(&'static str);

    impl Judge for Always {
        fn judge(&self, _: &JudgeRequest<'_>) -> Result<String, ModelError> {
            Ok(self.0.into())
        }
    }

    fn cases(n: usize) -> Vec<JudgeCase> {
        (0..n)
            .map(|i| JudgeCase { id: format!("c{i}"), response: "r".into(), ours: "ours".into(), baseline: "base".into() })
            .collect()
    }

    #[test]
    fn single_pass_substitution() {
        let p = render_judge_prompt("say {instruction_B}", "{response}", "b").unwrap();
        assert!(p.contains("Response:\nsay {instruction_B}\n\nInstruction A:\n{response}\n\nInstruction B:\nb\n"));
        assert_eq!(render_judge_prompt("r", "a", " "), Err(JudgeError::EmptyField("instruction_B")));
        assert_eq!(render_judge_prompt("", "a", "b"), Err(JudgeError::EmptyField("response")));
    }

    #[test]
    fn verdict_vocabulary_is_exact() {
        assert_eq!(parse_verdict(" A win\n"), Some(Verdict::AWin));
        assert_eq!(parse_verdict("B win"), Some(Verdict::BWin));
        assert_eq!(parse_verdict("Tie"), Some(Verdict::Tie));
        for bad in ["a win", "A wins", "A win.", "Tie — both fine", "", "A"] {
            assert_eq!(parse_verdict(bad), None, "{bad:?}");
        }
    }

    #[test]
    fn always_a_follows_the_recorded_permutation() {
        let out = judge_pairwise(&Always("A win"), &cases(200), 42).unwrap();
        assert!(out.iter().any(|v| v.ours_in_a) && out.iter().any(|v| !v.ours_in_a));
        for v in &out {
            assert_eq!(v.outcome, if v.ours_in_a { Outcome::Win } else { Outcome::Loss });
            assert_eq!(v.ours_in_a, ours_in_a(42, &v.case_id));
        }
        let again = judge_pairwise(&Always("A win"), &cases(200), 42).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn tallies_partition_the_cases() {
        let out = judge_pairwise(&Always("maybe"), &cases(1000), 1).unwrap();
        let t = Tally::from_verdicts(&out);
        assert_eq!((t.invalid, t.total()), (1000, 1000));
        assert_eq!(t.rates(), None);
        let mixed: Vec<Outcome> =
            (0..1000).map(|i| [Outcome::Win, Outcome::Tie, Outcome::Loss, Outcome::Invalid, Outcome::Win][i % 5]).collect();
        let t = Tally::from_outcomes(&mixed);
        assert_eq!((t.win, t.tie, t.loss, t.invalid), (400, 200, 200, 200));
        assert_eq!(t.total(), 1000);
        assert_eq!(t.rates().unwrap().delta(), 25.0);
    }

    proptest! {
        #[test]
        fn depermutation_inverts_the_shuffle(seed in any::<u64>(), id in "[a-z0-9]{1,8}", v in 0usize..3) {
            let verdict = [Verdict::AWin, Verdict::BWin, Verdict::Tie][v];
            let first = ours_in_a(seed, &id);
            // the verdict the judge gives if it always picks a fixed side
            let outcome = attribute(Some(verdict), first);
            let swapped = match verdict { Verdict::AWin => Verdict::BWin, Verdict::BWin => Verdict::AWin, Verdict::Tie => Verdict::Tie };
            let mirrored = attribute(Some(swapped), !first);
            prop_assert_eq!(outcome, mirrored);
        }
    }

    #[test]
    fn published_margins() {
        let checks: Vec<_> = PUBLISHED_ROWS.iter().map(check_published).collect();
        // Humpback's printed margin is 1.0 off; Longform's rates sum to 99.0
        let expect = [(57.2, false, true), (72.8, true, false), (38.5, true, true), (41.8, true, true)];
        for (c, (computed, consistent, partitions)) in checks.iter().zip(expect) {
            assert!((c.computed - computed).abs() < 1e-9, "{c:?}");
            assert_eq!((c.consistent, c.partitions), (consistent, partitions), "{c:?}");
        }
    }
}
