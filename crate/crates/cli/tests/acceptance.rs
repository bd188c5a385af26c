//! Acceptance gate. Runs every criterion in sequence, prints one line each,
//! and exits non-zero if any hard criterion fails.

use std::collections::HashSet;
use std::fs;
use std::panic::{AssertUnwindSafe, catch_unwind};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mainforge_cli::commands::{ALIGNMENT_REPORT_FILE, MANIFEST_FILE, Session, cmd_run};
use mainforge_cli::config::{Overrides, load};
use mainforge_cli::fixture::CONFIG_FILE;
use mainforge_core::align::{AlignContext, AlignmentConfig, AlphaMode, SeedTokens, combined_loss, compute_alpha, run_alignment};
use mainforge_core::augment::CandidatePair;
use mainforge_core::corpus::{ManifestInfo, TrainerHints};
use mainforge_core::curate::{CurationConfig, curate_dataset};
use mainforge_core::evalkit::judge::{
    Judge, JudgeCase, JudgeRequest, Outcome, PUBLISHED_ROWS, Tally, check_published, judge_pairwise, render_judge_prompt,
};
use mainforge_core::evalkit::{AlignmentReport, AlignmentTask, DESK_ADD_K, DESK_GLOBAL_SEED, FixtureSpec, sweep_iterations};
use mainforge_core::modelcore::sampling::choose_next;
use mainforge_core::modelcore::{
    DecodeParams, FitOptions, ModelError, ModelHandle, PromptTemplates, ReferenceConfig, ReferenceModel, TextCodec, Tokenizer,
    TokenizerSpec, WeightedExample, nucleus_filter,
};
use mainforge_core::seeding::{derive_stream, rng_for};
use rand::Rng;

/// Share of aligned candidates among the K=1000 selected by the seed-fitted
/// forward model, measured once and frozen. The pass floor stays at 0.90.
const FILTER_ORACLE_RECOVERY: f64 = 0.821;
const FILTER_THRESHOLD: f64 = 0.90;

enum Verdict {
    Pass(String),
    Flag(String),
    Fail(String),
}

type Check = Result<String, String>;
type Criterion = (&'static str, Duration, Box<dyn Fn() -> Verdict>);

fn desk_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/desk").join(CONFIG_FILE)
}

fn desk_session(out: &Path) -> Session {
    let loaded = load(&desk_config(), &Overrides { output: Some(out.into()), ..Default::default() }).expect("desk config");
    Session::open(loaded).expect("desk session")
}

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if ok { Ok(()) } else { Err(what()) }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> Result<(), String> {
    let ok = a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol);
    ensure(ok, || format!("{a:?} vs {b:?}"))
}

fn arithmetic() -> Check {
    let e = |r: Result<f64, _>| r.map_err(|e: mainforge_core::align::AlignError| e.to_string());
    close(&[e(compute_alpha(2.0, 6.0, 0.01))?], &[0.25], 1e-12)?;
    close(&[e(compute_alpha(1.0, 1.0, 0.01))?], &[0.5], 1e-12)?;
    close(&[e(compute_alpha(0.0, 5.0, 0.01))?], &[0.01], 1e-12)?;
    close(&[combined_loss(0.25, 2.0, 4.0)], &[3.5], 1e-12)?;
    let nf = |d: &[f64], p| nucleus_filter(d, p).map_err(|e| e.to_string());
    let d = [0.5, 0.3, 0.15, 0.05];
    close(&nf(&d, 0.9)?, &[0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0], 1e-12)?;
    close(&nf(&d, 1.0)?, &d, 1e-12)?;
    close(&nf(&[0.5, 0.5], 0.5)?, &[1.0, 0.0], 1e-12)?;
    Ok("alpha, combined loss and nucleus hand values within 1e-12".into())
}

/// Weighted cross-entropy of a two-word next-token distribution `(q, 1 - q)`.
fn grid_ce(wx: f64, wy: f64, q: f64) -> f64 {
    let term = |w: f64, p: f64| if w == 0.0 { 0.0 } else { -w * p.ln() };
    term(wx, q) + term(wy, 1.0 - q)
}

fn mle_optimality() -> Check {
    let tok = Tokenizer::from_words(TokenizerSpec::default(), vec!["x".into(), "y".into()]);
    let (x, y) = (tok.encode("x").map_err(|e| e.to_string())?, tok.encode("y").map_err(|e| e.to_string())?);
    let base = ReferenceModel::new(ReferenceConfig { add_k: 0.0, ..Default::default() }, tok.word_count());
    let mut rng = rng_for(derive_stream(0, &["acceptance", "mle"]));
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..200 {
        let n = rng.random_range(1..=12);
        let examples: Vec<WeightedExample> = (0..n)
            .map(|_| {
                let target = if rng.random::<bool>() { x.clone() } else { y.clone() };
                WeightedExample::new(vec![], target, rng.random_range(0.0..3.0))
            })
            .collect();
        if examples.iter().all(|e| e.weight == 0.0) {
            continue;
        }
        let fitted = ModelHandle::new(base.fitted(&examples).map_err(|e| e.to_string())?);
        let mut fit_ce = 0.0;
        for e in &examples {
            if e.weight > 0.0 {
                fit_ce += e.weight * fitted.score_nll(&e.source, &e.target).map_err(|e| e.to_string())?.sum;
            }
        }
        let wx: f64 = examples.iter().filter(|e| e.target == x).map(|e| e.weight).sum();
        let wy: f64 = examples.iter().filter(|e| e.target == y).map(|e| e.weight).sum();
        let grid = (0..=1000).map(|i| grid_ce(wx, wy, i as f64 / 1000.0)).fold(f64::INFINITY, f64::min);
        worst = worst.max(fit_ce - grid);
        ensure(fit_ce <= grid + 1e-6, || format!("fit CE {fit_ce} exceeds grid minimum {grid}"))?;
    }
    Ok(format!("200 sets; max(fit - grid) = {worst:.3e}"))
}

fn sampler() -> Check {
    let dist = [0.5, 0.3, 0.15, 0.05];
    let cases = [
        (1.0, vec![0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0]),
        // Squared weights .25 .09 .0225 .0025; the top two already pass 0.9 of .365.
        (0.5, vec![0.25 / 0.34, 0.09 / 0.34, 0.0, 0.0]),
    ];
    let draws = 100_000;
    let mut worst = 0.0f64;
    for (temperature, truth) in cases {
        let params = DecodeParams { temperature, top_p: 0.9, ..Default::default() };
        let mut rng = rng_for(derive_stream(0, &["acceptance", "sampler", &temperature.to_string()]));
        let mut counts = [0usize; 4];
        for _ in 0..draws {
            counts[choose_next(&dist, &params, &mut rng).map_err(|e| e.to_string())?] += 1;
        }
        for (i, (&c, &t)) in counts.iter().zip(&truth).enumerate() {
            if t == 0.0 {
                ensure(c == 0, || format!("T={temperature}: token {i} outside the nucleus drawn {c} times"))?;
            }
            let freq = c as f64 / draws as f64;
            worst = worst.max((freq - t).abs());
            ensure((freq - t).abs() <= 0.01, || format!("T={temperature}: token {i} frequency {freq} vs {t}"))?;
        }
    }
    Ok(format!("{draws} draws per temperature; max |freq - truth| = {worst:.4}"))
}

fn desk_codec(spec: &FixtureSpec) -> TextCodec {
    let words = spec.vocabulary().iter().map(|w| w.to_string()).collect();
    TextCodec::new(Tokenizer::from_words(TokenizerSpec::default(), words), PromptTemplates::default()).expect("codec")
}

/// Forward model fitted on the desk seed pairs alone.
fn seed_forward(codec: &TextCodec, spec: &FixtureSpec) -> Result<ModelHandle, String> {
    let fixture = spec.generate();
    let seed = SeedTokens::encode(codec, &fixture.seed).map_err(|e| e.to_string())?;
    let base = ModelHandle::new(ReferenceModel::new(ReferenceConfig { add_k: DESK_ADD_K, ..Default::default() }, codec.tokenizer().word_count()));
    let examples: Vec<_> = seed.forward_pairs(codec).into_iter().map(|(s, t)| WeightedExample::new(s, t, 1.0)).collect();
    base.fit_weighted(&examples, &FitOptions::default()).map_err(|e| e.to_string())
}

fn info() -> ManifestInfo {
    ManifestInfo { rng_seed: DESK_GLOBAL_SEED, config_digest: "acceptance".into(), trainer_hints: TrainerHints::default(), score_summary: None }
}

fn filter_discrimination() -> Check {
    let spec = FixtureSpec::default();
    let codec = desk_codec(&spec);
    let forward = seed_forward(&codec, &spec)?;
    let labelled = spec.discrimination_candidates(1000, 1000);
    let aligned: HashSet<String> = labelled.iter().filter(|(_, a)| *a).map(|(c, _)| c.id.clone()).collect();
    let cfg = CurationConfig { top_k: 1000, ..Default::default() };
    let seed = spec.generate().seed;
    let out = curate_dataset(&forward, labelled.into_iter().map(|(c, _)| Ok(c)), &seed, &codec, &cfg, info())
        .map_err(|e| e.to_string())?;
    let selected: Vec<_> = out.manifest.pairs.iter().filter(|p| p.id.starts_with("c-")).collect();
    ensure(selected.len() == 1000, || format!("selected {}", selected.len()))?;
    let hits = selected.iter().filter(|p| aligned.contains(&p.id)).count();
    let recovery = hits as f64 / 1000.0;
    let threshold = FILTER_THRESHOLD.max(FILTER_ORACLE_RECOVERY);
    ensure(recovery >= threshold, || {
        format!("recovered {recovery:.3} aligned, threshold {threshold:.3} (frozen oracle {FILTER_ORACLE_RECOVERY:.3})")
    })?;
    Ok(format!("recovered {recovery:.3} aligned in the top 1000 (threshold {threshold:.3})"))
}

fn end_to_end() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let session = desk_session(a.path());
    let vocab = session.codec.tokenizer().word_count();
    ensure(vocab <= 32, || format!("vocabulary {vocab}"))?;
    ensure(session.seed.len() == 200 && session.unlabeled.len() == 2000, || "fixture size".into())?;
    ensure(session.loaded.config.alignment.iterations == 3, || "iterations".into())?;
    cmd_run(&session).map_err(|e| format!("{e:#}"))?;
    let text = fs::read_to_string(a.path().join(ALIGNMENT_REPORT_FILE)).map_err(|e| e.to_string())?;
    let report: AlignmentReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let at = |k: usize| report.per_iteration.iter().find(|m| m.k == k).map(|m| m.roundtrip.mean());
    let (Some(k0), Some(k3)) = (at(0), at(3)) else { return Err("missing k=0 or k=3 measurement".into()) };
    ensure(k3 < k0, || format!("round trip k=3 {k3:.4} not below k=0 {k0:.4}"))?;
    cmd_run(&desk_session(b.path())).map_err(|e| format!("{e:#}"))?;
    let bytes = |d: &Path| fs::read(d.join(MANIFEST_FILE)).map_err(|e| e.to_string());
    ensure(bytes(a.path())? == bytes(b.path())?, || "manifests differ between identical runs".into())?;
    Ok(format!("round trip k=0 {k0:.4} -> k=3 {k3:.4}; manifests byte-identical"))
}

fn ablation_shape() -> Verdict {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let s = desk_session(dir.path());
    let cfg = &s.loaded.config;
    let encode = |p| SeedTokens::encode(&s.codec, p).expect("encodable fixture");
    let (seed, heldout) = (encode(&s.seed), encode(s.heldout.as_deref().expect("desk heldout")));
    let base = ModelHandle::new(ReferenceModel::new(ReferenceConfig { add_k: DESK_ADD_K, ..Default::default() }, s.codec.tokenizer().word_count()));
    let task = AlignmentTask {
        seed: &seed,
        heldout: &heldout,
        base_forward: &base,
        base_reverse: &base,
        codec: &s.codec,
        global_seed: cfg.global_seed,
        probe: cfg.report.probe,
    };
    let table = match sweep_iterations(task, &cfg.alignment, &[1, 2, 3, 4, 5, 10, 20]) {
        Ok(t) => t,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let best = table.best().expect("rows");
    let n20 = table.row("N=20").expect("N=20").metric();
    let metrics: Vec<String> = table.rows.iter().map(|r| format!("{}:{:.4}", r.label, r.metric())).collect();
    let detail = format!("best {} ({:.4}), N=20 {n20:.4} [{}]", best.label, best.metric(), metrics.join(" "));
    let peak_early = best.iterations <= 5;
    let degrades = n20 > best.metric();
    match (peak_early, degrades) {
        (true, true) => Verdict::Pass(detail),
        (false, _) if cfg.global_seed == DESK_GLOBAL_SEED => Verdict::Fail(format!("no peak at N<=5 on the frozen seed: {detail}")),
        _ => Verdict::Flag(detail),
    }
}

fn zero_influence() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = desk_session(dir.path());
    let seed = SeedTokens::encode(&s.codec, &s.seed).map_err(|e| e.to_string())?;
    let base = ReferenceModel::new(ReferenceConfig { add_k: DESK_ADD_K, ..Default::default() }, s.codec.tokenizer().word_count());
    let handle = ModelHandle::new(base.clone());
    let cfg = AlignmentConfig { alpha_mode: AlphaMode::Fixed(0.0), ..s.loaded.config.alignment.clone() };
    let ctx = AlignContext { codec: &s.codec, global_seed: s.loaded.config.global_seed };
    let out = run_alignment(&seed, handle.clone(), handle, &cfg, ctx).map_err(|e| e.to_string())?;
    let seed_only = |pairs: Vec<(Vec<u32>, Vec<u32>)>| -> Result<ReferenceModel, ModelError> {
        base.fitted(&pairs.into_iter().map(|(s, t)| WeightedExample::new(s, t, 1.0)).collect::<Vec<_>>())
    };
    let fwd = seed_only(seed.forward_pairs(&s.codec)).map_err(|e| e.to_string())?;
    let rev = seed_only(seed.reverse_pairs(&s.codec)).map_err(|e| e.to_string())?;
    ensure(out.forward.downcast::<ReferenceModel>() == Some(&fwd), || "forward differs from the seed-only fit".into())?;
    ensure(out.reverse.downcast::<ReferenceModel>() == Some(&rev), || "reverse differs from the seed-only fit".into())?;
    Ok(format!("fixed(0) after {} iterations equals seed-only fits exactly", cfg.iterations))
}

/// Answers from a fixed rotation, including one that is not a verdict.
struct Scripted;

impl Judge for Scripted {
    fn judge(&self, r: &JudgeRequest<'_>) -> Result<String, ModelError> {
        let n: usize = r.response.trim_start_matches("response ").parse().unwrap_or(0);
        Ok(["A win", "B win", "Tie", "no idea"][n % 4].into())
    }
}

fn judge() -> Check {
    let rendered = render_judge_prompt(
        "The capital of France is Paris. It sits on the Seine.",
        "What is the capital of France?",
        "Name a river in Europe.",
    )
    .map_err(|e| e.to_string())?;
    ensure(rendered == include_str!("../../core/tests/golden/judge_prompt_rendered.txt"), || "rendered prompt differs from golden".into())?;

    let cases: Vec<JudgeCase> = (0..103)
        .map(|i| JudgeCase { id: format!("j-{i}"), response: format!("response {i}"), ours: "ours".into(), baseline: "theirs".into() })
        .collect();
    let verdicts = judge_pairwise(&Scripted, &cases, DESK_GLOBAL_SEED).map_err(|e| e.to_string())?;
    let tally = Tally::from_verdicts(&verdicts);
    ensure(tally.total() == cases.len(), || format!("{tally:?} does not partition {}", cases.len()))?;
    ensure(tally.invalid == verdicts.iter().filter(|v| v.outcome == Outcome::Invalid).count(), || "invalid count".into())?;
    ensure(tally.tie == 26 && tally.invalid == 25, || format!("{tally:?}"))?;
    let rates = tally.rates().ok_or("no valid verdicts")?;
    close(&[rates.win + rates.tie + rates.loss], &[100.0], 1e-9)?;

    let mut notes = Vec::new();
    for row in &PUBLISHED_ROWS {
        let c = check_published(row);
        close(&[c.computed], &[row.rates.win - row.rates.loss], 1e-12)?;
        if !c.consistent {
            notes.push(format!("{}: Win-Loss {:.1} vs printed {:.1}", c.baseline, c.computed, c.printed));
        }
        if !c.partitions {
            notes.push(format!("{}: rates sum to {:.1}", c.baseline, c.rate_sum));
        }
    }
    let expected = ["Humpback: Win-Loss 57.2 vs printed 56.2", "Longform: rates sum to 99.0"];
    ensure(notes == expected, || format!("published-row discrepancies {notes:?}"))?;
    Ok(format!("prompt golden; {tally:?}; surfaced {}", notes.join("; ")))
}

fn vm_hwm_mib() -> Option<f64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib / 1024.0)
}

fn scale_smoke() -> Check {
    const TOTAL: usize = 500_000;
    const K: usize = 16_800;
    let spec = FixtureSpec::default();
    let codec = desk_codec(&spec);
    let forward = seed_forward(&codec, &spec)?;
    let pool: Vec<CandidatePair> = spec.discrimination_candidates(1000, 1000).into_iter().map(|(c, _)| c).collect();
    let stream = (0..TOTAL).map(|i| {
        let mut c = pool[i % pool.len()].clone();
        c.id = format!("s-{i}");
        Ok(c)
    });
    let cfg = CurationConfig { top_k: K, ..Default::default() };
    let out = curate_dataset(&forward, stream, &spec.generate().seed, &codec, &cfg, info()).map_err(|e| e.to_string())?;
    ensure(out.seen == TOTAL && out.scored == TOTAL && out.manifest.selected_count == K, || {
        format!("seen {} scored {} selected {}", out.seen, out.scored, out.manifest.selected_count)
    })?;
    let peak = vm_hwm_mib();
    if let Some(mib) = peak {
        ensure(mib < 1024.0, || format!("peak resident memory {mib:.0} MiB"))?;
    }
    let peak = peak.map_or("n/a".into(), |m| format!("{m:.0} MiB"));
    Ok(format!("{TOTAL} candidates, K={K}, peak resident {peak}"))
}

fn main() {
    let hard = |f: fn() -> Check| {
        move || match f() {
            Ok(d) => Verdict::Pass(d),
            Err(d) => Verdict::Fail(d),
        }
    };
    let criteria: Vec<Criterion> = vec![
        ("arithmetic", Duration::from_secs(1), Box::new(hard(arithmetic))),
        ("mle-optimality", Duration::from_secs(10), Box::new(hard(mle_optimality))),
        ("sampler", Duration::from_secs(5), Box::new(hard(sampler))),
        ("filter-discrimination", Duration::from_secs(60), Box::new(hard(filter_discrimination))),
        ("end-to-end", Duration::from_secs(120), Box::new(hard(end_to_end))),
        ("ablation-shape", Duration::MAX, Box::new(ablation_shape)),
        ("zero-influence", Duration::MAX, Box::new(hard(zero_influence))),
        ("judge", Duration::MAX, Box::new(hard(judge))),
        ("scale-smoke", Duration::from_secs(600), Box::new(hard(scale_smoke))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, limit, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Verdict::Fail("panicked".into()));
        let elapsed = start.elapsed();
        let verdict = match verdict {
            Verdict::Pass(_) | Verdict::Flag(_) if elapsed > limit => Verdict::Fail(format!("took {elapsed:.1?}, limit {limit:?}")),
            v => v,
        };
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Flag(d) => ("FLAG", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("acceptance {name}: {tag} ({elapsed:.2?}) {detail}");
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
