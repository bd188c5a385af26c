use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mainforge_cli::commands::{CANDIDATES_FILE, MANIFEST_FILE, Session, cmd_run};
use mainforge_cli::config::{Overrides, load, load_str};
use mainforge_cli::fixture::{CONFIG_FILE, DESK_TOP_K, write_desk};
use mainforge_core::corpus::load_manifest;
use mainforge_core::evalkit::DESK_ADD_K;
use mainforge_core::modelcore::{ReferenceConfig, ReferenceModel};
use mainforge_testkit::{LoopbackServer, ServerOptions};

fn desk_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/desk")
}

fn desk_config() -> PathBuf {
    desk_dir().join(CONFIG_FILE)
}

fn mainforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mainforge")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_to(out: &Path, extra: &[&str]) -> Output {
    let (config, out) = (desk_config(), out.to_str().unwrap().to_owned());
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--output", &out];
    args.extend_from_slice(extra);
    mainforge(&args)
}

#[test]
fn bundled_fixture_matches_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    write_desk(dir.path()).unwrap();
    for name in ["seed.jsonl", "heldout.jsonl", "unlabeled.jsonl", CONFIG_FILE] {
        assert_eq!(fs::read(dir.path().join(name)).unwrap(), fs::read(desk_dir().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn run_is_deterministic_and_sized() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = run_to(d.path(), &[]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let bytes = |d: &tempfile::TempDir| fs::read(d.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    let m = load_manifest(a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!((m.selected_count, m.seed_count), (DESK_TOP_K, 200));
    assert!(!a.path().read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().ends_with(".partial")));

    let c = tempfile::tempdir().unwrap();
    assert!(run_to(c.path(), &["--seed", "2"]).status.success());
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn stages_compose_to_run() {
    let (staged, whole) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let config = desk_config();
    for stage in ["align", "augment", "curate"] {
        let out = staged.path().to_str().unwrap();
        let o = mainforge(&[stage, "-c", config.to_str().unwrap(), "-o", out]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    assert!(run_to(whole.path(), &[]).status.success());
    let read = |d: &tempfile::TempDir| fs::read(d.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(read(&staged), read(&whole));
}

#[test]
fn curate_needs_candidates() {
    let out = tempfile::tempdir().unwrap();
    let config = desk_config();
    let o = mainforge(&["curate", "--config", config.to_str().unwrap(), "--output", out.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing candidates artifact"), "{}", stderr(&o));
    assert!(!out.path().join(MANIFEST_FILE).exists());
}

#[test]
fn artifacts_from_another_config_are_rejected() {
    let out = tempfile::tempdir().unwrap();
    let (config, dir) = (desk_config(), out.path().to_str().unwrap().to_owned());
    let args = |stage, seed| vec![stage, "-c", config.to_str().unwrap(), "-o", &dir, "--seed", seed];
    assert!(mainforge(&args("align", "1")).status.success());
    assert!(mainforge(&args("augment", "1")).status.success());
    let o = mainforge(&args("curate", "2"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(CANDIDATES_FILE) && stderr(&o).contains("digest"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_2_with_field_diagnostics() {
    let config = desk_config();
    let o = mainforge(&["align", "-c", config.to_str().unwrap(), "--set", "curation.top_k=0", "--set", "alignment.alpha_clamp=0.9"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("curation.top_k") && err.contains("alignment"), "{err}");

    let o = mainforge(&["align", "-c", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn remote_backends_reproduce_the_reference_run() {
    let reference_out = tempfile::tempdir().unwrap();
    let reference = load(&desk_config(), &Overrides {
        output: Some(reference_out.path().into()),
        ..Default::default()
    })
    .unwrap();
    let session = Session::open(reference).unwrap();
    cmd_run(&session).unwrap();

    let tok = session.codec.tokenizer().clone();
    let model = ReferenceModel::new(ReferenceConfig { add_k: DESK_ADD_K, ..Default::default() }, tok.word_count());
    let fwd = LoopbackServer::start(model.clone(), tok.clone(), ServerOptions::default());
    let rev = LoopbackServer::start(model, tok, ServerOptions::default());
    let remote_out = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(desk_config()).unwrap().replace(
        &format!("[forward]\nkind = \"reference\"\nadd_k = {DESK_ADD_K}\n\n[reverse]\nkind = \"reference\"\nadd_k = {DESK_ADD_K}\n"),
        &format!("[forward]\nkind = \"remote\"\nbase_url = \"{}\"\n\n[reverse]\nkind = \"remote\"\nbase_url = \"{}\"\n", fwd.url(), rev.url()),
    );
    assert!(text.contains("kind = \"remote\""));
    let overrides = Overrides { output: Some(remote_out.path().into()), ..Default::default() };
    let remote = Session::open(load_str(&text, &desk_dir(), &overrides).unwrap()).unwrap();
    cmd_run(&remote).unwrap();

    let a = load_manifest(reference_out.path().join(MANIFEST_FILE)).unwrap();
    let b = load_manifest(remote_out.path().join(MANIFEST_FILE)).unwrap();
    assert_ne!(a.config_digest, b.config_digest);
    assert_eq!(a.pairs, b.pairs);
    assert_eq!(a.score_summary, b.score_summary);
}
