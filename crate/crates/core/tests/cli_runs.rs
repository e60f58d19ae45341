use std::path::Path;

use actiondiff::cli::{parse_and_dispatch, resolve, ConfigError, RunConfig};
use serde_json::json;

fn run(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = parse_and_dispatch(std::iter::once("actiondiff").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["no-such-command"]).0, 1);
    assert_eq!(run(&["gen-data", "--protocol", "sideways"]).0, 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"trian": {}}"#).unwrap();
    let (code, _, err) = run(&["--config", &s(&cfg), "--out", &s(&dir.path().join("o")), "gen-data"]);
    assert_eq!(code, 1);
    assert!(err.contains("trian"), "{err}");
}

#[test]
fn missing_backbone_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["--out", &s(&dir.path().join("o")), "protocol", "--backbone", &s(&dir.path().join("nope.ck"))]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn gen_data_is_byte_reproducible_and_snapshots_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, json!({"seed": 9, "protocol": {"kind": "cross_view", "train_per_domain": 3, "test_per_domain": 2}}).to_string()).unwrap();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let (code, _, err) = run(&["--config", &s(&cfg), "--out", &s(&out), "--jobs", "1", "gen-data"]);
        assert_eq!(code, 0, "{err}");
    }
    for split in ["train", "test", "test_in_domain"] {
        let m = |d: &str| std::fs::read(dir.path().join(d).join(split).join("manifest.json")).unwrap();
        assert_eq!(m("a"), m("b"), "{split}");
    }
    let snap: RunConfig = serde_json::from_slice(&std::fs::read(dir.path().join("a/config.json")).unwrap()).unwrap();
    assert_eq!(snap.seed, 9);
    assert_eq!(snap.protocol.seed, 9);
    assert_eq!(snap.protocol.train_per_domain, 3);
}

#[test]
fn config_precedence() {
    let c = resolve(Some(r#"{"seed": 2, "train": {"epochs": 4}}"#), &[("train.epochs".into(), json!(6))]).unwrap();
    assert_eq!((c.seed, c.train.epochs, c.train.seed), (2, 6, 2));
    assert!(matches!(resolve(Some(r#"{"seed": 2, "pretrain": {"seed": 3}}"#), &[]), Err(ConfigError::SeedConflict { .. })));
}
