use std::path::Path;
use std::process::{Command, Output};

const RUN: &str = r#"
task = 1

[data]
train_scenes = 16
test_scenes = 8

[model]
embed_dim = 16
num_queries = 6
encoder_layers = 1
decoder_layers = 1
heads = 2
ffn_dim = 16
num_known = 8

[train]
epochs = 1
"#;

fn skdf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skdf")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let text = format!("out_dir = {:?}\ndata_dir = {:?}\n{body}", dir.join("run"), dir.join("data"));
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn version_flag_prints_package_version() {
    let out = skdf(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "sed = 1\n").unwrap();
    let out = skdf(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sed"));

    let cfg = write_config(dir.path(), RUN);
    let out = skdf(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = skdf(&["eval", "--config", &cfg, "--task", "5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_the_file_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), RUN);
    assert!(skdf(&["generate-data", "--config", &cfg, "--seed", "9"]).status.success());
    let dumped = std::fs::read_to_string(dir.path().join("data/resolved_generate-data.toml")).unwrap();
    assert!(dumped.starts_with("# skdf v"));
    assert!(dumped.contains("seed = 9"));
    assert!(skdf(&["train", "--config", &cfg, "--seed", "9"]).status.success());
    let out = skdf(&["eval", "--config", &cfg, "--seed", "9"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("U-Recall"));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics_task1.json")).unwrap();
    assert!(metrics.contains("\"seed\": 9"));
}
