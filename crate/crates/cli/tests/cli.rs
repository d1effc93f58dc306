use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn case_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(format!("{name}.json"))
}

fn gridflow(dir: &Path, args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gridflow"));
    cmd.args(args).current_dir(dir).env("RUST_LOG", "warn").env_remove("GRIDFLOW_SEED");
    if let Some(s) = seed {
        cmd.env("GRIDFLOW_SEED", s);
    }
    cmd.output().expect("spawn gridflow")
}

fn generate(dir: &Path, out: &str, seed: Option<&str>, extra: &[&str]) -> Output {
    let case = case_path("case4gs");
    let mut args = vec!["generate", "--case", case.to_str().unwrap(), "--n", "12", "--out", out];
    args.extend_from_slice(extra);
    gridflow(dir, &args, seed)
}

#[test]
fn generate_then_verify_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let gen = generate(dir.path(), "d.jsonl", None, &["--seed", "3"]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    let out = gridflow(dir.path(), &["verify", "--data", "d.jsonl"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_echo_is_written_beside_output() {
    let dir = tempfile::tempdir().unwrap();
    assert!(generate(dir.path(), "d.jsonl", None, &["--seed", "3"]).status.success());
    let echo = std::fs::read_to_string(dir.path().join("d.config.toml")).unwrap();
    assert!(echo.contains("seed = 3"), "{echo}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridflow(dir.path(), &["verify", "--bogus"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gridflow(dir.path(), &["frobnicate"], None).status.code(), Some(2));
}

#[test]
fn out_of_range_outages_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(dir.path(), "d.jsonl", None, &["--max-outages", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridflow(dir.path(), &["verify", "--data", "absent.jsonl"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("gen.toml"), "sede = 4\n").unwrap();
    let out = generate(dir.path(), "d.jsonl", None, &["--config", "gen.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("d.jsonl").exists());
}

#[test]
fn seed_flag_beats_environment_which_beats_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("gen.toml"), "seed = 5\n").unwrap();
    let read = |name: &str| std::fs::read(p.join(name)).unwrap();
    assert!(generate(p, "config.jsonl", None, &["--config", "gen.toml"]).status.success());
    assert!(generate(p, "env.jsonl", Some("9"), &["--config", "gen.toml"]).status.success());
    assert!(generate(p, "flag.jsonl", Some("9"), &["--config", "gen.toml", "--seed", "5"]).status.success());
    assert!(generate(p, "plain.jsonl", None, &["--seed", "9"]).status.success());
    assert_ne!(read("config.jsonl"), read("env.jsonl"));
    assert_eq!(read("config.jsonl"), read("flag.jsonl"));
    assert_eq!(read("env.jsonl"), read("plain.jsonl"));
}
