use corrector_cli::dispatch;

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("corrector").chain(args.iter().copied());
    let code = dispatch(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

const TINY: [&str; 8] = [
    "--set",
    "synth.n_targets=96",
    "--set",
    "synth.n_probes=8",
    "--set",
    "isolated.max_epochs=2",
    "--set",
    "isolated.query_batch=8",
];

#[test]
fn help_exits_zero() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("sweep-capacity"));
    assert_eq!(run(&["train-joint", "--help"]).0, 0);
}

#[test]
fn missing_seed_names_the_flag() {
    let (code, _, err) = run(&["synth-gen", "--out", "/tmp/unused"]);
    assert_eq!(code, 1);
    assert!(err.contains("--seed"), "{err}");
}

#[test]
fn unknown_subcommand_and_flag_print_usage() {
    let (code, _, err) = run(&["frobnicate"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");
    let (code, _, err) = run(&["synth-gen", "--seed", "1", "--bogus"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, _, err) = run(&["synth-gen", "--seed", "1", "--out", out, "--set", "nope=3"]);
    assert_eq!(code, 1);
    assert!(err.contains("nope"), "{err}");
    let (code, _, _) = run(&["synth-gen", "--seed", "1", "--out", out, "--set", "n_targets"]);
    assert_eq!(code, 1);
}

#[test]
fn invalid_value_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, _, _) = run(&["synth-gen", "--seed", "1", "--out", out, "--set", "beta=-1"]);
    assert_eq!(code, 1);
}

#[test]
fn run_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e");
    let missing = dir.path().join("nothing-here");
    let set = format!("run_dir=\"{}\"", missing.display());
    let (code, _, err) = run(&["eval", "--seed", "1", "--out", out.to_str().unwrap(), "--set", &set]);
    assert_eq!(code, 2, "{err}");
}

#[test]
fn run_then_rerun_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let mut args = vec!["train-corrector", "--seed", "4", "--out", a.to_str().unwrap()];
    args.extend(TINY);
    let (code, out, err) = run(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("kl_corrected"));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config"]["synth"]["n_targets"], 96);

    let (code, out, err) = run(&["rerun", a.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("bit-exactly"));

    let r = dir.path().join("r");
    let (code, _, err) = run(&["report", a.to_str().unwrap(), b.to_str().unwrap(), "--out", r.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let text = std::fs::read_to_string(r.join("report.csv")).unwrap();
    assert!(text.starts_with("cell_digest,command,metric,n,median,q25,q75"));
    assert!(text.lines().skip(1).all(|l| l.contains(",2,")));
}

#[test]
fn config_file_then_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.conf");
    std::fs::write(&cfg, "n_targets = 64\nn_probes = 4 # few\n").unwrap();
    let out = dir.path().join("o");
    let (code, _, err) = run(&[
        "synth-gen",
        "--seed",
        "2",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "n_targets=80",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["n_targets"], 80);
    assert_eq!(m["config"]["n_probes"], 4);
}

#[test]
fn defaults_print_flat_keys() {
    let (code, out, _) = run(&["defaults", "train-joint"]);
    assert_eq!(code, 0);
    assert!(out.contains("train.encoder_lr = "));
    assert_eq!(run(&["defaults", "nope"]).0, 1);
}
