use std::process::Command;

fn addp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_addp"))
}

#[test]
fn help_lists_every_subcommand() {
    let out = addp().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in [
        "train-tokenizer",
        "train-predictor",
        "train-addp",
        "generate",
        "inpaint",
        "finetune",
        "linprobe",
        "input-study",
        "verify-calculus",
        "run-pipeline",
        "eval",
    ] {
        assert!(text.contains(cmd), "missing {cmd} in\n{text}");
    }
}

#[test]
fn verify_calculus_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("calculus.json");
    let out = addp()
        .args(["verify-calculus", "--seeds", "4", "--first-seed", "10", "--report"])
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["specs"], 4);
    assert_eq!(summary["failures"], 0);
    let full: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(full["specs"].as_array().unwrap().len(), 4);
    assert_eq!(full["specs"][0]["seed"], 10);
}

#[test]
fn a_bad_config_fails_with_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "seed = 1\noutput_dir = \"x\"\n[dataset]\nkind = \"shapes\"\nn_train = 8\nn_val = 8\n[sampler]\nsteps = 0\n",
    )
    .unwrap();
    let out = addp().args(["train-tokenizer", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sampler") && err.contains("steps"), "{err}");
}
