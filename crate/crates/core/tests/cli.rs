use std::process::Command;

fn ntklab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ntklab"))
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = ntklab().arg("bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_override_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["nope=1", "eta=-1", "d"] {
        let out = ntklab()
            .args(["xor-margin", "--out"])
            .arg(dir.path())
            .args(["--override", bad])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(1), "{bad}");
    }
    let out = ntklab()
        .args(["xor-margin", "--config"])
        .arg(dir.path().join("missing.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn xor_margin_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = ntklab()
            .args(["xor-margin", "--seed", "3", "--out"])
            .arg(dir.path().join(sub))
            .args([
                "--override",
                "mc_samples=20000",
                "--override",
                "noise_patterns=4",
            ])
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let mut files: Vec<_> = std::fs::read_dir(dir.path().join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| (p.file_name().unwrap().to_owned(), std::fs::read(p).unwrap()))
            .collect::<Vec<_>>()
    };
    let first = run("a");
    let second = run("b");
    assert!(first.iter().any(|(n, _)| n == "summary.json"));
    assert!(first.iter().any(|(n, _)| n == "config.json"));
    assert_eq!(first, second);

    let config: serde_json::Value =
        serde_json::from_slice(&first.iter().find(|(n, _)| n == "config.json").unwrap().1).unwrap();
    assert_eq!(config["seed"], 3);
    assert_eq!(config["mc_samples"], 20000);
}

#[test]
fn config_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"experiment": "ntk-lb", "d": 40, "trials": 50}"#).unwrap();
    let out = ntklab()
        .args(["ntk-lb", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(matches!(out.status.code(), Some(0) | Some(2)));
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/config.json")).unwrap())
            .unwrap();
    assert_eq!(written["d"], 40);
    assert_eq!(written["trials"], 50);
}
