//! End-to-end runs of the command-line binary: artifact layout, exit codes,
//! and the output-root environment variable.

use std::ffi::OsStr;
use std::path::Path;
use std::process::{Command, Output};

fn signkit<S: AsRef<OsStr>>(args: &[S], envs: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_signkit"));
    // A quiet logger keeps stderr reserved for actual errors.
    cmd.env("RUST_LOG", "error");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.args(args);
    cmd.output().expect("binary should spawn")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small-model overrides shared by the pipeline tests.
const FAST: &[&str] = &[
    "--set", "epochs=1",
    "--set", "batch_size=4",
    "--set", "model.d_g=16",
    "--set", "model.d1=24",
    "--set", "model.d2=24",
    "--set", "model.n_blocks=1",
    "--set", "model.gcn_layers=1",
    "--set", "model.dropout=0",
    "--set", "model.decoder_hidden=32",
    "--set", "task.sampled_frames=8",
    "--set", "text.d_t=16",
    "--set", "text.n_blocks=1",
    "--set", "synth.num_samples=6",
    "--set", "synth.vocab_size=4",
];

fn fast_args(rest: &[&str]) -> Vec<String> {
    FAST.iter().chain(rest.iter()).map(|s| s.to_string()).collect()
}

#[test]
fn help_and_version_print_to_stdout_and_succeed() {
    let help = signkit(&["--help"], &[]);
    assert!(help.status.success());
    let text = stdout_of(&help);
    for cmd in ["synth", "pretrain", "finetune", "evaluate"] {
        assert!(text.contains(cmd), "help misses {cmd}");
    }
    let version = signkit(&["--version"], &[]);
    assert!(version.status.success());
    assert!(stdout_of(&version).contains("signkit"));
}

#[test]
fn bad_usage_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x").display().to_string();
    let cases: Vec<Vec<String>> = vec![
        vec!["--no-such-flag".into()],
        vec!["synth".into()],
        vec!["--set".into(), "no.such.key=1".into(), "synth".into(), "--out".into(), out.clone()],
        vec!["--set".into(), "mask.ratio=oops".into(), "synth".into(), "--out".into(), out.clone()],
        vec![
            "finetune".into(),
            "--task".into(),
            "pose".into(),
            "--corpus".into(),
            out.clone(),
            "--out".into(),
            out.clone(),
        ],
    ];
    for args in cases {
        let run = signkit(&args, &[]);
        assert_eq!(run.status.code(), Some(1), "{args:?}: {}", stderr_of(&run));
    }
}

#[test]
fn missing_artifacts_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let run = signkit(
        &[
            "pretrain".to_string(),
            "--corpus".into(),
            dir.path().join("nowhere").display().to_string(),
            "--out".into(),
            dir.path().join("out").display().to_string(),
        ],
        &[],
    );
    assert_eq!(run.status.code(), Some(1), "{}", stderr_of(&run));
    assert!(stderr_of(&run).starts_with("error:"));
}

#[test]
fn corrupt_sidecars_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus").display().to_string();
    let run_dir = dir.path().join("run");

    let synth = signkit(&fast_args(&["synth", "--out", &corpus]), &[]);
    assert!(synth.status.success(), "{}", stderr_of(&synth));
    let ft = signkit(
        &fast_args(&[
            "finetune",
            "--task",
            "islr",
            "--corpus",
            &corpus,
            "--out",
            &run_dir.display().to_string(),
        ]),
        &[],
    );
    assert!(ft.status.success(), "{}", stderr_of(&ft));

    // A sidecar that stops being JSON is an internal-invariant failure.
    std::fs::write(run_dir.join("islr.json"), b"{ not json").unwrap();
    let eval = signkit(
        &[
            "evaluate".to_string(),
            "--task".into(),
            "islr".into(),
            "--model".into(),
            run_dir.join("islr").display().to_string(),
            "--corpus".into(),
            corpus,
            "--out".into(),
            dir.path().join("eval").display().to_string(),
        ],
        &[],
    );
    assert_eq!(eval.status.code(), Some(2), "{}", stderr_of(&eval));
}

#[test]
fn the_full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus").display().to_string();
    let pre = dir.path().join("pre").display().to_string();
    let ft = dir.path().join("ft").display().to_string();
    let eval = dir.path().join("eval").display().to_string();

    let synth = signkit(&fast_args(&["synth", "--out", &corpus]), &[]);
    assert!(synth.status.success(), "{}", stderr_of(&synth));
    assert!(stdout_of(&synth).contains("wrote 6 samples"));
    assert!(Path::new(&corpus).join("manifest.jsonl").exists());
    assert!(Path::new(&corpus).join("synth_report.json").exists());

    let pretrain = signkit(&fast_args(&["pretrain", "--corpus", &corpus, "--out", &pre]), &[]);
    assert!(pretrain.status.success(), "{}", stderr_of(&pretrain));
    assert!(stdout_of(&pretrain).contains("final losses"));
    assert!(Path::new(&pre).join("pretrain.bin").exists());
    assert!(Path::new(&pre).join("pretrain.json").exists());

    let pre_stem = format!("{pre}/pretrain");
    let finetune = signkit(
        &fast_args(&[
            "finetune",
            "--task",
            "islr",
            "--corpus",
            &corpus,
            "--pretrained",
            &pre_stem,
            "--out",
            &ft,
        ]),
        &[],
    );
    assert!(finetune.status.success(), "{}", stderr_of(&finetune));
    assert!(stdout_of(&finetune).contains("top1_per_instance"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(&ft).join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["task"], "islr");
    assert!(report["metrics"]["top1_per_instance"].is_number());
    assert!(report["config_hash"].is_string());

    let model = format!("{ft}/islr");
    let evaluate = signkit(
        &[
            "evaluate", "--task", "islr", "--model", &model, "--corpus", &corpus, "--out", &eval,
            "--split", "holdout",
        ],
        &[],
    );
    assert!(evaluate.status.success(), "{}", stderr_of(&evaluate));
    let replay: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(&eval).join("report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(replay["n_eval"], 2);
}

#[test]
fn relative_outputs_resolve_against_the_environment_root() {
    let dir = tempfile::tempdir().unwrap();
    let synth = signkit(
        &fast_args(&["synth", "--out", "nested/corpus"]),
        &[("SIGNKIT_OUT_ROOT", dir.path())],
    );
    assert!(synth.status.success(), "{}", stderr_of(&synth));
    assert!(dir.path().join("nested/corpus/manifest.jsonl").exists());
}

#[test]
fn reruns_with_one_seed_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus").display().to_string();
    let synth = signkit(&fast_args(&["synth", "--out", &corpus]), &[]);
    assert!(synth.status.success(), "{}", stderr_of(&synth));

    let run = |out: &str| {
        let out_dir = dir.path().join(out).display().to_string();
        let ft = signkit(
            &fast_args(&["finetune", "--task", "islr", "--corpus", &corpus, "--out", &out_dir]),
            &[],
        );
        assert!(ft.status.success(), "{}", stderr_of(&ft));
        std::fs::read_to_string(dir.path().join(out).join("report.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
