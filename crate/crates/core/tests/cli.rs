use std::path::Path;
use std::process::Command;

fn hesp(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hesp"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

const SMALL: [&str; 14] = [
    "--videos_per_class",
    "6",
    "--frames_per_video",
    "4",
    "--num_frames",
    "4",
    "--patch_size",
    "16",
    "--epochs",
    "2",
    "--task",
    "custom",
    "--protocol.splits",
    "1",
];

#[test]
fn unknown_key_exits_with_validation_code() {
    let (code, _, err) = hesp(&["protocol", "--no_such_field", "1"]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("no_such_field"));
}

#[test]
fn invalid_value_exits_with_validation_code() {
    let (code, _, _) = hesp(&["train", "--lr", "-1"]);
    assert_eq!(code, 1);
}

#[test]
fn missing_config_file_is_a_validation_error() {
    let (code, _, _) = hesp(&["protocol", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code, 1);
}

#[test]
fn gradcheck_passes() {
    let (code, out, err) = hesp(&["gradcheck", "--directions", "4"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 7);
    assert!(out.lines().all(|l| l.ends_with("ok")));
}

#[test]
fn train_then_eval_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let mut args = vec!["train", "--run_dir", run_s];
    args.extend(SMALL);
    let (code, out, err) = hesp(&args);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("auroc"));
    for f in [
        "config.toml",
        "split.json",
        "loss_log.jsonl",
        "checkpoints/final.json",
        "scores.tsv",
        "report.json",
        "masks.json",
        "scores.png",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ckpt = run.join("checkpoints/final.json");
    let eval_dir = dir.path().join("eval");
    let cfg = run.join("config.toml");
    let mut args = vec![
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ];
    args.extend(["--eval.batch_size", "7"]);
    let (code, _, err) = hesp(&args);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        std::fs::read_to_string(eval_dir.join("scores.tsv")).unwrap(),
        std::fs::read_to_string(run.join("scores.tsv")).unwrap()
    );

    let png = dir.path().join("again.png");
    let scores = run.join("scores.tsv");
    let (code, _, err) = hesp(&[
        "plot",
        "--scores",
        scores.to_str().unwrap(),
        "--out",
        png.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(std::fs::metadata(&png).unwrap().len() > 0);
}

#[test]
fn eval_with_another_encoder_is_incompatible() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--run_dir", run.to_str().unwrap()];
    args.extend(SMALL);
    assert_eq!(hesp(&args).0, 0);
    let ckpt = run.join("checkpoints/final.json");
    let mut args = vec![
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--encoder.mock.seed",
        "5",
    ];
    args.extend(SMALL);
    let (code, _, err) = hesp(&args);
    assert_eq!(code, 1, "{err}");
}

#[test]
fn synth_and_split_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (code, _, err) = hesp(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--videos_per_class",
        "2",
        "--frames_per_video",
        "2",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(dir_has_files(&data));

    let splits = dir.path().join("splits.json");
    let (code, out, err) = hesp(&["split", "--out", splits.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 4);
    assert!(splits.exists());

    let (code, _, _) = hesp(&["split", "--task", "2"]);
    assert_eq!(code, 1, "7 synthetic classes cannot host task 2");
}

fn dir_has_files(p: &Path) -> bool {
    std::fs::read_dir(p)
        .map(|mut d| d.next().is_some())
        .unwrap_or(false)
}
