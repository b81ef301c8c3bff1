use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--side",
    "16",
    "--train-classes",
    "6",
    "--val-classes",
    "2",
    "--test-classes",
    "8",
    "--images-per-class",
    "16",
];

fn ssformers(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssformers"))
        .current_dir(dir)
        .env("SSF_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn with_small(args: &[&str]) -> Vec<String> {
    args.iter().chain(SMALL).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = ssformers(dir, &refs);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ssformers(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(ssformers(dir.path(), &["eval", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(ssformers(dir.path(), &["eval", "--out", "o"]).status.code(), Some(1));
    let missing = ssformers(dir.path(), &["eval", "--checkpoint", "missing.ckpt", "--out", "o"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.ckpt"));
    assert_eq!(ssformers(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["selftest".to_string()]);
    let text = stdout(&out);
    assert!(text.contains("end-to-end meta-loss"));
    assert!(!text.contains("FAILED"), "{text}");
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), &with_small(&["gen-data", "--out", "a", "--seed", "1"]));
    run(dir.path(), &with_small(&["gen-data", "--out", "b", "--seed", "1"]));
    let (a, b) = (tree(&dir.path().join("a")), tree(&dir.path().join("b")));
    assert_eq!(a.len(), 16 * 16 + 1);
    assert_eq!(a, b);
}

#[test]
fn train_eval_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    run(p, &with_small(&["gen-data", "--out", "data", "--seed", "2"]));
    let common = ["--data", "data", "--image-side", "16", "--grid", "2x2"];
    let mut args = vec!["train", "--out", "tr", "--epochs", "1", "--episodes-per-epoch", "2"];
    args.extend(common);
    let trained = run(p, &args.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    assert!(stdout(&trained).contains("epoch 1: loss"));
    assert!(p.join("tr/model.ckpt").exists());
    assert!(p.join("tr/run_config.json").exists());

    let eval_args: Vec<String> = [
        "eval",
        "--checkpoint",
        "tr/model.ckpt",
        "--n-way",
        "5",
        "--m-shot",
        "1",
        "--episodes",
        "30",
        "--seed",
        "7",
        "--out",
        "ev",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let first = stdout(&run(p, &eval_args));
    let line = first.lines().next().unwrap();
    let value = line.strip_prefix("5-way 1-shot: ").expect(line);
    let (mean, ci) = value.split_once('±').unwrap();
    assert_eq!(mean.split_once('.').unwrap().1.len(), 2, "{line}");
    assert_eq!(ci.split_once('.').unwrap().1.len(), 2, "{line}");
    assert!(mean.parse::<f64>().is_ok() && ci.parse::<f64>().is_ok());

    let csv = std::fs::read_to_string(p.join("ev/results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "run_id,command,n_way,m_shot,b_query,episodes,variant,mean_acc,ci95,wall_seconds"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[1..7], &["eval", "5", "1", "15", "30", "full"]);

    // The resolved config reproduces the evaluation, including the data
    // source recorded in the checkpoint.
    let replay: Vec<String> = ["eval", "--config", "ev/run_config.json", "--out", "ev2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    assert_eq!(stdout(&run(p, &replay)), first);
}

#[test]
fn ablate_lists_variants_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_small(&[
        "ablate",
        "--out",
        "ab",
        "--variants",
        "full,no_sstl",
        "--grid",
        "2x2",
        "--epochs",
        "1",
        "--episodes-per-epoch",
        "1",
        "--episodes",
        "4",
    ]);
    let text = stdout(&run(dir.path(), &args));
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{text}");
    assert!(rows[0].starts_with("full "));
    assert!(rows[1].starts_with("no_sstl "));
    let csv = std::fs::read_to_string(dir.path().join("ab/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn semi_reports_admission() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let train = with_small(&["train", "--out", "tr", "--grid", "2x2", "--epochs", "1", "--episodes-per-epoch", "1"]);
    run(p, &train);
    let semi: Vec<String> = [
        "semi",
        "--checkpoint",
        "tr/model.ckpt",
        "--episodes",
        "4",
        "--b-query",
        "2",
        "--unlabeled-per-class",
        "2",
        "--distractors",
        "--distractor-classes",
        "2",
        "--out",
        "semi",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let text = stdout(&run(p, &semi));
    assert!(text.starts_with("5-way 1-shot: "), "{text}");
    assert!(text.contains("admitted patches: in-class"), "{text}");
}
