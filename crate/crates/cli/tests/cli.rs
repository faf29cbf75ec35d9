use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
critical_layers = [1, 2, 3]
batch_size = 3
n_batches = 1
n_heldout = 3

[world]
seed = 3
n_subjects = 24
n_relations = 4
n_objects = 4
n_background = 12

[model]
d_model = 16
d_ffn = 32
n_layers = 4
n_heads = 2
max_seq = 32

[train]
epochs = 20
"#;

fn editlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_editlab")).args(args).current_dir(dir).output().unwrap()
}

fn ok(out: Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}: {stderr}", out.status);
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn synth_writes_the_world() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let stdout = ok(editlab(&["synth", "--config", "tiny.toml", "--out", "world"], dir.path()));
    assert!(stdout.starts_with("24 facts"), "{stdout}");
    let facts = std::fs::read_to_string(dir.path().join("world/facts.jsonl")).unwrap();
    assert_eq!(facts.lines().count(), 24);
    for f in ["corpus.txt", "background.txt", "vocab.txt"] {
        assert!(dir.path().join("world").join(f).exists(), "{f}");
    }
}

#[test]
fn pretrain_edit_eval_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.toml"), TINY).unwrap();
    ok(editlab(&["pretrain", "--config", "tiny.toml", "--out", "lm"], p));
    assert!(p.join("lm/model.bin").exists() && p.join("lm/vocab.txt").exists());

    let common = ["--config", "tiny.toml", "--model", "lm/model.bin"];
    let stdout = ok(editlab(&[&["edit", "--method", "blue", "--out", "edit"][..], &common].concat(), p));
    assert!(stdout.starts_with("blue: efficacy"), "{stdout}");
    let report = std::fs::read_to_string(p.join("edit/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(report.starts_with("batch,method,efficacy,generalization,specificity,fluency,consistency"));
    assert!(p.join("edit/bounds.csv").exists() && p.join("edit/summary.json").exists());

    let stdout = ok(editlab(&["eval", "--config", "tiny.toml", "--model", "edit/model.bin", "--out", "ev"], p));
    assert!(stdout.contains("3 facts, model version"), "{stdout}");
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("ev/eval.json")).unwrap()).unwrap();
    assert!(eval["efficacy"].as_f64().unwrap() <= 1.0);

    ok(editlab(&[&["dump-hidden", "--layer", "2", "--out", "dump"][..], &common].concat(), p));
    let dump = std::fs::read_to_string(p.join("dump/hidden_layer2.csv")).unwrap();
    assert_eq!(dump.lines().count(), 25);
}

#[test]
fn bad_inputs_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    std::fs::write(dir.path().join("bad.toml"), "batch = 3\n").unwrap();
    let cases: [&[&str]; 4] = [
        &["run", "--config", "tiny.toml", "--method", "rome"],
        &["run", "--config", "bad.toml"],
        &["eval", "--config", "tiny.toml"],
        &["run", "--config", "tiny.toml", "--model", "missing.bin"],
    ];
    for args in cases {
        let out = editlab(args, dir.path());
        assert!(!out.status.success(), "{args:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(stderr.starts_with("error: "), "{args:?}: {stderr}");
    }
    let out = editlab(&["run", "--method", "rome", "--config", "tiny.toml"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rome"));
}
