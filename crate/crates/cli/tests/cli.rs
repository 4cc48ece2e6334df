use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tagshot::autodiff::checkpoint;

fn tagshot(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagshot"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &[&str] = &[
    "--set", "num_nodes=60",
    "--set", "num_classes=3",
    "--set", "steps=6",
    "--set", "batch_size=6",
    "--set", "text_layers=1",
    "--set", "neg_prompt_len=4",
    "--set", "text_max_len=16",
];

fn run(cmd: &str, extra: &[&str], cwd: &Path) -> Output {
    let mut args = vec![cmd];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    tagshot(&args, cwd)
}

#[test]
fn synth_writes_valid_identical_datasets() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tagshot(&["synth", "--seed", "1", "--out", "a"], dir.path()));
    ok(&tagshot(&["synth", "--seed", "1", "--out", "b"], dir.path()));
    for f in ["nodes.tsv", "edges.tsv", "classes.tsv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b").join(f)).unwrap(), "{}", f);
    }
    let g = tagshot::tag::load_tag(dir.path().join("a")).unwrap();
    assert!(tagshot::tag::validate(&g).is_empty());
    assert_eq!(g.num_nodes(), 300);
}

#[test]
fn config_errors_exit_two_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = tagshot(&["synth", "--set", "intra_edge_prob=1.5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("intra_edge_prob"));

    fs::write(dir.path().join("bad.cfg"), "stepz = 3\n").unwrap();
    let out = tagshot(&["pretrain", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    let out = tagshot(&["pretrain", "--mode", "sideways"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn printed_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let printed = ok(&tagshot(&["eval", "--print-config", "--seed", "4", "--set", "tune_lr=0.5"], dir.path()));
    fs::write(dir.path().join("run.cfg"), &printed).unwrap();
    let again = ok(&tagshot(&["eval", "--print-config", "--config", "run.cfg"], dir.path()));
    assert_eq!(printed, again);
    assert!(printed.contains("seed = 4\n"));
    assert!(printed.contains("tune_lr = 0.5\n"));
}

#[test]
fn pretrain_modes_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run("synth", &["--out", "data"], d));
    ok(&run("pretrain", &["--data", "data", "--out", "zs", "--mode", "zeroshot"], d));
    ok(&run("pretrain", &["--data", "data", "--out", "zs2", "--mode", "zeroshot"], d));
    assert_eq!(
        fs::read(d.join("zs/metrics.tsv")).unwrap(),
        fs::read(d.join("zs2/metrics.tsv")).unwrap()
    );
    let metrics = fs::read_to_string(d.join("zs/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(metrics.lines().all(|l| l.split('\t').count() == 7));

    let zs = checkpoint::load(d.join("zs/model.ckpt")).unwrap();
    assert!(zs.keys().any(|k| k.starts_with("negtext.")));
    assert!(zs.keys().any(|k| k.starts_with("negprompt.")));

    // one step vs six: the negative side never moves in fewshot mode
    ok(&run("pretrain", &["--data", "data", "--out", "fs1", "--mode", "fewshot", "--set", "steps=1"], d));
    ok(&run("pretrain", &["--data", "data", "--out", "fs6", "--mode", "fewshot"], d));
    let one = checkpoint::load(d.join("fs1/model.ckpt")).unwrap();
    let six = checkpoint::load(d.join("fs6/model.ckpt")).unwrap();
    for (k, v) in &one {
        if k.starts_with("negtext.") || k.starts_with("negprompt.") {
            assert_eq!(v, &six[k], "{}", k);
        }
    }
    assert_ne!(one["graph.w0"], six["graph.w0"]);
}

#[test]
fn eval_and_tune_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run("synth", &["--out", "data"], d));
    ok(&run("pretrain", &["--data", "data", "--out", "model"], d));

    let zs = ok(&run("eval", &["--data", "data", "--model", "model", "--out", "zs", "--prob-average", "--set", "ways=3", "--set", "runs=2"], d));
    let report = fs::read_to_string(d.join("zs/report.txt")).unwrap();
    assert_eq!(zs, report);
    assert_eq!(report.lines().count(), 3);
    assert!(report.lines().last().unwrap().starts_with("mean±std\t"));
    let preds = fs::read_to_string(d.join("zs/predictions_0.tsv")).unwrap();
    assert_eq!(preds.lines().count(), 60);
    assert!(preds.lines().all(|l| l.split('\t').count() == 3 + 3));

    let out = run("eval", &["--data", "data", "--model", "model", "--out", "fs", "--set", "ways=3", "--set", "shots=5", "--set", "runs=1", "--set", "tune_epochs=3", "--set", "prompt_len=4"], d);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("support size 15"));

    ok(&run("tune", &["--data", "data", "--model", "model", "--out", "tn", "--set", "ways=3", "--set", "shots=2", "--set", "tune_epochs=4", "--set", "prompt_len=4"], d));
    let prompt = checkpoint::load(d.join("tn/prompt.ckpt")).unwrap();
    assert_eq!(prompt["prompt.vectors"].shape(), &[4, 32]);
    assert_eq!(fs::read_to_string(d.join("tn/tune.tsv")).unwrap().lines().count(), 5);

    let missing = run("eval", &["--data", "data", "--model", "nowhere"], d);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn prob_average_on_fewshot_model_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&run("synth", &["--out", "data"], d));
    ok(&run("pretrain", &["--data", "data", "--out", "model", "--mode", "fewshot", "--set", "steps=1"], d));
    let out = run("eval", &["--data", "data", "--model", "model", "--prob-average", "--set", "ways=3"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_wrong_sign() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&tagshot(&["gradcheck", "--seed", "3"], dir.path()));
    let second = ok(&tagshot(&["gradcheck", "--seed", "3"], dir.path()));
    assert_eq!(first, second);
    let names: Vec<&str> = first.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(names, ["contrastive", "node_perturbation", "text_matching", "margin", "semantics_opposite", "total"]);
    for line in first.lines() {
        let err: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(err < 1e-4, "{}", line);
    }
    let bad = tagshot(&["gradcheck", "--inject-wrong-sign"], dir.path());
    assert_eq!(bad.status.code(), Some(4));
}
