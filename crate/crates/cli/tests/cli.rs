use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deltafuse_core::run::RunMetrics;
use deltafuse_core::{OpKind, StageTag};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deltafuse"));
    c.env_remove("DELTAFUSE_OUT");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_RUN: &str = r#"
seed = 1
split = [0.6, 0.2, 0.2]

[data.synth]
samples = 60

[stages.selfattn_l]
epochs = 2
lr = 3e-3
batch_size = 8
weight_decay = 0.0

[stages.selfattn_v]
epochs = 2
lr = 3e-3
batch_size = 8
weight_decay = 0.0

[stages.selfattn_a]
epochs = 2
lr = 3e-3
batch_size = 8
weight_decay = 0.0

[stages.dcca]
epochs = 2
lr = 1e-3
batch_size = 4
weight_decay = 0.0

[stages.crossattn_fused]
epochs = 3
lr = 5e-3
batch_size = 8
weight_decay = 0.0
"#;

fn small_config(dir: &Path) {
    fs::write(dir.join("run.toml"), SMALL_RUN).unwrap();
}

#[test]
fn synth_is_deterministic_and_reports_a_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&["synth", "--seed", "7", "--out", "a"], dir.path());
    let b = run(&["synth", "--seed", "7", "--out", "b"], dir.path());
    assert!(a.status.success() && b.status.success());
    let fa = fs::read(dir.path().join("a/dataset.jsonl")).unwrap();
    assert_eq!(fa, fs::read(dir.path().join("b/dataset.jsonl")).unwrap());
    let total: usize = stdout(&a)
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 1000);
}

#[test]
fn synth_with_zero_samples_writes_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.toml"), "samples = 0\n").unwrap();
    let o = run(&["synth", "--config", "spec.toml", "--out", "z"], dir.path());
    assert!(o.status.success());
    assert_eq!(fs::read(dir.path().join("z/dataset.jsonl")).unwrap().len(), 0);
}

#[test]
fn train_writes_all_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    let o = run(&["train", "--config", "run.toml", "--out", "r1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r1 = dir.path().join("r1");
    for tag in StageTag::ALL {
        assert!(r1.join(format!("checkpoints/{tag}.toml")).exists(), "{tag}");
        assert!(r1.join(format!("checkpoints/{tag}.bin")).exists(), "{tag}");
    }
    let log = fs::read_to_string(r1.join("train_log.tsv")).unwrap();
    // header plus 2+2+2+2+3 epochs
    assert_eq!(log.lines().count(), 12);

    let o = run(&["train", "--config", "run.toml", "--out", "r2"], dir.path());
    assert!(o.status.success());
    let m1 = fs::read_to_string(r1.join("metrics.toml")).unwrap();
    let m2 = fs::read_to_string(dir.path().join("r2/metrics.toml")).unwrap();
    assert_eq!(m1, m2);
    let metrics: RunMetrics = toml::from_str(&m1).unwrap();
    assert_eq!(metrics.test.unwrap().fused.samples, 12);
}

#[test]
fn stage_filter_trains_only_the_named_stage() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    assert!(run(&["train", "--config", "run.toml", "--out", "r"], dir.path()).status.success());
    let ck = dir.path().join("r/checkpoints");
    let before: Vec<Vec<u8>> = StageTag::ALL
        .iter()
        .map(|t| fs::read(ck.join(format!("{t}.bin"))).unwrap())
        .collect();
    // a different seed, so retraining the stage cannot reproduce its old weights
    let o = run(
        &["train", "--config", "run.toml", "--out", "r", "--stage", "selfattn_v", "--seed", "2"],
        dir.path(),
    );
    assert!(o.status.success());
    for (tag, old) in StageTag::ALL.iter().zip(&before) {
        let new = fs::read(ck.join(format!("{tag}.bin"))).unwrap();
        assert_eq!(&new == old, *tag != StageTag::SelfattnV, "{tag}");
    }
    // the log is append-only
    let log = fs::read_to_string(dir.path().join("r/train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 14);
}

#[test]
fn eval_matches_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    assert!(run(&["train", "--config", "run.toml", "--out", "r"], dir.path()).status.success());
    let o = run(
        &["eval", "--config", "run.toml", "--checkpoints", "r/checkpoints", "--out", "e"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trained: RunMetrics = toml::from_str(&fs::read_to_string(dir.path().join("r/metrics.toml")).unwrap()).unwrap();
    let evaluated = fs::read_to_string(dir.path().join("e/eval.toml")).unwrap();
    assert_eq!(evaluated, trained.test.unwrap().to_toml());
}

#[test]
fn eval_errors_have_the_right_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--align", "sideways"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["eval", "--checkpoints", "missing", "--data", "x.jsonl", "--out", "e"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "jobs = 0\n").unwrap();
    assert_eq!(run(&["train", "--config", "bad.toml", "--out", "b"], dir.path()).status.code(), Some(2));
    fs::write(dir.path().join("bad.toml"), "no_such_field = 1\n").unwrap();
    assert_eq!(run(&["paramcount", "--config", "bad.toml"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["train", "--stage", "stage9"], dir.path()).status.code(), Some(2));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["synth", "--seed", "1"])
        .env("DELTAFUSE_OUT", "from_env")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from_env/dataset.jsonl").exists());
}

#[test]
fn gradcheck_lists_every_op_once_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    for kind in OpKind::ALL.into_iter().filter(|k| *k != OpKind::Leaf) {
        let hits = out.lines().filter(|l| l.split_whitespace().next() == Some(kind.name())).count();
        assert_eq!(hits, 1, "{}", kind.name());
    }
    assert!(out.lines().any(|l| l.starts_with("pipeline")));
}

#[test]
fn gradcheck_fails_on_a_corrupted_rule() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--fault", "masked_softmax"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("masked_softmax") && l.ends_with("FAIL")));
}

#[test]
fn paramcount_reports_a_ratio_near_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["paramcount"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    let ratio: f64 = out
        .lines()
        .find(|l| l.starts_with("ratio"))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.45..=0.65).contains(&ratio), "{ratio}");
}
