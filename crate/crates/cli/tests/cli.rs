use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gradsift(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradsift"))
        .args(args)
        .current_dir(cwd)
        .env_remove("RUST_LOG")
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

const CONFIG: &str = "\
dataset.kind=csv
dataset.train=data/train.csv
dataset.test=data/test.csv
model.kind=mlp
model.hidden=12
train.epochs=5
train.decay_epochs=3
train.probes=10
select.policies=random,max_gradient,nonextreme,gradient_cdf
select.fractions=0.1,0.5
select.seeds=1,2
diag.bound_batches=4
diag.overlap_trials=5
";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = gradsift(
        &["synth", "--kind", "diverse", "--classes", "3", "--dim", "6", "--n", "300", "--test-n", "120", "--seed", "4", "--out", "data"],
        dir.path(),
    );
    assert!(ok(&out).contains("train.csv"));
    fs::write(dir.path().join("exp.cfg"), CONFIG).unwrap();
    dir
}

#[test]
fn analyze_is_replayable_byte_for_byte() {
    let dir = workspace();
    let a = ok(&gradsift(&["analyze", "--config", "exp.cfg", "--out", "run_a"], dir.path()));
    ok(&gradsift(&["analyze", "--config", "exp.cfg", "--out", "run_b"], dir.path()));
    assert!(a.contains("full-data test accuracy"));
    let mut compared = 0;
    for name in ["scores.csv", "scores.csv.meta", "report.csv", "summary.txt"] {
        let x = fs::read(dir.path().join("run_a").join(name)).unwrap();
        let y = fs::read(dir.path().join("run_b").join(name)).unwrap();
        assert_eq!(x, y, "{name}");
        compared += 1;
    }
    for entry in fs::read_dir(dir.path().join("run_a/subsamples")).unwrap() {
        let name = entry.unwrap().file_name();
        let x = fs::read(dir.path().join("run_a/subsamples").join(&name)).unwrap();
        let y = fs::read(dir.path().join("run_b/subsamples").join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
        compared += 1;
    }
    assert_eq!(compared, 4 + 4 * 2 * 2);
    let report = fs::read_to_string(dir.path().join("run_a/report.csv")).unwrap();
    assert!(report.starts_with("policy,fraction,seed,test_acc\n"));
    assert_eq!(report.lines().count(), 1 + 16);
    let manifest = fs::read_to_string(dir.path().join("run_a/manifest.txt")).unwrap();
    assert!(manifest.ends_with("complete=true\n"));
}

#[test]
fn stage_commands_chain() {
    let dir = workspace();
    let p = dir.path();
    let train = ok(&gradsift(&["train", "--config", "exp.cfg", "--out", "t"], p));
    assert!(train.contains("best epoch"));
    ok(&gradsift(&["score", "--config", "exp.cfg", "--out", "t", "--model", "t/model.json"], p));
    let sub = ok(&gradsift(
        &["subsample", "--config", "exp.cfg", "--out", "t", "--scores", "t/scores.csv", "--policy", "max_gradient", "--fraction", "0.2", "--seed", "3"],
        p,
    ));
    assert!(sub.contains("selected 54 of 270"));
    assert!(p.join("t/max_gradient_f0.2_s3.idx").is_file());
    let retrain = ok(&gradsift(
        &["retrain", "--config", "exp.cfg", "--out", "t", "--scores", "t/scores.csv", "--policy", "random", "--fraction", "0.2", "--seed", "3"],
        p,
    ));
    assert!(retrain.contains("policy,fraction,seed,test_acc\nrandom,0.2,3,"));
    ok(&gradsift(
        &[
            "diagnose", "--config", "exp.cfg", "--out", "d", "--scores", "t/scores.csv", "--compare", "t/scores.csv",
            "--probes", "t/probes.csv", "--model", "t/model.json", "--ks", "1,10,270",
        ],
        p,
    ));
    for (name, header) in [
        ("entropy.csv", "k,entropy_bits,baseline_bits"),
        ("overlap.csv", "k,overlap,pair"),
        ("heatmap.csv", "probe_index,epoch,neg_log_mag"),
        ("bounds.csv", "batch_id,lhs,rhs"),
    ] {
        let text = fs::read_to_string(p.join("d").join(name)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{name}");
    }
    let overlap = fs::read_to_string(p.join("d/overlap.csv")).unwrap();
    assert!(overlap.lines().any(|l| l.starts_with("270,1,")));
}

#[test]
fn failures_exit_nonzero_with_stage() {
    let dir = workspace();
    let p = dir.path();
    let out = gradsift(&["analyze", "--config", "exp.cfg", "--set", "dataset.train=data/nope.csv", "--out", "bad"], p);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("load:"), "{err}");
    assert!(fs::read_to_string(p.join("bad/manifest.txt")).unwrap().contains("complete=false"));

    let out = gradsift(&["analyze", "--set", "train.bogus=1"], p);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `train.bogus`"));

    let out = gradsift(
        &["subsample", "--config", "exp.cfg", "--scores", "missing.csv", "--policy", "random", "--fraction", "0.1"],
        p,
    );
    assert!(!out.status.success());
}
