use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcbsvm"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, name: &str, n: &str, seed: &str) {
    let o = run(dir, &["synth", "--n", n, "--separation", "5", "--seed", seed, "--out", name]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_defaults_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["train", "predict", "active-learn", "rank", "gradcheck", "synth"] {
        let o = run(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(stdout(&o).contains("[default:"), "{sub}");
    }
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    assert_eq!(code(&run(dir.path(), &["--version"])), 0);
}

#[test]
fn usage_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["train", "--no-such-flag"])), 3);
    assert_eq!(code(&run(dir.path(), &["bogus"])), 3);
    synth(dir.path(), "d.csv", "60", "1");
    assert_eq!(code(&run(dir.path(), &["train", "--data", "d.csv", "--lr", "-1"])), 3);
    assert_eq!(code(&run(dir.path(), &["train", "--data", "d.csv", "--inducing", "0"])), 3);
}

#[test]
fn ingestion_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["train", "--data", "missing.csv"])), 1);
    std::fs::write(dir.path().join("bad.csv"), "a,target\n1,x\nzz,y\n").unwrap();
    let o = run(dir.path(), &["train", "--data", "bad.csv"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains('3'));
}

#[test]
fn train_then_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d.csv", "150", "2");
    let o = run(
        dir.path(),
        &["train", "--data", "d.csv", "--inducing", "8", "--method", "coord_ascent", "--epochs", "20", "--out", "m.json"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["m.json", "m.json.trace.csv", "m.json.manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let trace = std::fs::read_to_string(dir.path().join("m.json.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 21);
    let o = run(dir.path(), &["predict", "--model", "m.json", "--data", "d.csv", "--out", "p.csv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let acc: f64 = stdout(&o).split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(acc > 0.9, "{acc}");
    let pred = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let header = pred.lines().next().unwrap();
    let cols: Vec<&str> = header.split(',').collect();
    assert_eq!(cols[..3], ["row", "predicted", "variation_ratio"]);
    assert_eq!(cols.len(), 3 + 3 + 3 + 1);
    for l in ["1", "2", "3"] {
        assert!(cols[3..6].contains(&format!("mean_{l}").as_str()));
        assert!(cols[6..9].contains(&format!("softmax_{l}").as_str()));
    }
    assert!(header.ends_with("true_label"));
    assert_eq!(pred.lines().count(), 151);
}

#[test]
fn zero_epochs_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "d.csv", "60", "3");
    let o = run(dir.path(), &["train", "--data", "d.csv", "--inducing", "4", "--epochs", "0", "--out", "m.json"]);
    assert_eq!(code(&o), 0);
    let trace = std::fs::read_to_string(dir.path().join("m.json.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
    let model: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert!(model["mu"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).all(|v| v.as_f64() == Some(0.0)));
}

#[test]
fn gradcheck_passes_and_detects_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--instances", "3"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(dir.path().join("gradcheck.txt").exists());
    let o = run(dir.path(), &["gradcheck", "--perturb-analytic", "1e-3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("worst relative error"));
}

#[test]
fn active_learning_writes_one_row_per_query() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "pool.csv", "130", "4");
    synth(dir.path(), "test.csv", "60", "5");
    let o = run(
        dir.path(),
        &[
            "active-learn", "--pool", "pool.csv", "--test", "test.csv", "--budget", "100", "--epochs", "3",
            "--vr-samples", "16", "--seed", "1", "--seed", "2", "--out-dir", "al",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for s in [1, 2] {
        let t = std::fs::read_to_string(dir.path().join(format!("al/trace_variation_ratio_seed{s}.csv"))).unwrap();
        assert_eq!(t.lines().count(), 102);
    }
    let agg = std::fs::read_to_string(dir.path().join("al/aggregate_variation_ratio.csv")).unwrap();
    assert_eq!(agg.lines().count(), 102);
    assert!(dir.path().join("al/manifest_variation_ratio.json").exists());
}

#[test]
fn active_learning_stops_when_the_pool_is_exhausted() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "pool.csv", "20", "4");
    synth(dir.path(), "test.csv", "30", "6");
    let o = run(
        dir.path(),
        &["active-learn", "--pool", "pool.csv", "--test", "test.csv", "--budget", "50", "--epochs", "2", "--vr-samples", "8"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t = std::fs::read_to_string(dir.path().join("al_out/trace_variation_ratio_seed0.csv")).unwrap();
    // header, initial row, then every one of the 17 unlabeled pool points
    assert_eq!(t.lines().count(), 19);
}

#[test]
fn rank_prints_tie_example() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.csv"), "dataset,method,accuracy\nd,m1,1.0\nd,m2,1.0\nd,m3,0.8\n").unwrap();
    let o = run(dir.path(), &["rank", "--table", "t.csv"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("1.5000"));
    assert!(out.contains("3.0000"));
    let r = std::fs::read_to_string(dir.path().join("ranks.csv")).unwrap();
    let vals: Vec<f64> = r.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(vals, vec![1.5, 1.5, 3.0]);
}
