use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_projood"))
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// The synthetic preset with a shorter schedule, written into `dir`.
fn quick_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(preset("synthetic.toml")).unwrap();
    let text = text.replace("epochs = 250", "epochs = 30");
    assert!(text.contains("epochs = 30"));
    let path = dir.join("quick.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn check(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_synthetic_run_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let result = run(&["run", "--config", s(&preset("synthetic.toml")), "--out", s(&out)]);
    check(&result);
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("id_test_accuracy"));
    for f in ["centroids.bin", "fusion.bin", "run_summary.txt", "reports/summary.csv", "scores/ood_ring.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn step_commands_reproduce_the_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let full = tmp.path().join("full");
    check(&run(&["run", "--config", s(&cfg), "--out", s(&full)]));

    let steps = tmp.path().join("steps");
    check(&run(&["gen-centroids", "--config", s(&cfg), "--out", s(&steps)]));
    check(&run(&["train", "--config", s(&cfg), "--out", s(&steps), "--centroids", s(&steps.join("centroids.bin"))]));
    let checkpoint = steps.join("checkpoint_epoch21.bin");
    assert!(checkpoint.is_file());
    check(&run(&[
        "score",
        "--config",
        s(&cfg),
        "--out",
        s(&steps),
        "--checkpoint",
        s(&checkpoint),
        "id_train",
        "id_test",
        "cluster:fit",
        "ring",
        "noise",
    ]));
    let scores = steps.join("scores");
    let fuse = run(&[
        "fuse",
        "--config",
        s(&cfg),
        "--out",
        s(&steps),
        s(&scores.join("id_train.csv")),
        s(&scores.join("fit_cluster.csv")),
    ]);
    check(&fuse);
    let text = String::from_utf8_lossy(&fuse.stdout);
    assert!(text.contains("cos_alpha, max_cos_beta, cos_gamma, norm_fn"), "{text}");
    check(&run(&[
        "eval",
        "--config",
        s(&cfg),
        "--out",
        s(&steps),
        "--fusion",
        s(&steps.join("fusion.bin")),
        s(&scores.join("id_test.csv")),
        s(&scores.join("ood_ring.csv")),
        s(&scores.join("ood_noise.csv")),
    ]));

    for f in ["scores/id_train.csv", "scores/ood_ring.csv", "fusion.bin", "reports/eval_ring_S_svm.txt", "reports/eval_noise_S_gamma.txt"] {
        assert!(fs::read(full.join(f)).unwrap() == fs::read(steps.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    check(&run(&["run", "--config", s(&cfg), "--out", s(&a)]));
    check(&run(&["run", "--config", s(&cfg), "--out", s(&b)]));
    for f in ["scores/id_test.csv", "scores/ood_noise.csv", "reports/summary.csv", "run_summary.txt"] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = tmp.path().join("c");
    check(&run(&["run", "--config", s(&cfg), "--out", s(&c), "--seed", "99"]));
    assert_ne!(fs::read(a.join("scores/id_test.csv")).unwrap(), fs::read(c.join("scores/id_test.csv")).unwrap());
}

#[test]
fn bn_ablation_reports_both_settings() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let out = tmp.path().join("ablate");
    check(&run(&["ablate", "--config", s(&cfg), "--out", s(&out), "--axis", "bn_relu"]));
    let csv = fs::read_to_string(out.join("ablation_bn_relu.csv")).unwrap();
    for ood in ["ring", "cluster", "noise"] {
        for setting in ["on", "off"] {
            let rows = csv
                .lines()
                .filter(|l| l.starts_with(&format!("{setting},")) && l.contains(&format!(",{ood},S_gamma,")))
                .count();
            assert_eq!(rows, 1, "{setting}/{ood} in\n{csv}");
        }
    }
    assert!(out.join("bn_relu=on/reports/eval_ring_S_gamma.txt").is_file());
    assert!(out.join("bn_relu=off/reports/eval_ring_S_gamma.txt").is_file());
}

#[test]
fn eval_with_empty_ood_scores_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config(tmp.path());
    let id = tmp.path().join("id.csv");
    fs::write(
        &id,
        "sample_id,cos_alpha,max_cos_beta,cos_gamma,norm_fn,baseline_msp,predicted_class,label\n\
         0,1,0.9,0.8,2.5,0.9,0,ID\n",
    )
    .unwrap();
    let empty = tmp.path().join("ood_empty.csv");
    fs::write(&empty, "sample_id,cos_alpha,max_cos_beta,cos_gamma,norm_fn,baseline_msp,predicted_class,label\n").unwrap();
    let out = run(&["eval", "--config", s(&cfg), "--out", s(tmp.path()), s(&id), s(&empty)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(&empty, "").unwrap();
    let out = run(&["eval", "--config", s(&cfg), "--out", s(tmp.path()), s(&id), s(&empty)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[datasets]\nid = \"x\"\n").unwrap();
    assert_eq!(run(&["run", "--config", s(&bad)]).status.code(), Some(1));
    let cfg = quick_config(tmp.path());
    let out = run(&["ablate", "--config", s(&cfg), "--out", s(tmp.path()), "--axis", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&[
        "score",
        "--config",
        s(&cfg),
        "--out",
        s(tmp.path()),
        "--checkpoint",
        s(&tmp.path().join("missing.bin")),
        "id_test",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
}
