use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anomaly-ae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes the synthetic benchmark and returns (tempdir, dataset root).
fn dataset() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = run(&["synth", "--size", "32", "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (dir, data)
}

fn train(data: &Path, out: &Path, model: &str, epochs: &str) -> Output {
    run(&[
        "train",
        "--model",
        model,
        "--data",
        s(data),
        "--size",
        "32",
        "--epochs",
        epochs,
        "--codebook-size",
        "16",
        "--out",
        s(out),
    ])
}

#[test]
fn train_writes_checkpoint_and_loss_history() {
    let (dir, data) = dataset();
    assert!(data.join("healthy").is_dir() && data.join("diseased").is_dir());
    let out = dir.path().join("run");
    let o = train(&data, &out, "cae", "2");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("checkpoint.lae").is_file());
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().next(), Some("epoch,loss"));
}

#[test]
fn same_seed_gives_identical_loss_csv() {
    let (dir, data) = dataset();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&train(&data, &a, "cvae", "2")), 0);
    assert_eq!(code(&train(&data, &b, "cvae", "2")), 0);
    assert_eq!(
        fs::read(a.join("loss.csv")).unwrap(),
        fs::read(b.join("loss.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("checkpoint.lae")).unwrap(),
        fs::read(b.join("checkpoint.lae")).unwrap()
    );
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--model", "gan", "--data", s(dir.path())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("gan"));
    let o = run(&["train", "--size", "64", "--data", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = run(&["train", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    let o = run(&["compare", "--mode", "time_equivalent", "--time-budget", "3"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn evaluate_and_localize_outputs() {
    let (dir, data) = dataset();
    let out = dir.path().join("run");
    assert_eq!(code(&train(&data, &out, "vqvae", "2")), 0);

    let o = run(&["evaluate", "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().next(), Some("path,label,score,verdict"));
    assert_eq!(report.lines().count(), 1 + 28 + 28);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for key in [
        "mean_mse_healthy",
        "mean_mse_diseased",
        "delta",
        "delta_x1e3",
        "auc_roc",
        "threshold",
    ] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
    assert!(out.join("roc.csv").is_file());

    let image = fs::read_dir(data.join("diseased"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .min()
        .unwrap();
    let o = run(&[
        "localize",
        "--image",
        s(&image),
        "--out",
        s(&out),
        "--high-contrast",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stem = image.file_stem().unwrap().to_str().unwrap();
    for suffix in ["heatmap", "reconstruction", "heatmap_high_contrast"] {
        assert!(
            out.join(format!("{stem}_{suffix}.png")).is_file(),
            "{suffix}"
        );
    }

    let o = run(&[
        "localize",
        "--image",
        s(&dir.path().join("missing.png")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn damaged_checkpoints_are_reported() {
    let (dir, data) = dataset();
    let out = dir.path().join("run");
    assert_eq!(code(&train(&data, &out, "cae", "1")), 0);
    let good = fs::read(out.join("checkpoint.lae")).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let p = dir.path().join("magic.lae");
    fs::write(&p, &bad_magic).unwrap();
    let o = run(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&p),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(
        stderr(&o).contains("bad checkpoint header"),
        "{}",
        stderr(&o)
    );

    let mut bad_version = good.clone();
    bad_version[4] ^= 0xFF;
    fs::write(&p, &bad_version).unwrap();
    let o = run(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&p),
        "--out",
        s(&out),
    ]);
    assert!(stderr(&o).contains("unsupported version"), "{}", stderr(&o));

    fs::write(&p, &good[..good.len() - 7]).unwrap();
    let o = run(&[
        "evaluate",
        "--data",
        s(&data),
        "--checkpoint",
        s(&p),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));
}

#[test]
fn compare_table_has_three_rows() {
    let (dir, data) = dataset();
    let out = dir.path().join("cmp");
    let o = run(&[
        "compare",
        "--data",
        s(&data),
        "--size",
        "32",
        "--epochs",
        "1",
        "--codebook-size",
        "16",
        "--repeat",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(
        lines[0],
        "model,epochs,train_seconds,healthy_x1e3,diseased_x1e3,delta_x1e3,auc_roc"
    );
    let models: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(models, ["cae", "cvae", "vqvae"]);
    for kind in ["cae", "cvae", "vqvae"] {
        assert!(out.join(format!("{kind}.lae")).is_file());
    }
}

#[test]
fn time_equivalent_compare_runs_whole_epochs() {
    let (dir, data) = dataset();
    let out = dir.path().join("te");
    let o = run(&[
        "compare",
        "--data",
        s(&data),
        "--size",
        "32",
        "--epochs",
        "2",
        "--codebook-size",
        "16",
        "--mode",
        "time_equivalent",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(out.join("compare.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r["epochs"].as_u64().unwrap() >= 1);
    }
}

#[test]
fn flags_override_the_config_file() {
    let (dir, data) = dataset();
    let out = dir.path().join("cfg");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# desk run\nmodel = cae\ndata = {}\nsize = 32\nepochs = 3\nout = {}\n",
            s(&data),
            s(&out)
        ),
    )
    .unwrap();
    let o = run(&["train", "--config", s(&cfg), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    fs::write(&cfg, "epochs = 3\nlearning_rate = 0.1\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("run.cfg:2"), "{}", stderr(&o));
}

#[test]
fn commands_leave_the_dataset_untouched() {
    let (dir, data) = dataset();
    let listing = |root: &Path| {
        let mut v = Vec::new();
        for sub in ["healthy", "diseased", "masks"] {
            for e in fs::read_dir(root.join(sub)).unwrap() {
                let p = e.unwrap().path();
                v.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
        v.sort();
        v
    };
    let before = listing(&data);
    let out = dir.path().join("run");
    assert_eq!(code(&train(&data, &out, "cae", "1")), 0);
    assert_eq!(
        code(&run(&["evaluate", "--data", s(&data), "--out", s(&out)])),
        0
    );
    assert_eq!(listing(&data), before);
}
