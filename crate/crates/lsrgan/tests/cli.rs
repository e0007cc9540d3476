//! End-to-end checks of the `lsrgan` binary: command behavior, output
//! files, determinism and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lsrgan"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn lsrgan");
    assert!(
        out.status.success(),
        "lsrgan {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().expect("temp dir")
}

/// Small synthetic dataset plus a fast training profile.
fn write_desk_config(dir: &Path) -> PathBuf {
    let path = dir.join("desk.cfg");
    fs::write(
        &path,
        "epochs = 3\n\
         batch_size = 16\n\
         noise_dim = 8\n\
         hidden_dim = 32\n\
         m_g = 8\n\
         m_eval = 16\n\
         learning_rate = 1e-3\n\
         output_activation = tanh\n\
         synth_samples_per_class = 20\n",
    )
    .unwrap();
    path
}

fn synth(dir: &Path, cfg: &Path, extra: &[&str]) -> PathBuf {
    let data = dir.join("data");
    let mut args = vec![
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
    data
}

#[test]
fn synth_output_reloads_and_is_seed_deterministic() {
    let dir = tmp();
    let cfg = write_desk_config(dir.path());
    let d1 = synth(dir.path(), &cfg, &["--seed", "11"]);
    for f in ["visual.txt", "semantic.txt", "split.txt", "latents.txt"] {
        assert!(d1.join(f).exists(), "{f} missing");
        let text = fs::read_to_string(d1.join(f)).unwrap();
        assert!(text.starts_with("# "), "{f} lacks a config-echo header");
    }
    let d2 = dir.path().join("data2");
    run_ok(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        d2.to_str().unwrap(),
        "--seed",
        "11",
    ]);
    for f in ["visual.txt", "semantic.txt", "split.txt", "latents.txt"] {
        assert_eq!(
            fs::read(d1.join(f)).unwrap(),
            fs::read(d2.join(f)).unwrap(),
            "{f} differs across identical seeds"
        );
    }
}

#[test]
fn synth_zero_visual_noise_collapses_classes_to_points() {
    let dir = tmp();
    let cfg = write_desk_config(dir.path());
    let data = synth(dir.path(), &cfg, &["--sigma-x", "0"]);
    let text = fs::read_to_string(data.join("visual.txt")).unwrap();
    let mut by_label: std::collections::BTreeMap<&str, Vec<&str>> = Default::default();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let (label, rest) = line.split_once(' ').unwrap();
        by_label.entry(label).or_default().push(rest);
    }
    for (label, rows) in by_label {
        for r in &rows {
            assert_eq!(*r, rows[0], "class {label} has within-class variance");
        }
    }
}

#[test]
fn train_writes_trace_and_checkpoint_deterministically() {
    let dir = tmp();
    let cfg = write_desk_config(dir.path());
    let data = synth(dir.path(), &cfg, &[]);
    let r1 = dir.path().join("run1");
    let r2 = dir.path().join("run2");
    for r in [&r1, &r2] {
        run_ok(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            r.to_str().unwrap(),
            "--seed",
            "5",
        ]);
    }
    let trace = fs::read_to_string(r1.join("trace.csv")).unwrap();
    let rows: Vec<&str> = trace
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
        .collect();
    assert_eq!(rows.len(), 3, "one row per epoch");
    assert_eq!(
        fs::read(r1.join("trace.csv")).unwrap(),
        fs::read(r2.join("trace.csv")).unwrap(),
        "same seed must give identical traces"
    );
    assert!(r1.join("checkpoint.bin").exists());
}

#[test]
fn ablation_s1_zeroes_band_and_pivot_columns() {
    let dir = tmp();
    let cfg = write_desk_config(dir.path());
    let data = synth(dir.path(), &cfg, &[]);
    let run = dir.path().join("s1");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--ablation",
        "S1",
    ]);
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    let mut header = None;
    for line in trace.lines().filter(|l| !l.starts_with('#')) {
        if header.is_none() {
            header = Some(line.split(',').map(str::to_string).collect::<Vec<_>>());
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let h = header.as_ref().unwrap();
        let vp = cols[h.iter().position(|c| c == "visual_pivot").unwrap()];
        let sr = cols[h.iter().position(|c| c == "sr_seen").unwrap()];
        let sru = cols[h.iter().position(|c| c == "sr_unseen").unwrap()];
        assert_eq!(vp, "0");
        assert_eq!(sr, "0");
        assert_eq!(sru, "0");
    }
}

#[test]
fn eval_reports_expected_columns() {
    let dir = tmp();
    let cfg = write_desk_config(dir.path());
    let data = synth(dir.path(), &cfg, &[]);
    let run = dir.path().join("run");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let rep = dir.path().join("report");
    run_ok(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--metrics",
        "zsl,gzsl,auc,confidence",
        "--out",
        rep.to_str().unwrap(),
    ]);
    let gzsl = fs::read_to_string(rep.join("gzsl.csv")).unwrap();
    assert!(gzsl.lines().any(|l| l == "u,s,h"), "{gzsl}");
    let conf = fs::read_to_string(rep.join("confidence.csv")).unwrap();
    assert!(conf.lines().any(|l| l == "seen_mean,unseen_mean"), "{conf}");
    assert!(rep.join("confidence_top3.csv").exists());
    assert!(rep.join("summary.txt").exists());
    // curve CSV is ordered by the seen-accuracy column
    let curve = fs::read_to_string(rep.join("auc_curve.csv")).unwrap();
    let s_values: Vec<f64> = curve
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("s,"))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(!s_values.is_empty());
    for w in s_values.windows(2) {
        assert!(w[0] <= w[1], "S column must be monotone");
    }
}

#[test]
fn eval_is_deterministic_per_seed() {
    let dir = tmp();
    let cfg = write_desk_config(dir.path());
    let data = synth(dir.path(), &cfg, &[]);
    let run = dir.path().join("run");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let mut reports = Vec::new();
    for name in ["r1", "r2"] {
        let rep = dir.path().join(name);
        run_ok(&[
            "eval",
            "--checkpoint",
            run.join("checkpoint.bin").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--metrics",
            "zsl,gzsl",
            "--seed",
            "3",
            "--out",
            rep.to_str().unwrap(),
        ]);
        reports.push(fs::read(rep.join("gzsl.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn sweep_produces_one_row_per_value_and_clamps_n_c() {
    let dir = tmp();
    let cfg = write_desk_config(dir.path());
    let data = synth(dir.path(), &cfg, &[]);
    let out = dir.path().join("sweep");
    let output = bin()
        .args([
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--param",
            "n_c",
            "--values",
            "2,99",
            "--out",
            out.to_str().unwrap(),
        ])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("clamping"),
        "expected a clamp warning, got: {stderr}"
    );
    let rows: Vec<String> = fs::read_to_string(out.join("sweep.csv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("value"))
        .map(str::to_string)
        .collect();
    assert_eq!(rows.len(), 2);
}

#[test]
fn sweep_epsilon_zero_row_is_finite() {
    let dir = tmp();
    let cfg = write_desk_config(dir.path());
    let data = synth(dir.path(), &cfg, &[]);
    let out = dir.path().join("sweep");
    run_ok(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--param",
        "epsilon",
        "--values",
        "0,0.1",
        "--out",
        out.to_str().unwrap(),
    ]);
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let zero_row = text
        .lines()
        .find(|l| l.starts_with("0,"))
        .expect("epsilon=0 row present");
    for field in zero_row.split(',') {
        let v: f64 = field.parse().unwrap();
        assert!(v.is_finite());
    }
}

#[test]
fn exit_codes_distinguish_config_data_and_numeric_failures() {
    let dir = tmp();
    let cfg = write_desk_config(dir.path());
    let data = synth(dir.path(), &cfg, &[]);

    // unknown config key -> 2
    let out = bin()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("x").to_str().unwrap(),
            "--set",
            "bogus_key=1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // missing data directory -> 3
    let out = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            dir.path().join("nope").to_str().unwrap(),
            "--out",
            dir.path().join("y").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // absurd learning rate overflows the objective -> numeric abort 4
    let out = bin()
        .args([
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("z").to_str().unwrap(),
            "--set",
            "learning_rate=1e200",
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    // invalid LSRGAN_THREADS -> 2
    let out = bin()
        .args(["synth", "--out", dir.path().join("w").to_str().unwrap()])
        .env("LSRGAN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
