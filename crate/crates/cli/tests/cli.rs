use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mtwin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtwin"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = mtwin(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path, name: &str, seed: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen-data", "--seed", seed, "--jobs", "1", "--out", s(&out)];
    args.extend_from_slice(&["--samples", "12", "--grid", "24", "--truth-stride", "2"]);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn bend_characterize_emits_six_angles() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["bend-characterize", "--grid", "40", "--out", s(dir.path())]);
    let csv = fs::read_to_string(dir.path().join("bend.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "theta_deg,aligned,transverse");
    assert_eq!(rows.len(), 7);
    let aligned: Vec<f64> = rows[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(aligned.windows(2).all(|w| w[1] < w[0]));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "bend-characterize");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn gen_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_dataset(dir.path(), "a", "5", &[]);
    let b = small_dataset(dir.path(), "b", "5", &[]);
    let c = small_dataset(dir.path(), "c", "6", &[]);
    let frames = |d: &Path| fs::read(d.join("frames.bin")).unwrap();
    assert_eq!(frames(&a), frames(&b));
    assert_ne!(frames(&a), frames(&c));
    for f in [
        "pairs.csv",
        "dataset.json",
        "norm_stats.json",
        "truth/000003.ply",
        "manifest.json",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(a.join("frames.bin")).unwrap().len(), 36 * 484);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("dataset.json")).unwrap()).unwrap();
    for sample in meta["samples"].as_array().unwrap() {
        let dz = sample["delta_z_mm"].as_f64().unwrap();
        assert!((0.0..=25.0).contains(&dz));
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"version": 1, "seed": 3, "bend_characterize": {"grid": 30, "angles": [0, 60, 120]}}"#,
    )
    .unwrap();
    let out = dir.path().join("bend");
    ok(&[
        "bend-characterize",
        "--config",
        s(&cfg),
        "--angles",
        "0,75",
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("bend.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["grid"], 30);

    fs::write(&cfg, r#"{"version": 1, "bend_characterize": {"gird": 30}}"#).unwrap();
    assert_eq!(
        mtwin(&["bend-characterize", "--config", s(&cfg), "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
    fs::write(&cfg, r#"{"version": 7}"#).unwrap();
    assert_eq!(
        mtwin(&["bend-characterize", "--config", s(&cfg), "--out", s(&out)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn error_classes_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = dir.path().join("out");
    let code = |args: &[&str]| mtwin(args).status.code();
    assert_eq!(code(&["train-ae", "--out", s(&out)]), Some(2));
    assert_eq!(code(&["train-ae", "--data", s(&missing), "--out", s(&out)]), Some(3));
    assert_eq!(code(&["gen-data", "--samples", "0", "--out", s(&out)]), Some(2));
    let data = small_dataset(dir.path(), "d", "1", &[]);
    // writing into the input dataset is refused
    let inside = data.join("run");
    assert_eq!(code(&["train-ae", "--data", s(&data), "--out", s(&inside)]), Some(2));
    assert!(!inside.exists());
    // a learning rate this large overflows within the first epochs
    assert_eq!(
        code(&[
            "train-ae",
            "--data",
            s(&data),
            "--points",
            "16",
            "--latent",
            "4",
            "--epochs",
            "20",
            "--lr",
            "1e30",
            "--out",
            s(&out)
        ]),
        Some(4)
    );
}

#[test]
fn overfit_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d", "2", &["--noise", "false", "--val-fraction", "0"]);
    let model = dir.path().join("model");
    let before: Vec<u8> = fs::read(data.join("frames.bin")).unwrap();
    let train = [
        "train-ae",
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--seed",
        "1",
        "--jobs",
        "1",
        "--latent",
        "16",
        "--points",
        "144",
        "--epochs",
        "300",
        "--batch-size",
        "12",
        "--lr",
        "0.001",
        "--patience",
        "1000",
    ];
    ok(&train);
    ok(&[
        "train-mlp",
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--seed",
        "1",
        "--jobs",
        "1",
        "--epochs",
        "300",
        "--batch-size",
        "4",
        "--lr",
        "0.01",
    ]);
    let eval_dir = dir.path().join("eval");
    ok(&["eval", "--data", s(&data), "--model", s(&model), "--out", s(&eval_dir)]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("eval_summary.json")).unwrap()).unwrap();
    let mean = summary["overall"]["mean"].as_f64().unwrap();
    // truth spacing at this grid is 12 mm, so a few mm is a close fit
    assert!(mean < 3.0, "mean chamfer {mean}");
    let bins = fs::read_to_string(eval_dir.join("eval_bins.csv")).unwrap();
    assert!(bins.starts_with("bin_lo_mm,bin_hi_mm,count,min,q1,median,q3,max,mean,std\n"));
    assert_eq!(bins.lines().count(), 9);
    assert_eq!(fs::read_dir(eval_dir.join("nn_maps")).unwrap().count(), 12);

    let export_dir = dir.path().join("export");
    ok(&[
        "export",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--samples",
        "0,5",
        "--out",
        s(&export_dir),
    ]);
    for f in ["000000_truth.ply", "000005_pred.ply", "000005_nn.csv", "layout.csv"] {
        assert!(export_dir.join(f).exists(), "{f}");
    }

    // Stage 1 retrained with the same seed is byte-identical
    let again = dir.path().join("again");
    let mut args = train.to_vec();
    args[4] = s(&again);
    ok(&args);
    assert_eq!(
        fs::read(model.join("autoencoder.ckpt")).unwrap(),
        fs::read(again.join("autoencoder.ckpt")).unwrap()
    );
    assert_eq!(fs::read(data.join("frames.bin")).unwrap(), before);
}

#[test]
fn sweep_sage_and_ablate_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "d", "4", &["--val-fraction", "0.25"]);
    let sweep_dir = dir.path().join("sweep");
    ok(&[
        "sweep",
        "--data",
        s(&data),
        "--latents",
        "4,8",
        "--points",
        "16,36",
        "--ae-epochs",
        "2",
        "--mlp-epochs",
        "2",
        "--jobs",
        "2",
        "--out",
        s(&sweep_dir),
    ]);
    let csv = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    let model = dir.path().join("model");
    ok(&[
        "train-ae",
        "--data",
        s(&data),
        "--latent",
        "4",
        "--points",
        "16",
        "--epochs",
        "3",
        "--out",
        s(&model),
    ]);
    ok(&[
        "train-mlp",
        "--data",
        s(&data),
        "--hidden",
        "16",
        "--epochs",
        "3",
        "--out",
        s(&model),
    ]);
    let sage_dir = dir.path().join("sage");
    let text = ok(&[
        "sage",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--permutations",
        "8",
        "--draws",
        "4",
        "--out",
        s(&sage_dir),
    ]);
    assert!(text.contains("led:") && text.contains("pd:"));
    let led = fs::read_to_string(sage_dir.join("sage_led.csv")).unwrap();
    assert_eq!(led.lines().count(), 1 + 30);
    let pd = fs::read_to_string(sage_dir.join("sage_pd.csv")).unwrap();
    assert_eq!(pd.lines().count(), 1 + 5);

    let ablate_dir = dir.path().join("ablate");
    ok(&[
        "ablate",
        "--data",
        s(&data),
        "--model",
        s(&model),
        "--sage",
        s(&sage_dir.join("sage.json")),
        "--kind",
        "pd",
        "--ks",
        "1,5",
        "--epochs",
        "2",
        "--out",
        s(&ablate_dir),
    ]);
    let csv = fs::read_to_string(ablate_dir.join("ablation_pd.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}
