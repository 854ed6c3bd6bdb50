use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geofm_core::archive::{write_single, Dtype};
use ndarray::{ArrayD, IxDyn};

fn geofm(args: &[&str], data_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geofm"))
        .args(args)
        .env("GEOFM_DATA_ROOT", data_root)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit status")
}

/// Square blob on a gradient background, 28 × 28, at offset `k`.
fn write_sample(dir: &Path, name: &str, k: usize) {
    let n = 28;
    let mut image = ArrayD::zeros(IxDyn(&[n, n]));
    let mut label = ArrayD::zeros(IxDyn(&[n, n]));
    for r in 0..n {
        for c in 0..n {
            let inside = (k..k + 12).contains(&r) && (k..k + 12).contains(&c);
            image[[r, c]] = if inside { 1.0 } else { 0.1 * (r as f64 / n as f64) };
            label[[r, c]] = if inside { 1.0 } else { 0.0 };
        }
    }
    for (sub, t) in [("images", &image), ("labels", &label)] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).unwrap();
        write_single(&d.join(format!("{name}.safetensors")), t, Dtype::F32).unwrap();
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    runs: PathBuf,
}

fn fixture(decoder: &str) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    for (i, k) in [2usize, 8, 12].into_iter().enumerate() {
        write_sample(&root.join("fault/train"), &format!("s{i}"), k);
    }
    write_sample(&root.join("fault/test"), "t0", 5);
    let runs = tmp.path().join("runs");
    let config = tmp.path().join("toy.toml");
    std::fs::write(
        &config,
        format!(
            r#"
preset = "fault+{decoder}"

[model]
channel_width = 8

[model.encoder]
embed_dim = 16
depth = 2
head_count = 2
tap_layers = [1, 2]
base_grid = 2

[model.unet]
depth = 1
base_channels = 4

[train]
total_epochs = 2
warmup_epochs = 1
batch_size = 2
base_lr = 1e-3

[paths]
checkpoint_dir = "{ckpt}"
report_dir = "{report}"
"#,
            ckpt = runs.join(decoder).join("ckpt").display(),
            report = runs.join(decoder).join("eval").display(),
        ),
    )
    .unwrap();
    Fixture {
        _tmp: tmp,
        root,
        config,
        runs,
    }
}

#[test]
fn full_pipeline_and_report() {
    let fx = fixture("linear");
    let cfg = fx.config.to_str().unwrap();

    let out = geofm(&["evaluate", "--config", cfg], &fx.root);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    let out = geofm(&["prepare-data", "--config", cfg], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fx.root.join("fault/manifest/manifest.jsonl").is_file());

    let out = geofm(&["prepare-data", "--config", cfg, "--strict"], &fx.root);
    assert_eq!(code(&out), 1, "reference counts differ for the toy set");

    let out = geofm(&["evaluate", "--config", cfg], &fx.root);
    assert_eq!(code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("best.safetensors"), "{stderr}");

    let out = geofm(&["train", "--config", cfg, "--seed", "3", "--deterministic"], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = fx.runs.join("linear/ckpt");
    for f in ["best.safetensors", "last.safetensors", "metrics.jsonl", "run.json", "config.toml"] {
        assert!(ckpt.join(f).is_file(), "{f}");
    }

    // The checkpoint was trained with seed 3, so a different seed is a different config.
    let out = geofm(&["evaluate", "--config", cfg], &fx.root);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));

    let out = geofm(&["evaluate", "--config", cfg, "--seed", "3"], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval = fx.runs.join("linear/eval");
    assert!(eval.join("metrics.json").is_file());
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["config_hash"].as_str().unwrap().len(), 16);

    let viz = fx.runs.join("viz");
    let out = geofm(
        &["visualize-features", "--config", cfg, "--seed", "3", "--checkpoint", ckpt.join("best.safetensors").to_str().unwrap(), "--out", viz.to_str().unwrap()],
        &fx.root,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(viz.join("features_t0.png").is_file());
    let out = geofm(&["visualize-features", "--config", cfg, "--layer", "1", "--out", viz.join("l1").to_str().unwrap()], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = geofm(&["visualize-features", "--config", cfg, "--layer", "7"], &fx.root);
    assert_eq!(code(&out), 1);

    let report_dir = fx.runs.join("table");
    let out = geofm(&["report", eval.to_str().unwrap(), "--out", report_dir.to_str().unwrap()], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("DINOv2-LINEAR"), "{table}");
    assert!(report_dir.join("report.tsv").is_file());
}

#[test]
fn unet_trains_on_unaligned_lattice() {
    let fx = fixture("unet");
    let cfg = fx.config.to_str().unwrap();
    assert_eq!(code(&geofm(&["prepare-data", "--config", cfg], &fx.root)), 0);
    let out = geofm(&["train", "--config", cfg], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = geofm(&["evaluate", "--config", cfg], &fx.root);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validation_errors_exit_one() {
    let fx = fixture("linear");
    let bad = fx.config.with_file_name("bad.toml");
    std::fs::write(&bad, "preset = \"fault+linear\"\n[train]\nbatch_sise = 4\n").unwrap();
    let out = geofm(&["prepare-data", "--config", bad.to_str().unwrap()], &fx.root);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_sise"));

    let out = geofm(&["prepare-data", "--preset", "fault+segformer"], &fx.root);
    assert_eq!(code(&out), 1);

    let missing = fx.root.join("absent");
    let out = geofm(&["prepare-data", "--preset", "fault+mla"], &missing);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.data_root"));

    let out = geofm(&["train"], &fx.root);
    assert_eq!(code(&out), 1);

    let out = geofm(&["no-such-verb"], &fx.root);
    assert_eq!(code(&out), 1);

    let out = geofm(&["report", fx.root.to_str().unwrap()], &fx.root);
    assert_eq!(code(&out), 2);
}
