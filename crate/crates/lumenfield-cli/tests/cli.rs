//! End-to-end runs of the `lumenfield` binary on micro datasets.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lumenfield"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_micro(dir: &Path, seed: u64) {
    let out = run(&[
        "synthesize",
        "--out",
        dir.to_str().unwrap(),
        "--views",
        "3",
        "--size",
        "12x12",
        "--seed",
        &seed.to_string(),
    ]);
    assert_success(&out);
}

fn micro_train_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
            "steps": 25,
            "batch_rays": 16,
            "n_samples_per_ray": 8,
            "log_interval": 5,
            "checkpoint_interval": 10,
            "holdout_views": 1,
            "field": {
                "encoding": {"position_frequencies": 2, "direction_frequencies": 1},
                "trunk_layers": 2,
                "trunk_width": 16,
                "head_width": 16
            }
        }"#,
    )
    .unwrap();
    path
}

fn sha256_dir(dir: &Path) -> Vec<(String, u64)> {
    // cheap content fingerprint: (name, simple checksum)
    let mut entries: Vec<(String, u64)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            let bytes = std::fs::read(e.path()).unwrap();
            let mut h = 0xcbf29ce484222325u64;
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            (e.file_name().to_string_lossy().to_string(), h)
        })
        .collect();
    entries.sort();
    entries
}

#[test]
fn synthesize_writes_expected_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    synth_micro(&a, 7);
    synth_micro(&b, 7);

    let count = std::fs::read_dir(&a).unwrap().count();
    assert_eq!(count, 2 * 3 + 1); // raws + gts + manifest

    assert_eq!(sha256_dir(&a), sha256_dir(&b));

    // different seed changes the raws
    let c = dir.path().join("c");
    synth_micro(&c, 8);
    assert_ne!(sha256_dir(&a), sha256_dir(&c));
}

#[test]
fn train_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_micro(&data, 0);
    let config = micro_train_config(dir.path());

    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert!(out_dir.join("ckpt_final.lfck").exists());
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,data,ca,smooth,total,lr"));
    assert!(log.lines().count() > 2);

    let renders = dir.path().join("renders");
    let out = run(&[
        "render",
        "--ckpt",
        out_dir.join("ckpt_final.lfck").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        renders.to_str().unwrap(),
        "--mode",
        "enhanced",
    ]);
    assert_success(&out);
    for i in 0..3 {
        assert!(renders.join(format!("render_{i:03}.png")).exists());
        assert!(renders.join(format!("input_{i:03}.png")).exists());
        assert!(renders.join(format!("response_{i:03}.f64")).exists());
    }

    let report = dir.path().join("report.json");
    let out = run(&[
        "eval",
        "--renders",
        renders.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_success(&out);
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["views"].as_array().unwrap().len(), 3);
    assert!(parsed["response_recovery"].is_array());
    // report averages equal the mean of per-view entries
    let views = parsed["views"].as_array().unwrap();
    let mean: f64 = views.iter().map(|v| v["ssim"].as_f64().unwrap()).sum::<f64>() / views.len() as f64;
    assert!((parsed["mean_ssim"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_micro(&data, 1);
    let config = micro_train_config(dir.path());

    let full = dir.path().join("full");
    assert_success(&run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        full.to_str().unwrap(),
    ]));

    // the run checkpointed at step 10 and 20; resume from step 20
    let resumed = dir.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    assert_success(&run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
        "--resume",
        full.join("ckpt_000020.lfck").to_str().unwrap(),
    ]));

    let a = std::fs::read(full.join("ckpt_final.lfck")).unwrap();
    let b = std::fs::read(resumed.join("ckpt_final.lfck")).unwrap();
    assert_eq!(a, b, "resumed run diverged from uninterrupted run");
}

#[test]
fn baseline_ablation_zeroes_loss_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_micro(&data, 2);
    let config = micro_train_config(dir.path());

    let out_dir = dir.path().join("baseline");
    assert_success(&run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--ablate",
        "baseline",
    ]));
    let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
    for line in log.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[2], "0", "ca column: {line}");
        assert_eq!(cols[3], "0", "smooth column: {line}");
    }
}

#[test]
fn render_exposure_ratio_one_matches_no_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_micro(&data, 3);
    let config = micro_train_config(dir.path());
    let out_dir = dir.path().join("run");
    assert_success(&run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));

    let plain = dir.path().join("plain");
    let scaled = dir.path().join("scaled");
    for (out, extra) in [(&plain, None), (&scaled, Some("1.0"))] {
        let mut args = vec![
            "render",
            "--ckpt",
            out_dir.join("ckpt_final.lfck").to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ];
        if let Some(gamma) = extra {
            args.push("--exposure-ratio");
            args.push(gamma);
        }
        assert_success(&bin().args(&args).output().unwrap());
    }
    assert_eq!(sha256_dir(&plain), sha256_dir(&scaled));

    // a darker exposure changes the comparison inputs but not the renders
    let darker = dir.path().join("darker");
    assert_success(&run(&[
        "render",
        "--ckpt",
        out_dir.join("ckpt_final.lfck").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        darker.to_str().unwrap(),
        "--exposure-ratio",
        "0.3",
    ]));
    assert_eq!(
        std::fs::read(plain.join("render_000.png")).unwrap(),
        std::fs::read(darker.join("render_000.png")).unwrap()
    );
    assert_ne!(
        std::fs::read(plain.join("input_000.png")).unwrap(),
        std::fs::read(darker.join("input_000.png")).unwrap()
    );
}

#[test]
fn eval_perfect_renders_report_infinite_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_micro(&data, 4);

    // write renders that ARE the ground truth pushed through the same path
    let renders = dir.path().join("renders");
    std::fs::create_dir_all(&renders).unwrap();
    let dataset = lumenfield::synthscene::load_dataset(&data).unwrap();
    for (i, gt) in dataset.gts.iter().enumerate() {
        let png = lumenfield::rawproc::to_srgb(gt, [1.0; 3], 2.2).unwrap();
        lumenfield::rawproc::save_png(&renders.join(format!("render_{i:03}.png")), &png).unwrap();
    }

    let report = dir.path().join("report.json");
    assert_success(&run(&[
        "eval",
        "--renders",
        renders.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]));
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for view in parsed["views"].as_array().unwrap() {
        assert!(view["psnr_db"].is_null(), "psnr sentinel: {view}");
        assert!((view["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn eval_missing_ground_truth_fails_with_named_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth_micro(&data, 5);
    let renders = dir.path().join("renders");
    std::fs::create_dir_all(&renders).unwrap();
    let dataset = lumenfield::synthscene::load_dataset(&data).unwrap();
    let png = lumenfield::rawproc::to_srgb(&dataset.gts[0], [1.0; 3], 2.2).unwrap();
    lumenfield::rawproc::save_png(&renders.join("render_000.png"), &png).unwrap();
    std::fs::remove_file(data.join("gt_000.f64")).unwrap();

    let out = run(&[
        "eval",
        "--renders",
        renders.to_str().unwrap(),
        "--gt",
        data.to_str().unwrap(),
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        dir.path().join("report.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gt_000.f64"), "stderr: {stderr}");
}

#[test]
fn gradcheck_runs_and_rejects_bad_cases() {
    let out = run(&["gradcheck", "--cases", "autodiff"]);
    assert_success(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pass"));
    assert!(!stdout.contains("FAIL"));

    let out = run(&["gradcheck", "--cases", "bogus"]);
    assert_eq!(out.status.code(), Some(2)); // clap usage error

    let out = run(&["synthesize", "--unknown-flag", "x", "--out", "/tmp/nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn losses_gradcheck_case_passes() {
    let out = run(&["gradcheck", "--cases", "losses", "--seed", "3"]);
    assert_success(&out);
}
