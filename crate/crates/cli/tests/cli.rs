//! End-to-end checks of the `epl` binary through the file boundary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use epl_core::evidence::{dempster_fuse_all, MassField};
use epl_core::tensor::Tensor;
use epl_core::volfile::{self, Dtype};

fn epl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_epl"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("epl-cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn phantom_spec_json() -> String {
    serde_json::json!({
        "dims": [8, 8, 8],
        "num_classes": 2,
        "classes": [{
            "count": 1,
            "radius_min": 2.0,
            "radius_max": 3.0,
            "intensity_mean": 1.0,
            "intensity_std": 0.1
        }],
        "background_mean": 0.0,
        "background_std": 0.1,
        "noise_std": 0.1,
        "blur_sigma": 0.5,
        "seed": 0
    })
    .to_string()
}

fn train_config_json() -> serde_json::Value {
    serde_json::json!({
        "net": {
            "in_channels": 1,
            "base_width": 2,
            "depth": 2,
            "num_classes": 2,
            "num_heads": 2,
            "proto_stage": 1
        },
        "labeled_ratio": 0.3,
        "labeled_per_batch": 1,
        "unlabeled_per_batch": 2,
        "iterations": 2,
        "learning_rate": 0.001,
        "ema_decay": 0.99,
        "lambda_max": 1.0,
        "gamma_max": 0.5,
        "proto_tau": 0.1,
        "seed": 3,
        "checkpoint_every": 0,
        "use_mt": true,
        "fuse_heads_mode": "dempster",
        "student_fuse_heads": true,
        "use_prototypes": true,
        "use_lrm": true,
        "use_urm": true,
        "use_gedl_labeled": true,
        "use_gedl_unlabeled": true,
        "gedl_variant": "log_alpha",
        "normalize_universal": true,
        "seg_source": "fused",
        "uncertainty_norm_scope": "per_volume"
    })
}

fn run_ok(output: &Output) {
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn write_mass_file(path: &Path, singles: &[f64], universal: f64) {
    let n = singles.len();
    let mut data = singles.to_vec();
    data.push(universal);
    let tensor = Tensor::from_vec(data, &[n + 1, 1, 1, 1]).unwrap();
    volfile::write_tensor(path, &tensor, Dtype::F64).unwrap();
}

#[test]
fn gen_data_split_rule_and_reproducibility() {
    let dir = tmp_dir("gen");
    let spec = dir.join("spec.json");
    std::fs::write(&spec, phantom_spec_json()).unwrap();
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let output = epl()
            .args(["gen-data", "--spec"])
            .arg(&spec)
            .arg("--out")
            .arg(out)
            .args(["--count", "50", "--labeled-ratio", "0.2", "--seed", "9"])
            .output()
            .unwrap();
        run_ok(&output);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("manifest.json")).unwrap())
            .unwrap();
    let labeled = manifest["samples"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["split"] == "labeled")
        .count();
    assert_eq!(labeled, 10);

    // byte-identical rerun
    for entry in std::fs::read_dir(&out_a).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(out_a.join(&name)).unwrap();
        let b = std::fs::read(out_b.join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs between reruns");
    }
}

#[test]
fn gen_data_rejects_zero_ratio() {
    let dir = tmp_dir("gen-bad");
    let spec = dir.join("spec.json");
    std::fs::write(&spec, phantom_spec_json()).unwrap();
    let output = epl()
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(dir.join("out"))
        .args(["--count", "50", "--labeled-ratio", "0", "--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("invalid phantom spec"), "{stderr}");
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    let output = epl().args(["gen-data", "--bogus-flag", "1"]).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&output.stderr).is_empty());
}

#[test]
fn train_runs_and_prints_metrics_path() {
    let dir = tmp_dir("train");
    let spec = dir.join("spec.json");
    std::fs::write(&spec, phantom_spec_json()).unwrap();
    let data = dir.join("data");
    run_ok(
        &epl()
            .args(["gen-data", "--spec"])
            .arg(&spec)
            .arg("--out")
            .arg(&data)
            .args(["--count", "10", "--labeled-ratio", "0.3", "--seed", "5"])
            .output()
            .unwrap(),
    );
    let config = dir.join("config.json");
    std::fs::write(&config, train_config_json().to_string()).unwrap();
    let out = dir.join("run");
    let output = epl()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    run_ok(&output);
    let stdout = String::from_utf8(output.stdout).unwrap();
    let last_line = stdout.lines().last().unwrap();
    assert!(Path::new(last_line).exists(), "metrics path {last_line}");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(last_line).unwrap()).unwrap();
    assert!(metrics["mean_dice"].is_number());
    assert!(out.join("train_log.jsonl").exists());
    assert!(out.join("ckpt_00000.bin").exists());
}

#[test]
fn train_reports_missing_config_key() {
    let dir = tmp_dir("train-bad");
    let mut config = train_config_json();
    config.as_object_mut().unwrap().remove("iterations");
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, config.to_string()).unwrap();
    let output = epl()
        .args(["train", "--config"])
        .arg(&config_path)
        .args(["--data", "/nonexistent", "--out", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("iterations"), "stderr: {stderr}");
}

#[test]
fn fuse_single_input_is_identity() {
    let dir = tmp_dir("fuse-one");
    let input = dir.join("m.eplv");
    write_mass_file(&input, &[0.6, 0.2], 0.2);
    let out = dir.join("fused.eplv");
    run_ok(
        &epl()
            .args(["fuse", "--inputs"])
            .arg(&input)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap(),
    );
    assert_eq!(std::fs::read(&input).unwrap(), std::fs::read(&out).unwrap());
}

#[test]
fn fuse_with_vacuous_member_equals_fusion_of_rest() {
    let dir = tmp_dir("fuse-vac");
    let m1 = dir.join("m1.eplv");
    let m2 = dir.join("m2.eplv");
    let vac = dir.join("vac.eplv");
    write_mass_file(&m1, &[0.6, 0.2], 0.2);
    write_mass_file(&m2, &[0.5, 0.3], 0.2);
    write_mass_file(&vac, &[0.0, 0.0], 1.0);

    let fused_two = dir.join("two.eplv");
    run_ok(
        &epl()
            .args(["fuse", "--inputs"])
            .args([&m1, &m2])
            .arg("--out")
            .arg(&fused_two)
            .output()
            .unwrap(),
    );
    let fused_three = dir.join("three.eplv");
    run_ok(
        &epl()
            .args(["fuse", "--inputs"])
            .args([&m1, &vac, &m2])
            .arg("--out")
            .arg(&fused_three)
            .output()
            .unwrap(),
    );
    let two = volfile::read(&fused_two).unwrap().into_tensor().unwrap();
    let three = volfile::read(&fused_three).unwrap().into_tensor().unwrap();
    for (a, b) in two.data().iter().zip(three.data()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn fuse_matches_in_process_result_bit_for_bit() {
    let dir = tmp_dir("fuse-oracle");
    let m1 = dir.join("m1.eplv");
    let m2 = dir.join("m2.eplv");
    write_mass_file(&m1, &[0.55, 0.25], 0.2);
    write_mass_file(&m2, &[0.1, 0.65], 0.25);
    let out = dir.join("fused.eplv");
    run_ok(
        &epl()
            .args(["fuse", "--inputs"])
            .args([&m1, &m2])
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap(),
    );

    let f1 = MassField::from_packed(volfile::read(&m1).unwrap().into_tensor().unwrap()).unwrap();
    let f2 = MassField::from_packed(volfile::read(&m2).unwrap().into_tensor().unwrap()).unwrap();
    let fused = dempster_fuse_all(&[f1, f2]).unwrap();
    let expected = dir.join("expected.eplv");
    volfile::write_tensor(&expected, fused.channels(), Dtype::F64).unwrap();
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(&expected).unwrap()
    );
}

#[test]
fn uncertainty_worked_values_through_files() {
    let dir = tmp_dir("uncertainty");
    let certain = dir.join("certain.eplv");
    write_mass_file(&certain, &[1.0, 0.0], 0.0);
    let out = dir.join("u.eplv");
    run_ok(
        &epl()
            .args(["uncertainty", "--input"])
            .arg(&certain)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap(),
    );
    let u = volfile::read(&out).unwrap().into_tensor().unwrap();
    assert!(u.data().iter().all(|&v| v == 0.0));

    let worked = dir.join("worked.eplv");
    write_mass_file(&worked, &[0.5, 0.3], 0.2);
    run_ok(
        &epl()
            .args(["uncertainty", "--input"])
            .arg(&worked)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap(),
    );
    let u = volfile::read(&out).unwrap().into_tensor().unwrap();
    assert!((u.data()[0] - 0.3605).abs() < 1e-4, "{}", u.data()[0]);
}

#[test]
fn uncertainty_normalize_bounds_output() {
    let dir = tmp_dir("uncertainty-norm");
    // three voxels with distinct uncertainty levels
    let tensor = Tensor::from_vec(
        vec![
            1.0, 0.5, 0.0, // class 0 masses
            0.0, 0.3, 0.0, // class 1 masses
            0.0, 0.2, 1.0, // universal
        ],
        &[3, 1, 1, 3],
    )
    .unwrap();
    let input = dir.join("m.eplv");
    volfile::write_tensor(&input, &tensor, Dtype::F64).unwrap();
    let out = dir.join("u.eplv");
    run_ok(
        &epl()
            .args(["uncertainty", "--input"])
            .arg(&input)
            .arg("--out")
            .arg(&out)
            .args(["--normalize"])
            .output()
            .unwrap(),
    );
    let u = volfile::read(&out).unwrap().into_tensor().unwrap();
    assert!(u.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let min = u.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = u.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!((min, max), (0.0, 1.0));
}

#[test]
fn render_produces_valid_pgm() {
    let dir = tmp_dir("render");
    let volume = Tensor::from_vec((0..27).map(|i| i as f64).collect(), &[3, 3, 3]).unwrap();
    let input = dir.join("vol.eplv");
    volfile::write_tensor(&input, &volume, Dtype::F64).unwrap();
    let out = dir.join("slice.pgm");
    run_ok(
        &epl()
            .args(["render", "--input"])
            .arg(&input)
            .args(["--axis", "z", "--index", "1", "--out"])
            .arg(&out)
            .output()
            .unwrap(),
    );
    let bytes = std::fs::read(&out).unwrap();
    let header = b"P5\n3 3\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 9);
    // slice z=1 holds values 9..17: min -> 0, max -> 255
    let pixels = &bytes[header.len()..];
    assert_eq!(*pixels.iter().min().unwrap(), 0);
    assert_eq!(*pixels.iter().max().unwrap(), 255);
}

#[test]
fn render_constant_volume_is_constant_image() {
    let dir = tmp_dir("render-const");
    let volume = Tensor::full(&[2, 2, 2], 7.5);
    let input = dir.join("vol.eplv");
    volfile::write_tensor(&input, &volume, Dtype::F64).unwrap();
    let out = dir.join("slice.pgm");
    run_ok(
        &epl()
            .args(["render", "--input"])
            .arg(&input)
            .args(["--axis", "x", "--index", "0", "--out"])
            .arg(&out)
            .output()
            .unwrap(),
    );
    let bytes = std::fs::read(&out).unwrap();
    let header_len = b"P5\n2 2\n255\n".len();
    let pixels = &bytes[header_len..];
    assert!(pixels.iter().all(|&p| p == pixels[0]));
}

#[test]
fn selftest_passes_and_fault_hook_fails() {
    let output = epl().arg("selftest").output().unwrap();
    run_ok(&output);
    let stdout = String::from_utf8(output.stdout).unwrap();
    for suite in ["fusion-oracle", "entropy", "gradient-check", "metric-oracle"] {
        assert!(stdout.contains(suite), "missing {suite} in: {stdout}");
        assert!(stdout.contains("passed"), "{stdout}");
    }

    let faulty = epl()
        .arg("selftest")
        .env("EPL_SELFTEST_FAULT", "1")
        .output()
        .unwrap();
    assert!(!faulty.status.success());
}
