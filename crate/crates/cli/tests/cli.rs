use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn scene(snr_db: Option<f64>) -> Value {
    json!({
        "seed": 5,
        "devices": [
            {"position_m": [-0.5, 0.0], "antenna_count": 8},
            {"position_m": [0.5, 0.0], "antenna_count": 8}
        ],
        "targets": [
            {"position_m": [0.9, 4.0], "velocity_mps": [0.0, -3.0]},
            {"position_m": [1.1, 4.0], "velocity_mps": [0.0, 3.0], "scattering_phase_rad": 2.0}
        ],
        "waveform": {
            "carrier_frequency_hz": 26.5e9,
            "bandwidth_hz": 400e6,
            "subcarrier_count": 256,
            "repetition_interval_s": 0.5e-3,
            "slow_time_count": 32
        },
        "noise": {"snr_db": snr_db},
        "grid": {"center_m": [1.0, 4.0], "half_size_m": [0.15, 0.15], "pixel_size_m": 0.01}
    })
}

// Three devices and targets apart in range as well as cross-range, so that
// coarse localization separates both.
fn resolved_scene() -> Value {
    let mut s = scene(None);
    s["devices"] = json!([-0.5, 0.0, 0.5]
        .iter()
        .map(|x| json!({"position_m": [x, 0.0], "antenna_count": 16}))
        .collect::<Vec<_>>());
    s["targets"][0]["position_m"] = json!([0.8, 3.8]);
    s["targets"][1]["position_m"] = json!([1.2, 4.3]);
    s["grid"] = json!({"center_m": [1.0, 4.05], "half_size_m": [0.35, 0.4], "pixel_size_m": 0.01});
    s
}

fn write_scene(dir: &Path, value: &Value) -> String {
    let path = dir.join("scene.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_movisac"))
        .args(args)
        .env("MOVISAC_WORKERS", "1")
        .output()
        .unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn simulate_writes_cube_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scene(dir.path(), &scene(Some(10.0)));
    let out = path(dir.path(), "cir.bin");
    let res = run(&["simulate", "-c", &cfg, "-o", &out, "--synced"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("cir.json")).unwrap()).unwrap();
    let shape: Vec<usize> = serde_json::from_value(sidecar["shape"].clone()).unwrap();
    let bytes = fs::metadata(&out).unwrap().len() as usize;
    // Interleaved f32 pairs.
    assert_eq!(bytes, shape.iter().product::<usize>() * 8);
    assert_eq!(shape[0], 4);
}

#[test]
fn pipeline_writes_report_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scene(dir.path(), &resolved_scene());
    let out = path(dir.path(), "run");
    let res = run(&["pipeline", "-c", &cfg, "-o", &out]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["target_count"], 2);
    assert_eq!(report["movisac"]["velocities"].as_array().unwrap().len(), 2);
    assert_eq!(report["movisac"]["metrics"]["missed"], 0);
    let spectra = fs::read_to_string(dir.path().join("run/spectra.csv")).unwrap();
    assert!(spectra.starts_with("frequency_hz,"));
    assert!(dir.path().join("run/association.csv").exists());
    assert!(dir.path().join("run/smi.bin").exists());
}

#[test]
fn image_and_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scene(dir.path(), &scene(Some(10.0)));
    let img = path(dir.path(), "smi.bin");
    let res = run(&["image", "-c", &cfg, "-o", &img]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let sidecar: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("smi.json")).unwrap()).unwrap();
    let (nx, ny) = (sidecar["nx"].as_u64().unwrap(), sidecar["ny"].as_u64().unwrap());
    assert_eq!(fs::metadata(&img).unwrap().len(), nx * ny * 4);

    let png = path(dir.path(), "smi.png");
    let res = run(&["render", "-i", &img, "-o", &png, "--floor-db", "-30"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");
}

#[test]
fn saf_prints_resolutions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scene(dir.path(), &scene(None));
    let res = run(&["saf", "-c", &cfg, "-o", &path(dir.path(), "saf.bin")]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let v: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(v["rho_x_m"].as_f64().unwrap() > 0.0);
    assert!(v["rho_y_m"].as_f64().unwrap() > v["rho_x_m"].as_f64().unwrap());
}

#[test]
fn sync_report_lists_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scene(dir.path(), &scene(Some(10.0)));
    let res = run(&["sync-report", "-c", &cfg]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = String::from_utf8(res.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
}

#[test]
fn seed_override_changes_noise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scene(dir.path(), &scene(Some(0.0)));
    let a = run(&["sync-report", "-c", &cfg]).stdout;
    let b = run(&["sync-report", "-c", &cfg]).stdout;
    let c = run(&["--seed", "99", "sync-report", "-c", &cfg]).stdout;
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = scene(None);
    bad["grid"]["unknown_key"] = json!(1);
    let cfg = write_scene(dir.path(), &bad);
    let res = run(&["pipeline", "-c", &cfg, "-o", &path(dir.path(), "run")]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("error"));

    let missing = run(&["image", "-c", &path(dir.path(), "nope.json"), "-o", &path(dir.path(), "x.bin")]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn buried_los_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_scene(dir.path(), &scene(Some(-90.0)));
    let res = run(&["sync-report", "-c", &cfg]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
}
