use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brnpa::data::{read_volume_file, write_volume_file};
use brnpa::metrics::RgbImage;
use brnpa::npa::FeatureVolume;
use tempfile::TempDir;

fn brnpa(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brnpa"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn write_volume(dir: &Path, name: &str, v: &FeatureVolume) -> String {
    let path = dir.join(name);
    write_volume_file(&path, v).unwrap();
    path.to_str().unwrap().to_string()
}

fn ramp_volume() -> FeatureVolume {
    let data = (0..4 * 3 * 4)
        .map(|i| ((i * 7) % 13) as f64 / 4.0 + 0.25)
        .collect();
    FeatureVolume::new(4, 3, 4, data).unwrap()
}

#[test]
fn extract_writes_two_files_and_prints_indices() {
    let dir = TempDir::new().unwrap();
    let input = write_volume(dir.path(), "v.npav", &ramp_volume());
    let out = dir.path().join("out");
    let o = brnpa(&out, &["extract", "--input", &input, "--n", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).matches(" index ").count(), 3);
    let features = read_volume_file(out.join("features.npav")).unwrap();
    let stack = read_volume_file(out.join("stack.npav")).unwrap();
    assert_eq!(
        (features.channels(), features.height(), features.width()),
        (3, 1, 4)
    );
    assert_eq!((stack.channels(), stack.height(), stack.width()), (3, 3, 4));
    for map in stack.data().chunks(12) {
        assert!((map.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(out.join("manifest.json").exists());
}

#[test]
fn extract_rejects_too_many_representatives() {
    let dir = TempDir::new().unwrap();
    let input = write_volume(dir.path(), "v.npav", &ramp_volume());
    let o = brnpa(
        &dir.path().join("out"),
        &["extract", "--input", &input, "--n", "13"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(
        stderr(&o).contains("N exceeds spatial positions"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn extract_is_deterministic_under_seed() {
    let dir = TempDir::new().unwrap();
    let input = write_volume(dir.path(), "v.npav", &ramp_volume());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = brnpa(
            &out,
            &[
                "--seed",
                "9",
                "extract",
                "--input",
                &input,
                "--selection",
                "random",
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        (
            fs::read(out.join("features.npav")).unwrap(),
            fs::read(out.join("stack.npav")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn missing_input_is_io_error() {
    let dir = TempDir::new().unwrap();
    let o = brnpa(dir.path(), &["extract", "--input", "/nonexistent/v.npav"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_volume_is_io_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.npav");
    fs::write(&path, b"NPAX\x01\x00\x01\x00").unwrap();
    let o = brnpa(dir.path(), &["extract", "--input", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}

#[test]
fn render_one_hot_gives_single_red_pixel() {
    let dir = TempDir::new().unwrap();
    let volume = write_volume(
        dir.path(),
        "v.npav",
        &FeatureVolume::new(1, 2, 2, vec![1.0; 4]).unwrap(),
    );
    let stack = write_volume(
        dir.path(),
        "s.npav",
        &FeatureVolume::new(1, 2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap(),
    );
    let out = dir.path().join("out");
    let o = brnpa(&out, &["render", "--volume", &volume, "--stack", &stack]);
    assert!(o.status.success(), "{}", stderr(&o));
    let img = RgbImage::decode(&fs::read(out.join("attention.ppm")).unwrap()).unwrap();
    assert_eq!(img.pixel(1, 0), [255, 0, 0]);
    for (x, y) in [(0, 0), (0, 1), (1, 1)] {
        assert_eq!(img.pixel(x, y), [0, 0, 0]);
    }
}

#[test]
fn render_shape_mismatch_is_validation_error() {
    let dir = TempDir::new().unwrap();
    let volume = write_volume(
        dir.path(),
        "v.npav",
        &FeatureVolume::new(1, 2, 2, vec![1.0; 4]).unwrap(),
    );
    let stack = write_volume(
        dir.path(),
        "s.npav",
        &FeatureVolume::new(1, 3, 2, vec![1.0 / 6.0; 6]).unwrap(),
    );
    let o = brnpa(
        dir.path(),
        &["render", "--volume", &volume, "--stack", &stack],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn render_golden_fixture_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let o = brnpa(
        dir.path(),
        &[
            "render",
            "--volume",
            fixture("golden_volume.npav").to_str().unwrap(),
            "--stack",
            fixture("golden_stack.npav").to_str().unwrap(),
            "--scale",
            "4",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let got = fs::read(dir.path().join("attention.ppm")).unwrap();
    assert_eq!(got, fs::read(fixture("golden_render.ppm")).unwrap());
}

#[test]
fn sparsity_of_uniform_stack_is_one() {
    let dir = TempDir::new().unwrap();
    let volume = write_volume(
        dir.path(),
        "v.npav",
        &FeatureVolume::new(1, 3, 3, vec![1.0; 9]).unwrap(),
    );
    let stack = write_volume(
        dir.path(),
        "s.npav",
        &FeatureVolume::new(1, 3, 3, vec![1.0 / 9.0; 9]).unwrap(),
    );
    let o = brnpa(
        dir.path(),
        &["sparsity", "--volume", &volume, "--stack", &stack],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(
        (report["s"].as_f64().unwrap() - 1.0).abs() < 1e-12,
        "{report}"
    );
}

#[test]
fn malformed_config_names_field() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[npa]\nrefine = \"yes\"\n").unwrap();
    let o = brnpa(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("npa.refine"), "{}", stderr(&o));
    fs::write(&cfg, "epochz = 3\n").unwrap();
    let o = brnpa(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
}

const TINY: &str = "epochs = 1\n[dataset]\ntrain = 12\ntest = 6\n";

#[test]
fn train_writes_artifacts_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let o = brnpa(
        &out,
        &["--seed", "4", "--config", cfg.to_str().unwrap(), "train"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "model.ckpt",
        "metrics.jsonl",
        "report.json",
        "manifest.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["resolved"]["seed"], 4);
    assert_eq!(manifest["resolved"]["dataset"]["train"], 12);
    assert_eq!(manifest["resolved"]["learning_rate"], 0.01);
}

#[test]
fn divergence_exits_five() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, format!("learning_rate = 1e200\n{TINY}")).unwrap();
    let o = brnpa(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn distill_flags_degenerate_case() {
    let dir = TempDir::new().unwrap();
    let teacher = dir.path().join("t.toml");
    let student = dir.path().join("s.toml");
    fs::write(&teacher, TINY).unwrap();
    fs::write(&student, format!("alpha = 1.0\n{TINY}")).unwrap();
    let out = dir.path().join("out");
    let o = brnpa(
        &out,
        &[
            "--config",
            student.to_str().unwrap(),
            "distill",
            "--teacher-config",
            teacher.to_str().unwrap(),
        ],
    );
    assert!(
        stdout(&o).contains("degenerate: plain training"),
        "{}",
        stdout(&o)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["degenerate"], "degenerate: plain training");
    // identical runs cannot be strictly sparser
    assert_eq!(o.status.code(), Some(4));
    assert!(
        stderr(&o).contains("student attention sparser than teacher"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn bench_with_zero_iters_is_empty() {
    let dir = TempDir::new().unwrap();
    let o = brnpa(
        dir.path(),
        &["bench", "--shape", "512,56,56", "--n", "3", "--iters", "0"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["npa"].is_null() && report["learned_attention"].is_null());
}

#[test]
fn bench_rejects_bad_shape() {
    let dir = TempDir::new().unwrap();
    let o = brnpa(dir.path(), &["bench", "--shape", "512,56"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gen_data_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = brnpa(&out, &["--seed", "3", "gen-data"]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(out.join("dataset.bin")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn gradcheck_passes_on_few_trials() {
    let dir = TempDir::new().unwrap();
    let o = brnpa(dir.path(), &["gradcheck", "--trials", "3"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).matches("PASS").count(), 6);
}

#[test]
fn ablate_reports_four_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let o = brnpa(&out, &["--config", cfg.to_str().unwrap(), "ablate"]);
    let code = o.status.code();
    assert!(code == Some(0) || code == Some(4), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    if code == Some(4) {
        assert!(
            stderr(&o).contains("assertion failed: active+refine"),
            "{}",
            stderr(&o)
        );
    }
}
