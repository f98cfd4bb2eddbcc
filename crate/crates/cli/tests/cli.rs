use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use spm_core::registry;
use spm_core::toy::Testbed;
use spm_core::{inject, LayerShape, ModelSignature};

fn spm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spm")).args(args).output().expect("spawn spm")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A seed-0 testbed built through the CLI once per target directory.
fn testbed_dir() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-testbed-seed0");
        if Testbed::load(&dir).is_ok() {
            return dir;
        }
        let staging = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("cli-testbed-{}", std::process::id()));
        let out = spm(&["testbed", "build", "--seed", "0", "--out", p(&staging)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let line: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
        assert!(line["frozen_accuracy"].as_f64().unwrap() >= 0.95);
        if std::fs::rename(&staging, &dir).is_err() {
            let _ = std::fs::remove_dir_all(&staging);
        }
        dir
    })
}

/// Trains a short membrane through the CLI.
fn trained(dir: &Path, target: &str, steps: &str) -> PathBuf {
    let out_path = dir.join(format!("{}.spm", target.replace(' ', "_")));
    let out = spm(&[
        "train", "--model", p(testbed_dir()), "--target", target, "--steps", steps, "--log-every", "10", "--seed", "3", "--out", p(&out_path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    out_path
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&spm(&[])), 2);
    assert_eq!(code(&spm(&["train", "--bogus"])), 2);
    assert_eq!(code(&spm(&["eval", "--model"])), 2);
    assert_eq!(code(&spm(&["--help"])), 0);
}

#[test]
fn missing_testbed_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spm(&["train", "--model", p(&tmp.path().join("nope")), "--target", "red square", "--out", p(&tmp.path().join("m.spm"))]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).starts_with("error[testbed]"), "{}", stderr(&out));
}

#[test]
fn bad_hyperparameter_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spm(&["train", "--model", p(testbed_dir()), "--target", "red square", "--eta=-1", "--out", p(&tmp.path().join("m.spm"))]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("eta"), "{}", stderr(&out));
}

#[test]
fn divergent_training_exits_7() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spm(&[
        "train", "--model", p(testbed_dir()), "--target", "red square", "--lr", "1e300", "--steps", "20", "--out", p(&tmp.path().join("m.spm")),
    ]);
    assert_eq!(code(&out), 7, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error[training]"));
}

#[test]
fn train_logs_progress_and_inspect_reads_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out_path = tmp.path().join("rs.spm");
    let out = spm(&[
        "train", "--model", p(testbed_dir()), "--target", "red square", "--steps", "30", "--log-every", "10", "--checkpoint-every", "10",
        "--out", p(&out_path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines.iter().take(3).map(|l| l["step"].as_u64().unwrap()).collect::<Vec<_>>(), [9, 19, 29]);
    for key in ["t", "l_era", "l_anc", "total", "lr"] {
        assert!(lines[0][key].is_number(), "{key}");
    }
    let out = spm(&["inspect", p(&out_path)]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("targets: red square"), "{text}");
    assert!(text.contains("steps=30"), "{text}");
}

#[test]
fn gate_reports_full_permeability_for_contained_concept() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = inject(&ModelSignature::new(vec![LayerShape::new("fc", 2, 2, 1)]), 1, 0).unwrap();
    m.name = "vg".into();
    m.targets = vec!["Van Gogh".into()];
    let path = tmp.path().join("vg.spm");
    registry::save(&m, &path).unwrap();
    let table = tmp.path().join("table.json");
    let words = ["the", "swirling", "night", "sky", "in", "style", "of", "van", "gogh", "water", "lilies", "by", "claude", "monet"];
    let entries: serde_json::Map<String, Value> = words
        .iter()
        .enumerate()
        .map(|(i, w)| (w.to_string(), Value::from((0..words.len()).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>())))
        .collect();
    std::fs::write(&table, serde_json::json!({ "dim": words.len(), "words": entries }).to_string()).unwrap();
    let gate = |prompt: &str| spm(&["gate", "--spm", p(&path), "--prompt", prompt, "--encoder", "plugin", "--encoder-table", p(&table)]);

    let out = gate("The swirling night sky in the style of Van Gogh");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("s_t=1.0000 gamma=1.0000"), "{}", stdout(&out));
    let out = gate("Water Lilies by Claude Monet");
    assert!(stdout(&out).trim_end().ends_with("gamma=0.0000 gamma_scaled=0.0000"), "{}", stdout(&out));

    let out = spm(&["gate", "--spm", p(&path), "--prompt", "x", "--encoder", "plugin"]);
    assert_eq!(code(&out), 3);
    let out = spm(&["gate", "--spm", p(&path), "--prompt", "Van Gogh", "--gamma-scale", "9"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn composing_nothing_matches_frozen_sampling_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spm(&["compose", "--model", p(testbed_dir()), "--prompt", "white cross", "--samples", "3", "--seed", "9", "--out", p(tmp.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rec: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("samples.json")).unwrap()).unwrap();
    let tb = Testbed::load(testbed_dir()).unwrap();
    let want = tb.generate(&["white cross"; 3], &[], 9).unwrap();
    for (i, row) in want.rows().into_iter().enumerate() {
        let got: Vec<f64> = rec["samples"][i].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(got, row.to_vec());
    }
    for i in 0..3 {
        let ppm = std::fs::read(tmp.path().join(format!("sample_{i:03}.ppm"))).unwrap();
        assert!(ppm.starts_with(b"P6\n96 96\n255\n"));
    }
}

#[test]
fn bypassed_gating_runs_at_the_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let m = trained(tmp.path(), "red square", "5");
    let out = spm(&[
        "compose", "--model", p(testbed_dir()), "--spm", p(&m), "--prompt", "blue circle", "--samples", "1", "--no-ft", "--gamma-scale", "2",
        "--sampler-steps", "5", "--out", p(&tmp.path().join("imgs")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rec: Value = serde_json::from_slice(&std::fs::read(tmp.path().join("imgs/samples.json")).unwrap()).unwrap();
    assert_eq!(rec["gamma"][0].as_f64(), Some(2.0));
}

#[test]
fn eval_report_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let m = trained(tmp.path(), "blue cross", "10");
    let concepts = tmp.path().join("concepts.txt");
    std::fs::write(&concepts, "# toy concepts\nblue cross\n\nred circle\n").unwrap();
    let run = |name: &str| {
        let report = tmp.path().join(name);
        let out = spm(&[
            "eval", "--model", p(testbed_dir()), "--spm", p(&m), "--concepts", p(&concepts), "--samples", "8", "--sampler-steps", "10",
            "--seed", "4", "--report", p(&report),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(report).unwrap()
    };
    let a = run("a.json");
    assert_eq!(a, run("b.json"));
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 2);
    assert_eq!(v["rows"][0]["concept"], "blue cross");
    assert_eq!(v["membranes"][0], "blue cross");
}

#[test]
fn transfer_check_accepts_derivatives_and_names_mismatches() {
    let tmp = tempfile::tempdir().unwrap();
    let m = trained(tmp.path(), "red circle", "2");
    let out = spm(&["transfer-check", "--model", p(testbed_dir()), "--spm", p(&m)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let tb = Testbed::load(testbed_dir()).unwrap();
    let mut layers = tb.signature().layers().to_vec();
    layers[1].m += 1;
    let mut wide = inject(&ModelSignature::new(layers), 1, 0).unwrap();
    wide.targets = vec!["red circle".into()];
    let wide_path = tmp.path().join("wide.spm");
    registry::save(&wide, &wide_path).unwrap();
    let out = spm(&["transfer-check", "--model", p(testbed_dir()), "--spm", p(&wide_path)]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("down"), "{}", stderr(&out));
}

#[test]
fn corrupted_membrane_exits_6() {
    let tmp = tempfile::tempdir().unwrap();
    let m = trained(tmp.path(), "white square", "1");
    let mut bytes = std::fs::read(&m).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    std::fs::write(&m, &bytes).unwrap();
    let out = spm(&["transfer-check", "--model", p(testbed_dir()), "--spm", p(&m)]);
    assert_eq!(code(&out), 6);
    assert!(stderr(&out).starts_with("error[registry]"), "{}", stderr(&out));
    std::fs::write(&m, b"nope").unwrap();
    assert_eq!(code(&spm(&["inspect", p(&m)])), 6);
    assert_eq!(code(&spm(&["inspect", p(&tmp.path().join("absent.spm"))])), 10);
}
