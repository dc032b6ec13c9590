use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const CONFIG: &str = r#"{
  "model": {"slices": 3, "hidden_dim": 16, "heads": 2, "decoder_layers": 1, "conv_layers": 1,
            "kernel_size": 3, "feature_dim": 8},
  "n_frames": 30, "epochs": 1, "batch_size": 2, "diffusion_steps": 100, "ddim_steps": 10
}"#;

fn badm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_badm"))
        .args(args)
        .output()
        .expect("run badm")
}

fn ok(args: &[&str]) -> Output {
    let out = badm(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn rows(p: &Path) -> Vec<Vec<f64>> {
    serde_json::from_value(read(p)["data"].clone()).unwrap()
}

/// A four-item 30-frame dataset and a one-epoch checkpoint.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        std::fs::write(f.path("run.json"), CONFIG).unwrap();
        ok(&[
            "make-data",
            "--out",
            s(&f.path("data")),
            "--config",
            s(&f.path("run.json")),
            "--count",
            "4",
            "--frames",
            "30",
        ]);
        ok(&[
            "train",
            "--data",
            s(&f.path("data")),
            "--out",
            s(&f.path("run")),
            "--config",
            s(&f.path("run.json")),
        ]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn item(&self, i: usize, kind: &str) -> String {
        s(&self.path("data").join(format!("item_{i:04}.{kind}.json"))).to_string()
    }

    fn sample_args(&self, out: &Path) -> Vec<String> {
        [
            "--ckpt",
            s(&self.path("run/last.bdck")),
            "--features",
            &self.item(0, "features"),
            "--beats",
            &self.item(0, "beats"),
            "--out",
            s(out),
        ]
        .iter()
        .map(|a| a.to_string())
        .collect()
    }

    fn run(&self, cmd: &str, out: &Path, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![cmd.to_string()];
        args.extend(self.sample_args(out));
        args.extend(extra.iter().map(|a| a.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        badm(&refs)
    }

    fn edit(&self, mask: &str, out: &Path) -> Output {
        let mask_path = self.path("mask.json");
        std::fs::write(&mask_path, mask).unwrap();
        let known = self.item(1, "motion");
        self.run("edit", out, &["--known", &known, "--mask", s(&mask_path)])
    }
}

#[test]
fn frame_count_must_divide_into_slices() {
    let dir = tempfile::tempdir().unwrap();
    let out = badm(&[
        "make-data",
        "--out",
        s(&dir.path().join("d")),
        "--frames",
        "151",
        "--count",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot be split into 6"));
}

#[test]
fn unknown_config_keys_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "learning_rate": 0.1}"#).unwrap();
    let out = badm(&[
        "make-data",
        "--out",
        s(&dir.path().join("d")),
        "--config",
        s(&cfg),
        "--count",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = badm(&[
        "train",
        "--data",
        s(&dir.path().join("nothing")),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sampling_commands() {
    let f = Fixture::new();
    let csv = std::fs::read_to_string(f.path("run/loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,L_simple,L_pos,L_vel,L_foot,total\n"));
    assert!(f.path("run/best.bdck").exists());

    // generate carries provenance and is reproducible
    let (a, b) = (f.path("a.json"), f.path("b.json"));
    assert!(f.run("generate", &a, &[]).status.success());
    assert!(f.run("generate", &b, &[]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let prov = &read(&a)["provenance"];
    assert_eq!(prov["command"], "generate");
    assert!(prov["config"]["model"].is_object());
    assert_eq!(rows(&a).len(), 30);

    // an empty mask samples exactly like generate
    let empty = f.path("empty.json");
    assert!(f.edit("{}", &empty).status.success());
    assert_eq!(rows(&empty), rows(&a));

    // a full mask returns the known motion
    let known = rows(Path::new(&f.item(1, "motion")));
    let full = f.path("full.json");
    assert!(f.edit(r#"{"frames": [[0, 30]]}"#, &full).status.success());
    for (r, k) in rows(&full).iter().zip(&known) {
        for (x, y) in r.iter().zip(k) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    // in-betweening keeps both ends exactly
    let between = f.path("between.json");
    assert!(f.edit(r#"{"frames": [[0, 5], [25, 30]]}"#, &between).status.success());
    let got = rows(&between);
    for i in (0..5).chain(25..30) {
        assert_eq!(got[i], known[i], "frame {i}");
    }
    assert_ne!(got[15], known[15]);

    let bad = f.path("bad.json");
    assert_eq!(f.edit(r#"{"frames": [[20, 40]]}"#, &bad).status.code(), Some(2));
    assert_eq!(f.run("generate", &bad, &["--ddim-steps", "0"]).status.code(), Some(2));
}

#[test]
fn long_generation_uses_half_window_stride() {
    let f = Fixture::new();
    let long = f.path("long");
    ok(&[
        "make-data",
        "--out",
        s(&long),
        "--config",
        s(&f.path("run.json")),
        "--count",
        "1",
        "--frames",
        "60",
        "--seed",
        "3",
    ]);
    let out = f.path("long.json");
    let res = badm(&[
        "generate-long",
        "--ckpt",
        s(&f.path("run/last.bdck")),
        "--features",
        s(&long.join("item_0000.features.json")),
        "--beats",
        s(&long.join("item_0000.beats.json")),
        "--out",
        s(&out),
        "--frames",
        "60",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stdout).starts_with("3 chunks"));
    assert_eq!(rows(&out).len(), 60);

    // features shorter than the requested length
    let res = badm(&[
        "generate-long",
        "--ckpt",
        s(&f.path("run/last.bdck")),
        "--features",
        &f.item(0, "features"),
        "--beats",
        &f.item(0, "beats"),
        "--out",
        s(&out),
        "--frames",
        "60",
    ]);
    assert_eq!(res.status.code(), Some(2));
}

fn evaluate(generated: &Path, reference: &Path, beats: Option<&Path>, out: &Path) -> Value {
    let mut args = vec![
        "evaluate",
        "--generated",
        s(generated),
        "--reference",
        s(reference),
        "--out",
        s(out),
    ];
    if let Some(b) = beats {
        args.extend(["--beats", s(b)]);
    }
    ok(&args);
    read(out)
}

#[test]
fn evaluation_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["make-data", "--out", s(&data), "--count", "12", "--seed", "5"]);

    let same = evaluate(&data, &data, None, &dir.path().join("self.json"));
    assert!(same["fid_k"].as_f64().unwrap().abs() <= 1e-6);
    assert!(same["fid_g"].as_f64().unwrap().abs() <= 1e-6);
    assert!(same["beat_align"].as_f64().unwrap() > 0.0);

    // the same motions judged against beats shifted by half a beat period
    let shifted = dir.path().join("shifted");
    std::fs::create_dir_all(&shifted).unwrap();
    for i in 0..12 {
        let name = format!("item_{i:04}.beats.json");
        let mut b = read(&data.join(&name));
        let beats: Vec<i64> = serde_json::from_value(b["beats"].clone()).unwrap();
        let half = (beats[1] - beats[0]) / 2;
        let frames = b["frames"].as_i64().unwrap();
        let moved: Vec<i64> = beats.iter().map(|x| x + half).filter(|&x| x < frames).collect();
        b["beats"] = serde_json::to_value(moved).unwrap();
        std::fs::write(shifted.join(&name), serde_json::to_vec(&b).unwrap()).unwrap();
    }
    let off = evaluate(&data, &data, Some(&shifted), &dir.path().join("off.json"));
    assert!(same["beat_align"].as_f64().unwrap() > off["beat_align"].as_f64().unwrap() + 0.2);

    let single = dir.path().join("single");
    std::fs::create_dir_all(&single).unwrap();
    for kind in ["motion", "beats"] {
        let name = format!("item_0000.{kind}.json");
        std::fs::copy(data.join(&name), single.join(&name)).unwrap();
    }
    let one = evaluate(&single, &data, None, &dir.path().join("one.json"));
    assert!(one["div_k"].is_null());
    assert!(one["errors"]["div_k"].is_string());
    assert!(one["beat_align"].is_number());
    assert!(one["pfc_mean"].is_number());
}
