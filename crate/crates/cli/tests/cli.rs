use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oca_core::retrieval::{load_store, save_store, FeatureRecord, FeatureStore};

const TINY: &str = r#"
seeds = [0, 1]
output_dir = "OUT"

[data]
seed = 3
num_classes = 4
old_classes = 2
per_class_train = 12
per_class_eval = 6
input_dim = 6
class_separation = 1.0
noise_sigma = 0.3

[train]
epochs = 2
batch_size = 8
lr = 0.005
d_old = 3
d_extra = 2
lambda1 = 10.0
lambda2 = 5.0
lambda_bct = 1.0
mode = "oca"
hidden_dims = [8]
"#;

fn oca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oca"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = oca(args);
    assert!(
        out.status.success(),
        "oca {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = oca(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

/// Writes the tiny config into `dir`, pointing its outputs at `dir/out`.
fn tiny_config(dir: &Path, text: &str) -> (PathBuf, PathBuf) {
    let out = dir.join("out");
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, text.replace("OUT", out.to_str().unwrap())).unwrap();
    (cfg, out)
}

fn run_pipeline(cfg: &str) {
    ok(&["gen-data", "--config", cfg]);
    ok(&["train", "--config", cfg, "--role", "old"]);
    ok(&["train", "--config", cfg, "--role", "new"]);
    ok(&[
        "train",
        "--config",
        cfg,
        "--role",
        "new",
        "--mode",
        "independent",
    ]);
    ok(&["compat-report", "--config", cfg]);
}

fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.log" {
                files.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn full_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (cfg_a, out_a) = tiny_config(a.path(), TINY);
    let (cfg_b, out_b) = tiny_config(b.path(), TINY);
    run_pipeline(cfg_a.to_str().unwrap());
    run_pipeline(cfg_b.to_str().unwrap());
    let (sa, sb) = (snapshot(&out_a), snapshot(&out_b));
    assert!(sa.iter().any(|(p, _)| p.ends_with("seed-1/new-oca.ckpt")));
    assert!(sa
        .iter()
        .any(|(p, _)| p.ends_with("compat-report-oca.json")));
    for ((pa, ba), (pb, bb)) in sa.iter().zip(&sb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{} differs", pa.display());
    }
    assert_eq!(sa.len(), sb.len());

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out_a.join("compat-report-oca.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"].as_array().unwrap().len(), 2);
    let manifest = fs::read_to_string(out_a.join("manifest.log")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    assert!(manifest
        .lines()
        .next()
        .unwrap()
        .starts_with("run=seed-0/old "));
}

#[test]
fn gen_data_checksums_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = tiny_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let first = ok(&["gen-data", "--config", cfg]);
    assert_eq!(first.lines().count(), 2);
    assert_eq!(first, ok(&["gen-data", "--config", cfg]));
}

#[test]
fn new_role_without_old_model_names_the_missing_step() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = tiny_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    let err = fails_with(&["train", "--config", cfg, "--role", "new"], 2);
    assert!(err.contains("gen-data"), "{err}");
    ok(&["gen-data", "--config", cfg]);
    let err = fails_with(&["train", "--config", cfg, "--role", "new"], 2);
    assert!(err.contains("train --role old --seeds 0,1"), "{err}");
    assert!(!out.join("seed-0").join("new-oca.ckpt").exists());
    let err = fails_with(&["compat-report", "--config", cfg], 2);
    assert!(err.contains("--role old"), "{err}");
}

#[test]
fn config_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = tiny_config(dir.path(), &TINY.replace("epochs = 2\n", ""));
    let err = fails_with(&["gen-data", "--config", cfg.to_str().unwrap()], 2);
    assert!(err.contains("epochs"), "{err}");

    let (cfg, _) = tiny_config(
        dir.path(),
        &TINY.replace("lr = 0.005", "lr = 0.005\nlearning_rate = 1.0"),
    );
    let err = fails_with(&["gen-data", "--config", cfg.to_str().unwrap()], 2);
    assert!(err.contains("learning_rate"), "{err}");

    let (cfg, _) = tiny_config(dir.path(), &TINY.replace("d_extra = 2", "d_extra = 0"));
    let err = fails_with(&["gen-data", "--config", cfg.to_str().unwrap()], 2);
    assert!(err.contains("d_extra"), "{err}");

    fails_with(
        &[
            "gen-data",
            "--config",
            dir.path().join("absent.toml").to_str().unwrap(),
        ],
        2,
    );
    fails_with(&["train", "--config", "x.toml", "--role", "middle"], 2);
}

#[test]
fn unknown_mode_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = tiny_config(
        dir.path(),
        &TINY.replace("mode = \"oca\"", "mode = \"fancy\""),
    );
    let err = fails_with(&["gen-data", "--config", cfg.to_str().unwrap()], 2);
    assert!(err.contains("fancy"), "{err}");
}

fn store(dim: usize, rows: &[(u32, &[f64])]) -> FeatureStore {
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, (label, f))| FeatureRecord {
            id: i as u64,
            label: *label,
            feature: f.to_vec(),
        })
        .collect();
    FeatureStore::new(dim, records).unwrap()
}

#[test]
fn eval_handles_padding_and_bad_stores() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let s = |n: &str| p(n).to_str().unwrap().to_string();
    save_store(
        &store(
            2,
            &[
                (0, &[1.0, 0.1]),
                (0, &[0.9, 0.2]),
                (1, &[-0.2, 1.0]),
                (1, &[0.1, 0.8]),
            ],
        ),
        &p("old.ocaf"),
    )
    .unwrap();
    save_store(
        &store(
            3,
            &[
                (0, &[1.0, 0.0, 0.5]),
                (0, &[0.8, 0.3, -0.2]),
                (1, &[0.0, 1.0, 0.1]),
                (1, &[-0.1, 0.9, 0.7]),
            ],
        ),
        &p("new.ocaf"),
    )
    .unwrap();

    let err = fails_with(
        &[
            "eval",
            "--query",
            &s("new.ocaf"),
            "--gallery",
            &s("old.ocaf"),
            "--out",
            &s("r.json"),
        ],
        2,
    );
    assert!(err.contains("--pad"), "{err}");

    let mut maps = Vec::new();
    for pad in ["zero", "truncate"] {
        let out = s(&format!("{pad}.json"));
        ok(&[
            "eval",
            "--query",
            &s("new.ocaf"),
            "--gallery",
            &s("old.ocaf"),
            "--pad",
            pad,
            "--out",
            &out,
        ]);
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
        assert_eq!(v["padding_mode"], pad);
        assert_eq!(v["query_model"], "new");
        maps.push(v["map_at_1"].as_f64().unwrap());
    }
    // a wider query only rescales each query's distances, so rankings agree
    assert_eq!(maps[0], maps[1]);

    fs::write(p("junk.ocaf"), b"OCAF\x01\x00\x00\x00garbage").unwrap();
    fails_with(
        &[
            "eval",
            "--query",
            &s("junk.ocaf"),
            "--gallery",
            &s("old.ocaf"),
            "--out",
            &s("j.json"),
        ],
        3,
    );
    fs::write(p("future.ocaf"), b"OCAF\x09\x00\x00\x00").unwrap();
    fails_with(
        &[
            "eval",
            "--query",
            &s("future.ocaf"),
            "--gallery",
            &s("old.ocaf"),
            "--out",
            &s("f.json"),
        ],
        3,
    );
    fails_with(
        &[
            "eval",
            "--query",
            &s("none.ocaf"),
            "--gallery",
            &s("old.ocaf"),
            "--out",
            &s("n.json"),
        ],
        3,
    );

    save_store(
        &store(2, &[(0, &[0.0, 0.0]), (1, &[1.0, 0.0])]),
        &p("zero.ocaf"),
    )
    .unwrap();
    let err = fails_with(
        &[
            "eval",
            "--query",
            &s("zero.ocaf"),
            "--gallery",
            &s("old.ocaf"),
            "--out",
            &s("z.json"),
        ],
        4,
    );
    assert!(err.contains("zero-norm"), "{err}");
}

#[test]
fn extract_writes_requested_part() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = tiny_config(dir.path(), TINY);
    let cfg = cfg.to_str().unwrap();
    ok(&["gen-data", "--config", cfg]);
    ok(&["train", "--config", cfg, "--role", "old", "--seeds", "1"]);
    ok(&["train", "--config", cfg, "--role", "new", "--seeds", "1"]);
    assert!(!out.join("seed-0").join("old.ckpt").exists());
    let ckpt = out.join("seed-1").join("new-oca.ckpt");
    let data = out.join("data").join("eval.txt");
    for (part, dim) in [("full", 5), ("bct", 3)] {
        let store_path = dir.path().join(format!("{part}.ocaf"));
        ok(&[
            "extract",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--part",
            part,
            "--out",
            store_path.to_str().unwrap(),
        ]);
        let s = load_store(&store_path).unwrap();
        assert_eq!((s.dim(), s.len()), (dim, 24));
    }
    let old_ckpt = out.join("seed-1").join("old.ckpt");
    fails_with(
        &[
            "extract",
            "--checkpoint",
            old_ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--part",
            "full",
            "--out",
            dir.path().join("x.ocaf").to_str().unwrap(),
        ],
        2,
    );
}
