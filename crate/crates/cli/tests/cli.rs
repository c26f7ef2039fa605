use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const TINY: &str = r#"
lipspace_seconds = 60
sweep_fractions = [1.0, 0.5]

[corpus]
minutes = 2.0
min_videos = 4

[train]
epochs = 1
top_k_average = 1

[pretrain]
epochs = 1
"#;

fn textlip(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_textlip"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn textlip")
}

fn ok(args: &[&str], dir: &Path) -> Value {
    let out = textlip(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let line = String::from_utf8(out.stdout).unwrap();
    assert_eq!(line.lines().count(), 1, "summary must be one line: {line}");
    let v: Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(v["status"], "ok");
    v
}

fn first_file(dir: &Path) -> PathBuf {
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files.remove(0)
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

/// Shared tiny corpus plus a one-epoch model.
fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        std::fs::write(root.join("tiny.toml"), TINY).unwrap();
        ok(&["--config", "tiny.toml", "--out-dir", "base", "make-corpus"], &root);
        ok(
            &[
                "--config",
                "tiny.toml",
                "--out-dir",
                "base",
                "train",
                "--corpus",
                "base/corpus",
            ],
            &root,
        );
        Fixture { _tmp: tmp, root }
    })
}

#[test]
fn landmark_pipeline_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let v = ok(
        &["--out-dir", "lm", "gen-landmarks", "--videos", "2", "--seconds", "5"],
        d,
    );
    assert_eq!(v["tracks"].as_array().unwrap().len(), 2);

    let v = ok(&["--out-dir", "pca", "fit-pca", "--components", "8", "lm/landmarks"], d);
    let ratio = v["explained_variance"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio <= 1.0 + 1e-12);
    assert!(d.join("pca/lipspace.json").exists());

    let v = ok(
        &[
            "--out-dir",
            "pca",
            "sweep-components",
            "--lipspace",
            "pca/lipspace.json",
            "--count",
            "5",
        ],
        d,
    );
    assert_eq!(v["scales"].as_array().unwrap().len(), 5);
    let svg = std::fs::read_to_string(d.join("pca/component_sweep.svg")).unwrap();
    assert_eq!(svg.matches("<polygon").count(), 8 * 5 * 2);
    let csv = std::fs::read_to_string(d.join("pca/component_sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 * 5);

    ok(
        &[
            "--out-dir",
            "b",
            "gen-landmarks",
            "--speaker",
            "shifted",
            "--videos",
            "1",
            "--seconds",
            "5",
        ],
        d,
    );
    let v = ok(
        &[
            "--out-dir",
            "pca",
            "adapt",
            "--lipspace",
            "pca/lipspace.json",
            "b/landmarks",
        ],
        d,
    );
    assert!(v["mean_shift"].as_f64().unwrap() > 0.0);
    assert!(d.join("pca/lipspace_adapted.json").exists());
}

#[test]
fn model_subcommands() {
    let f = fixture();
    let d = f.root.as_path();
    let audio = first_file(&d.join("base/corpus/audio"));
    let audio = audio.to_str().unwrap();

    let v = ok(
        &[
            "--out-dir",
            "inf",
            "infer",
            "--model",
            "base/model.json",
            "--audio",
            audio,
            "--lipspace",
            "base/corpus/lipspace.json",
            "--dump-features",
        ],
        d,
    );
    let frames = v["frames"].as_u64().unwrap() as usize;
    assert!(frames > 0);
    let traj = std::fs::read_to_string(d.join(v["trajectory"].as_str().unwrap())).unwrap();
    assert_eq!(traj.lines().count(), frames + 1);
    assert_eq!(traj.lines().next().unwrap().split(',').count(), 9);
    let lips = std::fs::read_to_string(d.join(v["lips"].as_str().unwrap())).unwrap();
    assert_eq!(lips.lines().nth(1).unwrap().split(',').count(), 41);

    let v = ok(
        &[
            "--out-dir",
            "ev",
            "eval",
            "--model",
            "base/model.json",
            "--corpus",
            "base/corpus",
        ],
        d,
    );
    let m8 = v["mse_8d"].as_f64().unwrap();
    let m40 = v["mse_40d"].as_f64().unwrap();
    assert!(m8.is_finite() && m8 > 0.0);
    assert!((m40 - m8 * 8.0 / 40.0).abs() < 0.05 * m8, "{m8} {m40}");

    for mode in ["natural", "phone-delta", "dtw"] {
        let v = ok(
            &[
                "--config",
                "tiny.toml",
                "--out-dir",
                "ev",
                "e2e-eval",
                "--model",
                "base/model.json",
                "--corpus",
                "base/corpus",
                "--mode",
                mode,
            ],
            d,
        );
        assert!(v["mse_8d"].as_f64().unwrap().is_finite());
    }
    assert!(d.join("ev/e2e_phone_delta.json").exists());
}

#[test]
fn training_variants() {
    let f = fixture();
    let d = f.root.as_path();
    let cfg = ["--config", "tiny.toml"];
    let v = ok(
        &[
            &cfg[..],
            &["--out-dir", "pre", "pretrain-encoder", "--corpus", "base/corpus"],
        ]
        .concat(),
        d,
    );
    assert!(v["heldout_accuracy"].as_f64().unwrap() >= 0.0);

    for init in ["pretrained", "frozen"] {
        let out = format!("tr_{init}");
        ok(
            &[
                &cfg[..],
                &[
                    "--out-dir",
                    &out,
                    "train",
                    "--corpus",
                    "base/corpus",
                    "--encoder",
                    "pre/encoder.json",
                    "--encoder-init",
                    init,
                ],
            ]
            .concat(),
            d,
        );
    }
    ok(
        &[
            &cfg[..],
            &[
                "--out-dir",
                "ft",
                "train",
                "--corpus",
                "base/corpus",
                "--init-model",
                "base/model.json",
            ],
        ]
        .concat(),
        d,
    );

    let v = ok(
        &[&cfg[..], &["--out-dir", "sw", "data-sweep", "--corpus", "base/corpus"]].concat(),
        d,
    );
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(
        rows[1]["train_videos"].as_u64().unwrap() * 2,
        rows[0]["train_videos"].as_u64().unwrap()
    );
    assert!(d.join("sw/data_sweep.svg").exists());
}

#[test]
fn pretrained_regime_without_encoder_is_a_config_error() {
    let f = fixture();
    let out = textlip(
        &[
            "--out-dir",
            "x",
            "train",
            "--corpus",
            "base/corpus",
            "--encoder-init",
            "pretrained",
        ],
        &f.root,
    );
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "config");
}

#[test]
fn synth_dtw_and_warp() {
    let f = fixture();
    let d = f.root.as_path();
    let track = first_file(&d.join("base/corpus/tracks"));
    let audio = first_file(&d.join("base/corpus/audio"));
    let v = ok(
        &[
            "--out-dir",
            "sy",
            "synth",
            "--track",
            track.to_str().unwrap(),
            "--formant-scale",
            "1.05",
        ],
        d,
    );
    let wav = v["audio"].as_str().unwrap().to_string();
    assert!(v["seconds"].as_f64().unwrap() > 0.0);

    let v = ok(
        &[
            "--out-dir",
            "inf2",
            "infer",
            "--model",
            "base/model.json",
            "--audio",
            &wav,
        ],
        d,
    );
    let traj = v["trajectory"].as_str().unwrap().to_string();

    let v = ok(
        &[
            "--out-dir",
            "dt",
            "dtw-align",
            "--reference",
            audio.to_str().unwrap(),
            "--query",
            &wav,
            "--trajectory",
            &traj,
        ],
        d,
    );
    let ref_frames = v["reference_frames"].as_u64().unwrap() as usize;
    let warped = std::fs::read_to_string(d.join("dt/warped.csv")).unwrap();
    assert_eq!(warped.lines().count(), ref_frames + 1);
    let path = std::fs::read_to_string(d.join("dt/dtw_path.csv")).unwrap();
    assert_eq!(path.lines().nth(1).unwrap(), "0,0");
}

#[test]
fn wer_from_strings_and_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let v = ok(
        &["wer", "--reference", "the cat sat", "--hypothesis", "the bat sat down"],
        d,
    );
    assert!((v["wer"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    std::fs::write(d.join("r.txt"), "one two").unwrap();
    std::fs::write(d.join("h.txt"), "one two").unwrap();
    let v = ok(&["wer", "--reference-file", "r.txt", "--hypothesis-file", "h.txt"], d);
    assert_eq!(v["wer"].as_f64().unwrap(), 0.0);
}

fn read_dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.toml"), TINY).unwrap();
    for run in ["r1", "r2"] {
        let cfg = ["--config", "tiny.toml", "--seed", "11", "--out-dir", run];
        ok(&[&cfg[..], &["make-corpus", "--minutes", "1"]].concat(), d);
        let corpus = format!("{run}/corpus");
        ok(&[&cfg[..], &["train", "--corpus", &corpus]].concat(), d);
        let track = first_file(&d.join(format!("{run}/corpus/tracks")));
        ok(&[&cfg[..], &["synth", "--track", track.to_str().unwrap()]].concat(), d);
    }
    let a = read_dir_bytes(&d.join("r1"));
    let b = read_dir_bytes(&d.join("r2"));
    assert!(a.iter().any(|(p, _)| p.ends_with("model.json")));
    assert!(a.iter().any(|(p, _)| p.extension().is_some_and(|x| x == "wav")));
    assert_eq!(a, b);

    ok(
        &[
            "--config",
            "tiny.toml",
            "--seed",
            "12",
            "--out-dir",
            "r3",
            "make-corpus",
            "--minutes",
            "1",
        ],
        d,
    );
    assert_ne!(
        std::fs::read(d.join("r1/corpus/corpus.json")).unwrap(),
        std::fs::read(d.join("r3/corpus/corpus.json")).unwrap()
    );
}

#[test]
fn failures_exit_nonzero_with_json_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("bad.toml"), "[model]\nheads = 5\n").unwrap();
    let cases: [(&[&str], &str); 3] = [
        (&["infer", "--model", "missing.json", "--audio", "missing.wav"], "io"),
        (
            &["--config", "bad.toml", "wer", "--reference", "a", "--hypothesis", "a"],
            "config",
        ),
        (&["fit-pca", "empty"], "empty"),
    ];
    std::fs::create_dir(d.join("empty")).unwrap();
    for (args, kind) in cases {
        let out = textlip(args, d);
        assert!(!out.status.success(), "{args:?}");
        assert!(out.stdout.is_empty());
        let text = String::from_utf8(out.stderr).unwrap();
        let line = text.lines().last().unwrap();
        let err: Value = serde_json::from_str(line).unwrap();
        assert_eq!(err["status"], "error");
        assert!(!err["message"].as_str().unwrap().is_empty());
        assert_eq!(err["kind"], kind, "{args:?}: {line}");
    }
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.toml", "full_recipe.toml"] {
        let cfg = dir.join(name);
        ok(
            &[
                "--config",
                cfg.to_str().unwrap(),
                "wer",
                "--reference",
                "a",
                "--hypothesis",
                "a",
            ],
            &dir,
        );
    }
}
