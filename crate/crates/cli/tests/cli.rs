use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ksvs(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksvs"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const DESK: &str = "scale_factor = 10000
consumer_channels = 16
enc_dim = 32
dec_dim = 32
postnet_channels = 32
pitch_dim = 32
pitch_ff = 64
pitch_layers = 2
disc_channels = 8
slice_len = 32
";

fn corpus(dir: &Path) {
    let o = ksvs(&["make-corpus", "--out", "data", "--embedding-dim", "32"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn pitch_loss_of_identical_contours_is_the_floor() {
    let tmp = tempfile::tempdir().unwrap();
    corpus(tmp.path());
    let o = ksvs(&["pitch-loss", "--gt", "data/utt0.f0.kse", "--gen", "data/utt0.f0.kse"], tmp.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "-18.420680744");
}

#[test]
fn gradcheck_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ksvs(&["gradcheck", "pitch", "--seed", "7"], tmp.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("failures 0"));
    let o = ksvs(&["gradcheck", "pitch", "--seed", "7", "--pairs", "3", "--tolerance", "1e-30"], tmp.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn error_classes_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ksvs(&["select-dims", "--manifest", "bad.tsv", "--out", "m.ksm"], tmp.path());
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("bad.tsv"));

    fs::write(tmp.path().join("junk.kse"), b"nope").unwrap();
    let o = ksvs(&["inspect", "junk.kse"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad magic"));

    fs::write(tmp.path().join("bad.cfg"), "scale_factor = 7\n").unwrap();
    corpus(tmp.path());
    let o = ksvs(
        &["train", "--config", "bad.cfg", "--manifest", "data/manifest.tsv", "--out", "ck", "--steps", "1"],
        tmp.path(),
    );
    assert_eq!(code(&o), 1);

    let o = ksvs(&["frobnicate"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn every_command_has_help() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in [
        "select-dims",
        "reduce",
        "pitch-loss",
        "gradcheck",
        "train",
        "synth",
        "params",
        "inspect",
        "make-corpus",
    ] {
        let o = ksvs(&[cmd, "--help"], tmp.path());
        assert_eq!(code(&o), 0, "{cmd}");
        assert!(stdout(&o).contains("Usage"), "{cmd}");
    }
}

#[test]
fn selection_and_reduction_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    corpus(t);
    let select = |out: &str, report: &str| {
        let o = ksvs(&["select-dims", "--manifest", "data/manifest.tsv", "--out", out, "--report", report], t);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        stdout(&o)
    };
    let first = select("a.ksm", "a.tsv");
    assert_eq!(first, select("b.ksm", "b.tsv"));
    assert!(first.starts_with("selected 8 of 32 dims"));
    assert_eq!(fs::read(t.join("a.ksm")).unwrap(), fs::read(t.join("b.ksm")).unwrap());
    assert_eq!(fs::read(t.join("a.tsv")).unwrap(), fs::read(t.join("b.tsv")).unwrap());

    let o = ksvs(&["inspect", "a.ksm"], t);
    assert!(stdout(&o).contains("mask 8 of 32"));

    let o = ksvs(&["reduce", "--mask", "a.ksm", "--input", "data/utt0.ssl.kse", "--out", "r.kse"], t);
    assert_eq!(code(&o), 0);
    let o = ksvs(&["inspect", "r.kse"], t);
    assert!(stdout(&o).starts_with("shape 24 x 8"), "{}", stdout(&o));
}

#[test]
fn train_then_synthesize() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    corpus(t);
    fs::write(t.join("desk.cfg"), DESK).unwrap();
    let o = ksvs(&["select-dims", "--manifest", "data/manifest.tsv", "--out", "mask.ksm"], t);
    assert_eq!(code(&o), 0);
    let o = ksvs(&["reduce", "--mask", "mask.ksm", "--manifest", "data/manifest.tsv", "--out", "red"], t);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let train = |out: &str| {
        let o = ksvs(
            &[
                "train", "--config", "desk.cfg", "--manifest", "red/manifest.tsv", "--out", out, "--steps", "12", "--seed", "3",
            ],
            t,
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    train("ck1");
    train("ck2");
    assert_eq!(dir_bytes(&t.join("ck1")), dir_bytes(&t.join("ck2")));

    let o = ksvs(
        &[
            "synth", "--checkpoint", "ck1", "--text", "la la", "--embedding", "red/utt0.reduced.kse", "--speaker", "spk1",
            "--frames", "40", "--out", "mel.kse",
        ],
        t,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ksvs(&["inspect", "mel.kse"], t);
    assert!(stdout(&o).contains("shape 40 x 80"));
    assert!(stdout(&o).contains("nonfinite 0"));

    let o = ksvs(
        &[
            "synth", "--checkpoint", "ck1", "--text", "la", "--embedding", "red/utt0.reduced.kse", "--speaker", "ghost",
            "--out", "x.kse",
        ],
        t,
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn params_reports_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = ksvs(&["params"], tmp.path());
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    for key in ["consumer", "acoustic", "pitch", "generator_total", "discriminator"] {
        assert!(out.lines().any(|l| l.starts_with(key)), "{key}");
    }
}
