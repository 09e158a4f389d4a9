use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridvid::formats::{read_clip, write_clip, write_codebook};
use gridvid::synthdata::read_manifest;
use gridvid::video::{Image, VideoClip};
use gridvid::vq::CodeBook;

fn gridvid(args: &[&str]) -> Output {
    gridvid_env(args, &[])
}

fn gridvid_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gridvid"));
    cmd.args(args).env_remove("THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = gridvid(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny dataset, 32-word codebook and grid-order token directory.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(per_class: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Self { _dir: dir, root };
        let per_class = per_class.to_string();
        ok(&["make-data", "--per-class", &per_class, "--seed", "7", "--out", p(&f.path("data"))]);
        ok(&[
            "train-vq", "--data", p(&f.path("data/manifest.tsv")), "--codebook-size", "32", "--iters", "5",
            "--seed", "1", "--out", p(&f.path("cb.vqcb")),
        ]);
        ok(&[
            "encode", "--data", p(&f.path("data/manifest.tsv")), "--codebook", p(&f.path("cb.vqcb")),
            "--out", p(&f.path("tok")),
        ]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (tok, cb) = (self.path("tok"), self.path("cb.vqcb"));
        let mut args = vec!["train-ar", "--tokens", p(&tok), "--codebook", p(&cb)];
        args.extend(["--dim", "16", "--layers", "1", "--heads", "2", "--batch-size", "4"]);
        args.extend(["--eval-every", "2", "--checkpoint-every", "0", "--reference"]);
        args.extend(extra);
        let out_path = self.path(out);
        args.extend(["--out", p(&out_path)]);
        gridvid(&args)
    }
}

#[test]
fn make_data_writes_counted_clips_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&[
        "make-data", "--classes", "3", "--per-class", "50", "--frames", "16", "--size", "32", "--seed", "7",
        "--out", p(&out),
    ]);
    let clips = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "gfv"))
        .count();
    assert_eq!(clips, 150);
    assert_eq!(read_manifest(&out.join("manifest.tsv")).unwrap().len(), 150);
}

#[test]
fn make_data_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["make-data", "--per-class", "2", "--seed", "3", "--out", p(d)]);
    }
    for name in ["manifest.tsv", "c2_0001.gfv"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn generate_writes_requested_class() {
    let f = Fixture::new(2);
    assert!(f.train("m", &["--steps", "2"]).status.success());
    let gen = f.path("gen");
    ok(&[
        "generate", "--ckpt", p(&f.path("m/model.ckpt")), "--class", "1", "--num", "8", "--temperature", "1.0",
        "--top-k", "32", "--seed", "3", "--out", p(&gen),
    ]);
    let entries = read_manifest(&gen.join("manifest.tsv")).unwrap();
    assert_eq!(entries.len(), 8);
    for e in entries {
        let clip = read_clip(&e.path).unwrap();
        assert_eq!(clip.label, 1);
        assert_eq!(clip.num_frames(), 16);
    }
}

#[test]
fn generation_does_not_depend_on_thread_count() {
    let f = Fixture::new(2);
    assert!(f.train("m", &["--steps", "1"]).status.success());
    let ckpt = f.path("m/model.ckpt");
    for threads in ["1", "3"] {
        let out = f.path(&format!("gen{threads}"));
        let o = gridvid_env(
            &["generate", "--ckpt", p(&ckpt), "--num", "4", "--seed", "5", "--out", p(&out)],
            &[("THREADS", threads)],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["manifest.tsv", "c0_0003.gfv", "c2_0000.gfv"] {
        assert_eq!(
            std::fs::read(f.path("gen1").join(name)).unwrap(),
            std::fs::read(f.path("gen3").join(name)).unwrap()
        );
    }
    let bad = gridvid_env(
        &["generate", "--ckpt", p(&ckpt), "--out", p(&f.path("x"))],
        &[("THREADS", "zero")],
    );
    assert_eq!(bad.status.code(), Some(1));
}

/// Clip built from codewords on the 8-bit lattice, so quantization is lossless.
fn codeword_clip(cb: &CodeBook, frames: usize, side: usize) -> VideoClip {
    let (ph, pw) = (cb.patch_h(), cb.patch_w());
    let images = (0..frames)
        .map(|t| {
            let mut img = Image::filled(side, side, 1, 0).unwrap();
            for y in 0..side {
                for x in 0..side {
                    let word = (t + 3 * (y / ph) + x / pw) % cb.size();
                    let v = cb.codeword(word)[(y % ph) * pw + x % pw];
                    img.set(y, x, 0, (v * 255.0).round() as u8);
                }
            }
            img
        })
        .collect();
    VideoClip::new(images, 2, 0).unwrap()
}

#[test]
fn encode_then_decode_reproduces_codeword_clip_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let values: Vec<f64> = (0..4 * 64).map(|i| ((i * 37 + i / 64 * 11) % 256) as f64 / 255.0).collect();
    let cb = CodeBook::new(4, 8, 8, 1, values).unwrap();
    let cb_path = dir.path().join("cb.vqcb");
    write_codebook(&cb_path, &cb).unwrap();
    let clip_path = dir.path().join("in.gfv");
    write_clip(&clip_path, &codeword_clip(&cb, 16, 32)).unwrap();
    for order in ["grid", "frame-major"] {
        let tok = dir.path().join(format!("{order}.tok"));
        let back = dir.path().join(format!("{order}.gfv"));
        ok(&["encode", "--input", p(&clip_path), "--codebook", p(&cb_path), "--order", order, "--out", p(&tok)]);
        ok(&[
            "decode", "--input", p(&tok), "--codebook", p(&cb_path), "--frames", "16", "--size", "32", "--order",
            order, "--out", p(&back),
        ]);
        assert_eq!(std::fs::read(&clip_path).unwrap(), std::fs::read(&back).unwrap());
    }
}

#[test]
fn decode_takes_layout_from_checkpoint() {
    let f = Fixture::new(2);
    assert!(f.train("m", &["--steps", "1"]).status.success());
    let back = f.path("back.gfv");
    ok(&[
        "decode", "--input", p(&f.path("tok/c1_0000.tok")), "--ckpt", p(&f.path("m/model.ckpt")), "--out", p(&back),
    ]);
    let clip = read_clip(&back).unwrap();
    assert_eq!((clip.label, clip.num_frames(), clip.frame_dims()), (1, 16, (32, 32, 1)));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let f = Fixture::new(2);
    assert!(f.train("a", &["--steps", "4", "--seed", "9"]).status.success());
    assert!(f.train("b", &["--steps", "4", "--seed", "9"]).status.success());
    let read = |rel: &str| std::fs::read(f.path(rel)).unwrap();
    assert_eq!(read("a/model.ckpt"), read("b/model.ckpt"));
    assert_eq!(read("a/metrics.tsv"), read("b/metrics.tsv"));

    assert!(f.train("c", &["--steps", "2", "--seed", "9"]).status.success());
    let resume = f.path("c/model.ckpt");
    let out = f.train("c", &["--steps", "4", "--resume", p(&resume)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read("a/model.ckpt"), read("c/model.ckpt"));
    assert_eq!(read("a/metrics.tsv"), read("c/metrics.tsv"));
    assert_eq!(read("a/eval.tsv"), read("c/eval.tsv"));

    let changed = f.train("d", &["--steps", "4", "--lr", "0.5", "--resume", p(&resume)]);
    assert_eq!(changed.status.code(), Some(2));
    assert!(stderr(&changed).contains("incompatible"), "{}", stderr(&changed));
}

#[test]
fn config_file_feeds_settings_and_rejects_unknown_keys() {
    let f = Fixture::new(2);
    let good = f.path("good.cfg");
    std::fs::write(&good, "steps = 1\nsteps = 3\np_max = 0\n").unwrap();
    assert!(f.train("m", &["--config", p(&good)]).status.success());
    let metrics = std::fs::read_to_string(f.path("m/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(metrics.lines().skip(1).all(|l| l.split('\t').nth(2) == Some("0")));

    let bad = f.path("bad.cfg");
    std::fs::write(&bad, "steps = 1\ntemperature = 2\n").unwrap();
    let out = f.train("n", &["--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bad.cfg:2") && stderr(&out).contains("temperature"));
}

#[test]
fn ablate_grid_rows_and_reproducible_report() {
    let f = Fixture::new(20);
    let run = |out: &str| {
        let out_path = f.path(out);
        ok(&[
            "ablate", "--tokens", p(&f.path("tok")), "--codebook", p(&f.path("cb.vqcb")), "--real",
            p(&f.path("data/manifest.tsv")), "--grid", "0,0.3", "--steps", "2", "--dim", "16", "--layers", "1",
            "--heads", "2", "--batch-size", "4", "--per-class", "20", "--seed", "4", "--out", p(&out_path),
        ]);
        std::fs::read(out_path.join("ablation.tsv")).unwrap()
    };
    let a = run("ab1");
    let text = String::from_utf8(a.clone()).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("w/o SAT\t") && rows[1].starts_with("p_max=0.3\t"));
    assert!(f.path("ab1/pmax_0.ckpt").is_file() && f.path("ab1/pmax_0.3.ckpt").is_file());
    assert_eq!(a, run("ab2"));
}

#[test]
fn usage_errors_exit_one_with_one_line() {
    for args in [
        vec!["bogus"],
        vec![],
        vec!["make-data", "--per-class", "x", "--out", "d"],
        vec!["generate", "--num", "2"],
        vec!["ablate", "--tokens", "t", "--codebook", "c", "--real", "r", "--grid", "0,abc", "--out", "o"],
        vec!["recipe", "no-such-recipe", "--out", "o"],
    ] {
        let out = gridvid(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
        assert_eq!(stderr(&out).trim_end().lines().count(), 1, "{args:?}: {}", stderr(&out));
    }
    let help = gridvid(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("THREADS"));
}

#[test]
fn runtime_failures_exit_two_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = gridvid(&["generate", "--ckpt", p(&missing), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.ckpt"));

    let clip = dir.path().join("short.gfv");
    std::fs::write(&clip, b"GFV1\x01\x00").unwrap();
    let cb = dir.path().join("cb.vqcb");
    write_codebook(&cb, &CodeBook::new(2, 8, 8, 1, vec![0.0; 128]).unwrap()).unwrap();
    let tok = dir.path().join("o.tok");
    let out = gridvid(&["encode", "--input", p(&clip), "--codebook", p(&cb), "--out", p(&tok)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("short.gfv"), "{}", stderr(&out));
}
