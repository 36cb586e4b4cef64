use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
[scene]
timesteps = 2
views = 2
size = 16
objects = 2

[vq4d]
latent_dim = 8
codebook_size = 16
token_dim = 16
heads = 2
enc_channels = 4
gaussians = 8
voxel_res = 4
unet_channels = 4

[train_vq]
steps = 3
warmup = 1

[star]
dim = 16
layers = 1
heads = 2
ffn_hidden = 16
text_buckets = 32
text_dim = 8
time_dim = 8

[container]
centers = 3
neighbors = 2
heads = 2
score_hidden = 8

[train_star]
steps = 3
warmup = 1
";

fn star4d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_star4d")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = star4d(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    dir: TempDir,
    cfg: PathBuf,
    data: PathBuf,
    vq: PathBuf,
    star: PathBuf,
}

fn trained() -> Run {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    let vq = dir.path().join("vq.ckpt");
    let star = dir.path().join("star.ckpt");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train-vqvae", "--config", s(&cfg), "--data", s(&data), "--out", s(&vq)]);
    ok(&["train-star", "--config", s(&cfg), "--data", s(&data), "--vq", s(&vq), "--out", s(&star)]);
    Run {
        dir,
        cfg,
        data,
        vq,
        star,
    }
}

#[test]
fn synth_flags_and_rejections() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    let text = ok(&["synth", "--t", "2", "--views", "3", "--size", "16", "--objects", "1", "--seed", "4", "--out", s(&out)]);
    assert!(text.starts_with("1 objects, T=2 V=3 16x16"), "{text}");
    assert!(out.join("obj0000/t1_v2.png").exists());

    let bad = star4d(&["synth", "--size", "33", "--out", s(&dir.path().join("e"))]);
    assert!(!bad.status.success());
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.starts_with("error: synth: config:") && err.contains("multiple of 8"), "{err}");
    assert!(!dir.path().join("e").exists());

    let missing = star4d(&["synth"]);
    assert!(!missing.status.success());
}

#[test]
fn missing_dataset_is_stage_tagged() {
    let dir = TempDir::new().unwrap();
    let o = star4d(&["train-vqvae", "--data", s(&dir.path().join("none")), "--out", s(&dir.path().join("x"))]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.starts_with("error: train-vqvae: load-dataset:"), "{err}");
}

#[test]
fn end_to_end_generate_eval_and_report() {
    let r = trained();
    let obj = r.data.join("obj0000");
    let gen = |name: &str, seed: &str| {
        let out = r.dir.path().join(name);
        ok(&[
            "generate", "--config", s(&r.cfg), "--star", s(&r.star), "--vq", s(&r.vq), "--video", s(&obj),
            "--seed", seed, "--top-k", "4", "--out", s(&out),
        ]);
        out
    };
    let a = gen("a", "7");
    let b = gen("b", "7");
    assert_eq!(fs::read(a.join("tokens.tg")).unwrap(), fs::read(b.join("tokens.tg")).unwrap());
    let pngs = fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 4);

    let d = r.dir.path().join("decoded");
    ok(&["generate", "--vq", s(&r.vq), "--tokens", s(&a.join("tokens.tg")), "--out", s(&d)]);
    for f in ["t0_v0.png", "t1_v1.png", "gaussians_t0.txt", "gaussians_t1.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(d.join(f)).unwrap(), "{f}");
    }

    let table = ok(&["eval", "--generated", s(&a), "--truth", s(&obj)]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "object\tpsnr\tssim\ttemporal_consistency");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("mean\t"));

    let report = r.dir.path().join("clusters.tsv");
    ok(&["cluster-report", "--star", s(&r.star), "--vq", s(&r.vq), "--sample", s(&obj), "--out", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    let (tokens, hist) = text.split_once("# histogram\n").unwrap();
    assert_eq!(tokens.lines().count(), 1 + 32);
    let sizes: usize = hist.lines().skip(1).map(|l| l.split('\t').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(sizes, 32);
}

#[test]
fn overrides_reach_the_config() {
    let r = trained();
    let o = star4d(&[
        "train-star", "--config", s(&r.cfg), "--data", s(&r.data), "--vq", s(&r.vq),
        "--set", "star.dim=17", "--out", s(&r.dir.path().join("x.ckpt")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("star.dim"));
}
