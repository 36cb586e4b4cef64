use std::io::sink;

use tempfile::TempDir;

use super::*;
use crate::scene_synth::{save_dataset, SpatioTemporalMatrix};

fn tiny_overrides() -> Vec<String> {
    [
        "scene.timesteps=2",
        "scene.views=2",
        "scene.size=16",
        "scene.objects=2",
        "vq4d.latent_dim=8",
        "vq4d.codebook_size=16",
        "vq4d.token_dim=16",
        "vq4d.heads=2",
        "vq4d.enc_channels=4",
        "vq4d.gaussians=8",
        "vq4d.voxel_res=4",
        "vq4d.unet_channels=4",
        "train_vq.steps=3",
        "train_vq.warmup=1",
        "star.dim=16",
        "star.layers=1",
        "star.heads=2",
        "star.ffn_hidden=16",
        "star.text_buckets=32",
        "star.text_dim=8",
        "star.time_dim=8",
        "container.centers=3",
        "container.neighbors=2",
        "container.heads=2",
        "container.score_hidden=8",
        "train_star.steps=3",
        "train_star.warmup=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn tiny(extra: &[&str]) -> RunConfig {
    let mut o = tiny_overrides();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &o, None).unwrap()
}

struct Fixture {
    dir: TempDir,
    cfg: RunConfig,
    data: PathBuf,
    vq: PathBuf,
    star: PathBuf,
}

fn fixture(extra: &[&str]) -> Fixture {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(extra);
    let data = dir.path().join("data");
    cmd_synth(&cfg, &data).unwrap();
    let vq = dir.path().join("vq.ckpt");
    cmd_train_vqvae(&cfg, &data, &vq, None, &mut sink()).unwrap();
    let star = dir.path().join("star.ckpt");
    cmd_train_star(&cfg, &data, &vq, &star, None, &mut sink()).unwrap();
    Fixture {
        dir,
        cfg,
        data,
        vq,
        star,
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn config_defaults_and_derived_geometry() {
    let d = RunConfig::default();
    assert_eq!((d.vq.timesteps, d.vq.views, d.vq.height), (4, 4, 32));
    assert_eq!(d.train_star.steps, 500);
    let c = RunConfig::load(None, &["scene.size=16".into(), "run.seed=5".into()], None).unwrap();
    assert_eq!((c.vq.height, c.vq.width, c.vq.seed, c.star.seed), (16, 16, 5, 5));
    let c = RunConfig::load(None, &["vq4d.seed=3".into()], Some(9)).unwrap();
    assert_eq!((c.run.seed, c.vq.seed, c.star.seed), (9, 9, 9));
}

#[test]
fn config_rejects_bad_input_before_work() {
    assert!(RunConfig::load(None, &["scene.size=33".into()], None).is_err());
    assert!(RunConfig::load(None, &["scene.colour=1".into()], None).is_err());
    assert!(RunConfig::load(None, &["bogus.key=1".into()], None).is_err());
    assert!(RunConfig::load(None, &["star.container=sideways".into()], None).is_err());
    assert!(RunConfig::load(None, &["train_star.lr=0".into()], None).is_err());
}

#[test]
fn config_text_round_trip() {
    let c = tiny(&["sampling.top_k=7", "train_vq.lr=0.002"]);
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("run.cfg");
    fs::write(&p, c.to_text()).unwrap();
    assert_eq!(RunConfig::load(Some(&p), &[], None).unwrap(), c);
}

#[test]
fn synth_is_seeded() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(&[]);
    let a = cmd_synth(&cfg, &dir.path().join("a")).unwrap();
    cmd_synth(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(a.objects.len(), 2);
    for name in ["obj0000", "obj0001"] {
        assert_eq!(files(&dir.path().join("a").join(name)), files(&dir.path().join("b").join(name)));
    }
    let other = RunConfig { run: RunSection { seed: 1 }, ..cfg };
    cmd_synth(&other, &dir.path().join("c")).unwrap();
    assert_ne!(files(&dir.path().join("a/obj0000")), files(&dir.path().join("c/obj0000")));
}

#[test]
fn training_needs_a_matching_dataset() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(&[]);
    let err = cmd_train_vqvae(&cfg, &dir.path().join("missing"), &dir.path().join("x.ckpt"), None, &mut sink())
        .unwrap_err()
        .to_string();
    assert!(err.starts_with("load-dataset"), "{err}");
    let data = dir.path().join("data");
    cmd_synth(&cfg, &data).unwrap();
    let wide = tiny(&["vq4d.views=3"]);
    let err = cmd_train_vqvae(&wide, &data, &dir.path().join("x.ckpt"), None, &mut sink())
        .unwrap_err()
        .to_string();
    assert!(err.contains("vq4d.views"), "{err}");
    assert!(!dir.path().join("x.ckpt").exists());
}

#[test]
fn vq_training_logs_and_resumes() {
    let f = fixture(&[]);
    let log = fs::read_to_string(log_path(&f.vq)).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    assert!(log.starts_with("step\tlr\ttotal\trecon"));
    let more = RunConfig {
        train_vq: TrainConfig {
            steps: 5,
            ..f.cfg.train_vq.clone()
        },
        ..f.cfg.clone()
    };
    let out = f.dir.path().join("vq2.ckpt");
    fs::copy(log_path(&f.vq), log_path(&out)).unwrap();
    let r = cmd_train_vqvae(&more, &f.data, &out, Some(&f.vq), &mut sink()).unwrap();
    assert_eq!((r.start_step, r.end_step), (3, 5));
    assert_eq!(Checkpoint::load(&out).unwrap().step, 5);
    let steps: Vec<String> = fs::read_to_string(log_path(&out))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4"]);

    let changed = tiny(&["vq4d.commitment=0.5"]);
    let err = cmd_train_vqvae(&changed, &f.data, &out, Some(&f.vq), &mut sink()).unwrap_err().to_string();
    assert!(err.contains("vq4d.commitment"), "{err}");
}

#[test]
fn star_training_keeps_vq_frozen_and_logs_groups() {
    let f = fixture(&[]);
    let before = fs::read(&f.vq).unwrap();
    let out = f.dir.path().join("again.ckpt");
    cmd_train_star(&f.cfg, &f.data, &f.vq, &out, None, &mut sink()).unwrap();
    assert_eq!(fs::read(&f.vq).unwrap(), before);
    let log = fs::read_to_string(log_path(&out)).unwrap();
    let header: Vec<&str> = log.lines().next().unwrap().split('\t').collect();
    assert_eq!(header[4..], ["ce_group0", "ce_group1"]);
    for line in log.lines().skip(1) {
        assert_eq!(line.split('\t').count(), 4 + 2);
    }
    // training the same config twice gives identical weights
    assert_eq!(fs::read(&out).unwrap(), fs::read(&f.star).unwrap());
}

#[test]
fn generate_writes_frames_and_is_reproducible() {
    let f = fixture(&[]);
    let obj = f.data.join("obj0001");
    let a = f.dir.path().join("gen_a");
    let b = f.dir.path().join("gen_b");
    cmd_generate(&f.cfg, &f.star, &f.vq, &obj, None, &a).unwrap();
    cmd_generate(&f.cfg, &f.star, &f.vq, &obj, None, &b).unwrap();
    assert_eq!(files(&a), files(&b));
    let names: Vec<String> = files(&a).into_iter().map(|x| x.0).collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 2 * 2);
    assert_eq!(names.iter().filter(|n| n.starts_with("gaussians_t")).count(), 2);
    let dump = fs::read_to_string(a.join("gaussians_t1.txt")).unwrap();
    assert_eq!(dump.lines().count(), 1 + 8);

    let d = f.dir.path().join("decoded");
    cmd_decode(&f.vq, &a.join(TOKENS_FILE), &a, &d).unwrap();
    assert_eq!(files(&a), files(&d));

    // inputs are left untouched
    let before = files(&obj);
    cmd_generate(&f.cfg, &f.star, &f.vq, &f.data, Some("a blue ball"), &f.dir.path().join("all")).unwrap();
    assert_eq!(files(&obj), before);
    assert_eq!(list_collection(&f.dir.path().join("all")).unwrap().len(), 2);
}

#[test]
fn generate_static_single_timestep() {
    let f = fixture(&["scene.timesteps=1"]);
    let out = f.dir.path().join("static");
    cmd_generate(&f.cfg, &f.star, &f.vq, &f.data.join("obj0000"), None, &out).unwrap();
    let names: Vec<String> = files(&out).into_iter().map(|x| x.0).collect();
    assert!(names.contains(&"t0_v0.png".to_string()) && names.contains(&"t0_v1.png".to_string()));
    assert_eq!(names.iter().filter(|n| n.ends_with(".png")).count(), 2);
    assert_eq!(TokenGrid::load(&out.join(TOKENS_FILE)).unwrap().timesteps, 1);
}

#[test]
fn generate_rejects_mismatched_checkpoints() {
    let f = fixture(&[]);
    let err = cmd_generate(&f.cfg, &f.vq, &f.vq, &f.data, None, &f.dir.path().join("x"))
        .unwrap_err()
        .to_string();
    assert!(err.starts_with("load-star"), "{err}");
}

fn flat(m: &SpatioTemporalMatrix, v: f64) -> SpatioTemporalMatrix {
    SpatioTemporalMatrix {
        pixels: vec![v; m.pixels.len()],
        ..m.clone()
    }
}

#[test]
fn eval_boundaries() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny(&[]);
    let data = dir.path().join("data");
    cmd_synth(&cfg, &data).unwrap();
    let same = cmd_eval(&data, &data).unwrap();
    assert_eq!(same.rows.len(), 2);
    for r in &same.rows {
        assert!(r.metrics.psnr.is_infinite() && r.metrics.psnr > 0.0);
        assert!((r.metrics.ssim - 1.0).abs() < 1e-12);
    }
    assert!(same.to_table().lines().last().unwrap().starts_with("mean\tinf"));

    let s = load_dataset(&data.join("obj0000")).unwrap();
    let black = dir.path().join("black");
    save_frames(&flat(&s.matrix, 0.0), "black", &black).unwrap();
    let white = dir.path().join("white");
    save_dataset(
        &Sample {
            matrix: flat(&s.matrix, 1.0),
            ..s.clone()
        },
        &white,
    )
    .unwrap();
    let r = cmd_eval(&black, &white).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert!(r.rows[0].metrics.psnr.abs() < 1e-12);
    assert!((-1.0..=1.0).contains(&r.rows[0].metrics.ssim));
    assert!(cmd_eval(&black, &data).is_err());
}

#[test]
fn cluster_report_table() {
    let f = fixture(&[]);
    let r = cmd_cluster_report(&f.star, &f.vq, &f.data).unwrap();
    let pool = 2 * 16;
    assert_eq!(r.rows.len(), pool);
    assert_eq!(r.histogram.iter().map(|h| h.1).sum::<usize>(), pool);
    assert_eq!(r.rows.iter().filter(|x| x.center).count(), 3);
    for (c, &(center, _)) in r.histogram.iter().enumerate() {
        assert!(r.rows[center].center && r.rows[center].cluster == c);
    }
    let table = r.to_table();
    assert!(table.starts_with("index\ttoken\tgroup\tview\tposition\trho\tvarpi\trho_varpi\tcluster\tcenter\n"));
    assert_eq!(table.lines().count(), 1 + pool + 2 + 3);
}
