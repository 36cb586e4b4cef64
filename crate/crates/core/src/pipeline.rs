//! Command implementations behind the CLI: dataset synthesis, two-stage
//! training, generation, evaluation and container diagnostics.
//!
//! Every command takes a [`RunConfig`] (or the parts it needs) plus paths and
//! returns a plain report. Errors carry the name of the failing stage.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{config_section, RawConfig, SamplingConfig, SceneConfig, Section, TrainConfig};
use crate::error::{invalid, Error, Result, StageExt};
use crate::metrics::{evaluate, ObjectMetrics};
use crate::par::Execution;
use crate::scene_synth::{
    list_collection, load_dataset, load_frames, make_orbit_cameras, object_name, random_scene, render_scene,
    save_collection, save_frames, write_index, CameraPose, Sample, SceneParams,
};
use crate::st_container::ContainerConfig;
use crate::star::{
    camera_rays, hash_words, video_tokens, Generation, StarConfig, StarDims, StarExample, StarModel, StarTrainer,
};
use crate::vq4d::{DynamicGaussians, TokenGrid, Vq4dModel, Vq4dTrainer, VqConfig};

/// Token file written next to generated frames.
pub const TOKENS_FILE: &str = "tokens.tg";

config_section! {
    /// Run-wide settings.
    pub struct RunSection ("run") {
        /// Seeds dataset synthesis, both model initializations and sampling.
        seed: u64 = 0,
    }
}

/// Every module config plus both training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub scene: SceneConfig,
    pub vq: VqConfig,
    pub train_vq: TrainConfig,
    pub star: StarConfig,
    pub container: ContainerConfig,
    pub train_star: TrainConfig,
    pub sampling: SamplingConfig,
}

/// Default STAR training schedule.
pub fn default_star_training() -> TrainConfig {
    TrainConfig {
        steps: 500,
        lr: 1e-3,
        warmup: 25,
        ..Default::default()
    }
}

fn keys<S: Section>() -> Vec<&'static str> {
    S::default().entries().into_iter().map(|(k, _)| k).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_raw(&RawConfig::default(), None).expect("defaults are valid")
    }
}

impl RunConfig {
    /// Reads an optional config file, applies `section.key=value` overrides and then `seed`, and validates.
    ///
    /// Unless set explicitly, the VQ-VAE geometry and background follow the `scene` section
    /// and the model seeds follow `run.seed`. A `seed` argument overrides every seed.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let raw = RawConfig::load(path, overrides)?;
        Self::from_raw(&raw, seed)
    }

    fn from_raw(raw: &RawConfig, seed: Option<u64>) -> Result<Self> {
        raw.check_known(&[
            ("run", keys::<RunSection>()),
            ("scene", keys::<SceneConfig>()),
            ("vq4d", keys::<VqConfig>()),
            ("train_vq", keys::<TrainConfig>()),
            ("star", keys::<StarConfig>()),
            ("container", keys::<ContainerConfig>()),
            ("train_star", keys::<TrainConfig>()),
            ("sampling", keys::<SamplingConfig>()),
        ])?;
        let mut run = raw.section("run", RunSection::default())?;
        if let Some(s) = seed {
            run.seed = s;
        }
        let scene = raw.section("scene", SceneConfig::default())?;
        let vq_base = VqConfig {
            timesteps: scene.timesteps,
            views: scene.views,
            height: scene.size,
            width: scene.size,
            background: scene.background,
            seed: run.seed,
            ..Default::default()
        };
        let mut vq = raw.section("vq4d", vq_base)?;
        let mut star = raw.section(
            "star",
            StarConfig {
                seed: run.seed,
                ..Default::default()
            },
        )?;
        if let Some(s) = seed {
            vq.seed = s;
            star.seed = s;
        }
        let cfg = Self {
            run,
            scene,
            vq,
            train_vq: raw.section("train_vq", TrainConfig::default())?,
            star,
            container: raw.section("container", ContainerConfig::default())?,
            train_star: raw.section("train_star", default_star_training())?,
            sampling: raw.section("sampling", SamplingConfig::default())?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.vq.validate()?;
        self.train_vq.validate().map_err(|e| invalid!("train_vq: {e}"))?;
        self.star.validate()?;
        self.container.validate()?;
        self.train_star.validate().map_err(|e| invalid!("train_star: {e}"))?;
        self.sampling.validate()
    }

    /// The full configuration as config-file text.
    pub fn to_text(&self) -> String {
        let rename = |text: String, name: &str| text.replacen("[train]", &format!("[{name}]"), 1);
        [
            self.run.to_text(),
            self.scene.to_text(),
            self.vq.to_text(),
            rename(self.train_vq.to_text(), "train_vq"),
            self.star.to_text(),
            self.container.to_text(),
            rename(self.train_star.to_text(), "train_star"),
            self.sampling.to_text(),
        ]
        .join("\n")
    }
}

/// Renders `scene.objects` random objects from orbit cameras.
pub fn synth_samples(scene: &SceneConfig, seed: u64) -> Result<Vec<Sample>> {
    scene.validate()?;
    let cams = make_orbit_cameras(
        scene.views,
        scene.radius,
        scene.elevation,
        [0.0; 3],
        scene.fov_y,
        (scene.size, scene.size),
    )?;
    let params = SceneParams {
        min_primitives: scene.min_primitives,
        max_primitives: scene.max_primitives,
        max_step: scene.max_step,
        background: scene.background,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<(_, String)> = (0..scene.objects)
        .map(|_| random_scene(&mut rng, scene.timesteps, &params))
        .collect();
    specs
        .into_iter()
        .map(|(spec, caption)| {
            let (matrix, flow) = render_scene(&spec, &cams, scene.timesteps)?;
            Ok(Sample { matrix, flow, caption })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthReport {
    pub objects: Vec<PathBuf>,
    pub captions: Vec<String>,
    pub scene: SceneConfig,
}

impl std::fmt::Display for SynthReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = &self.scene;
        writeln!(
            f,
            "{} objects, T={} V={} {}x{}",
            self.objects.len(),
            s.timesteps,
            s.views,
            s.size,
            s.size
        )?;
        for (p, c) in self.objects.iter().zip(&self.captions) {
            writeln!(f, "{}\t{c}", p.display())?;
        }
        Ok(())
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthReport> {
    let samples = synth_samples(&cfg.scene, cfg.run.seed).stage("synth")?;
    let objects = save_collection(out, &samples).stage("write-dataset")?;
    Ok(SynthReport {
        objects,
        captions: samples.into_iter().map(|s| s.caption).collect(),
        scene: cfg.scene.clone(),
    })
}

/// Field-level check of every sample against the VQ-VAE geometry.
pub fn check_dataset(vq: &VqConfig, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let m = &s.matrix;
        for (field, expected, found) in [
            ("timesteps", vq.timesteps, m.timesteps),
            ("views", vq.views, m.views()),
            ("height", vq.height, m.height),
            ("width", vq.width, m.width),
        ] {
            if expected != found {
                return Err(Error::ConfigMismatch {
                    field: format!("vq4d.{field}"),
                    expected: expected.to_string(),
                    found: format!("{found} in the dataset"),
                });
            }
        }
    }
    Ok(())
}

fn load_samples(data: &Path) -> Result<Vec<Sample>> {
    list_collection(data)?.iter().map(|d| load_dataset(d)).collect()
}

fn checkpoint_of_kind(path: &Path, kind: &str) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != kind {
        return Err(invalid!("{} holds a `{}` checkpoint, expected `{kind}`", path.display(), ck.kind));
    }
    Ok(ck)
}

/// Loads a trained VQ-VAE checkpoint.
pub fn load_vq(path: &Path) -> Result<Vq4dModel> {
    let ck = checkpoint_of_kind(path, "vq4d")?;
    let mut m = Vq4dModel::new(&VqConfig::from_text(&ck.config)?)?;
    ck.restore_into(&mut m.store)?;
    Ok(m)
}

/// Loads a trained decoder checkpoint.
pub fn load_star(path: &Path) -> Result<StarModel> {
    let ck = checkpoint_of_kind(path, "star")?;
    let mut m = StarModel::from_config_text(&ck.config)?;
    ck.restore_into(&mut m.store)?;
    Ok(m)
}

/// Loss log written next to a checkpoint.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("tsv")
}

fn open_log(path: &Path, append: bool, header: &str) -> Result<BufWriter<File>> {
    let exists = append && path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    if !exists {
        writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

fn batch_of<T>(items: &[T], step: u64, batch: usize) -> Vec<&T> {
    (0..batch).map(|j| &items[(step as usize * batch + j) % items.len()]).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub start_step: u64,
    pub end_step: u64,
    /// Total loss of the first and last step run here; `NaN` when no step ran.
    pub first_loss: f64,
    pub last_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl std::fmt::Display for TrainReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "steps {}..{}  loss {:.4} -> {:.4}\ncheckpoint {}\nlog {}",
            self.start_step,
            self.end_step,
            self.first_loss,
            self.last_loss,
            self.checkpoint.display(),
            self.log.display()
        )
    }
}

/// Trains the VQ-VAE on a dataset, optionally resuming from a checkpoint with optimizer state.
///
/// Writes the checkpoint to `out` and appends one TSV row per step to [`log_path`]`(out)`.
/// Progress lines go to `progress` every `train_vq.log_every` steps.
pub fn cmd_train_vqvae(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    progress: &mut dyn Write,
) -> Result<TrainReport> {
    let samples = load_samples(data).stage("load-dataset")?;
    check_dataset(&cfg.vq, &samples).stage("load-dataset")?;
    let mut tr = match resume {
        Some(p) => {
            let ck = checkpoint_of_kind(p, "vq4d").stage("resume")?;
            VqConfig::from_text(&ck.config).and_then(|c| c.check_matches(&cfg.vq)).stage("resume")?;
            let mut model = Vq4dModel::new(&cfg.vq).stage("model")?;
            ck.restore_into(&mut model.store).stage("resume")?;
            let opt = ck
                .restore_optim(&model.store)
                .ok_or_else(|| invalid!("{} has no optimizer state", p.display()))
                .stage("resume")?;
            Vq4dTrainer::resume(model, cfg.train_vq.clone(), opt, ck.step).stage("resume")?
        }
        None => Vq4dTrainer::new(Vq4dModel::new(&cfg.vq).stage("model")?, cfg.train_vq.clone()).stage("model")?,
    };
    let log = log_path(out);
    let mut w = open_log(
        &log,
        resume.is_some(),
        "step\tlr\ttotal\trecon\tflow\tcommit\tadversarial\tpsnr\tcodebook_used\treset_entries",
    )
    .stage("log")?;
    let start = tr.step;
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    while tr.step < cfg.train_vq.steps {
        let s = tr.step(&batch_of(&samples, tr.step, cfg.train_vq.batch)).stage("train")?;
        if first.is_nan() {
            first = s.total;
        }
        last = s.total;
        writeln!(
            w,
            "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}\t{}\t{}",
            s.step,
            s.lr,
            s.total,
            s.recon,
            s.flow,
            s.commit,
            s.adversarial,
            s.psnr(),
            tr.codebook_usage(),
            s.reset_entries
        )
        .map_err(|e| Error::io(&log, e))
        .stage("log")?;
        if cfg.train_vq.log_every > 0 && s.step % cfg.train_vq.log_every == 0 {
            let _ = writeln!(progress, "vq step {} loss {:.4} psnr {:.2}", s.step, s.total, s.psnr());
        }
    }
    w.flush().map_err(|e| Error::io(&log, e)).stage("log")?;
    Checkpoint::from_store("vq4d", cfg.vq.to_text(), tr.step, &tr.model.store, Some(&tr.opt))
        .save(out)
        .stage("save")?;
    Ok(TrainReport {
        start_step: start,
        end_step: tr.step,
        first_loss: first,
        last_loss: last,
        checkpoint: out.to_path_buf(),
        log,
    })
}

/// Decoder training examples for a dataset under a frozen VQ-VAE.
pub fn star_examples(vq: &Vq4dModel, star: &StarConfig, samples: &[Sample]) -> Result<Vec<StarExample>> {
    check_dataset(vq.config(), samples)?;
    let dims = StarDims::from_vq(vq.config());
    samples
        .iter()
        .map(|s| StarExample::new(vq, &dims, star.text_buckets, s))
        .collect()
}

/// Trains the decoder on a dataset tokenized once by the frozen VQ-VAE at `vq_path`.
///
/// The log holds the total and the `T` per-group CE terms of every step.
pub fn cmd_train_star(
    cfg: &RunConfig,
    data: &Path,
    vq_path: &Path,
    out: &Path,
    resume: Option<&Path>,
    progress: &mut dyn Write,
) -> Result<TrainReport> {
    let vq = load_vq(vq_path).stage("load-vq")?;
    let samples = load_samples(data).stage("load-dataset")?;
    let examples = star_examples(&vq, &cfg.star, &samples).stage("tokenize")?;
    let dims = StarDims::from_vq(vq.config());
    let mut tr = match resume {
        Some(p) => {
            let ck = checkpoint_of_kind(p, "star").stage("resume")?;
            StarConfig::from_text(&ck.config)
                .and_then(|c| c.check_matches(&cfg.star))
                .and_then(|_| ContainerConfig::from_text(&ck.config)?.check_matches(&cfg.container))
                .and_then(|_| StarDims::from_text(&ck.config)?.check_matches(&dims))
                .stage("resume")?;
            let mut model = StarModel::new(&cfg.star, &cfg.container, &dims).stage("model")?;
            ck.restore_into(&mut model.store).stage("resume")?;
            let opt = ck
                .restore_optim(&model.store)
                .ok_or_else(|| invalid!("{} has no optimizer state", p.display()))
                .stage("resume")?;
            StarTrainer::resume(model, cfg.train_star.clone(), opt, ck.step).stage("resume")?
        }
        None => StarTrainer::new(
            StarModel::new(&cfg.star, &cfg.container, &dims).stage("model")?,
            cfg.train_star.clone(),
        )
        .stage("model")?,
    };
    let log = log_path(out);
    let groups: Vec<String> = (0..dims.timesteps).map(|t| format!("ce_group{t}")).collect();
    let header = format!("step\tlr\ttotal\tgrad_norm\t{}", groups.join("\t"));
    let mut w = open_log(&log, resume.is_some(), &header).stage("log")?;
    let start = tr.step;
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    while tr.step < cfg.train_star.steps {
        let s = tr.step(&batch_of(&examples, tr.step, cfg.train_star.batch)).stage("train")?;
        if first.is_nan() {
            first = s.total;
        }
        last = s.total;
        let per: Vec<String> = s.per_group.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{}\t{:e}\t{:.6}\t{:.6}\t{}", s.step, s.lr, s.total, s.grad_norm, per.join("\t"))
            .map_err(|e| Error::io(&log, e))
            .stage("log")?;
        if cfg.train_star.log_every > 0 && s.step % cfg.train_star.log_every == 0 {
            let _ = writeln!(progress, "star step {} ce {:.4}", s.step, s.total);
        }
    }
    w.flush().map_err(|e| Error::io(&log, e)).stage("log")?;
    Checkpoint::from_store("star", tr.model.config_text(), tr.step, &tr.model.store, Some(&tr.opt))
        .save(out)
        .stage("save")?;
    Ok(TrainReport {
        start_step: start,
        end_step: tr.step,
        first_loss: first,
        last_loss: last,
        checkpoint: out.to_path_buf(),
        log,
    })
}

/// Writes one Gaussian per line: position, scale, rotation `(w, x, y, z)`, opacity, color.
pub fn gaussian_dump(gs: &DynamicGaussians, t: usize) -> String {
    let mut s = String::from("# x y z sx sy sz qw qx qy qz opacity r g b\n");
    for g in &gs.frames[t].gaussians {
        let row: Vec<String> = g.to_params().iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}

/// Decodes `tokens`, renders them from `cameras` and writes the token file, the `T·V`
/// frames (with a manifest) and one Gaussian dump per timestep into `dir`.
pub fn export_tokens(vq: &Vq4dModel, tokens: &TokenGrid, cameras: &[CameraPose], caption: &str, dir: &Path) -> Result<()> {
    let gs = vq.decode(tokens).stage("decode")?;
    let m = vq.render(&gs, cameras).stage("render")?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).stage("export")?;
    tokens.save(&dir.join(TOKENS_FILE)).stage("export")?;
    save_frames(&m, caption, dir).stage("export")?;
    for t in 0..gs.timesteps() {
        let p = dir.join(format!("gaussians_t{t}.txt"));
        fs::write(&p, gaussian_dump(&gs, t)).map_err(|e| Error::io(&p, e)).stage("export")?;
    }
    Ok(())
}

/// Decoder inputs for one conditioning object: prompt words, view-0 video tokens and camera rays.
pub fn condition_inputs(
    vq: &Vq4dModel,
    star: &StarModel,
    frames_dir: &Path,
    prompt: Option<&str>,
) -> Result<(StarExample, Vec<CameraPose>, String)> {
    let (m, caption) = load_frames(frames_dir)?;
    vq.check_matrix(&m)?;
    let dims = star.dims();
    let frames: Vec<f64> = (0..m.timesteps).flat_map(|t| m.frame(t, 0).to_vec()).collect();
    let text = prompt.unwrap_or(&caption).to_string();
    let ex = StarExample {
        words: hash_words(&text, star.net.cfg.text_buckets),
        video: video_tokens(vq, &frames, m.timesteps, m.height, m.width)?,
        rays: camera_rays(&m.cameras, dims.latent_h, dims.latent_w)?,
        tokens: Vec::new(),
    };
    Ok((ex, m.cameras, text))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateReport {
    pub objects: Vec<PathBuf>,
}

impl std::fmt::Display for GenerateReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.objects {
            writeln!(f, "{}", p.display())?;
        }
        Ok(())
    }
}

fn check_pair(vq: &Vq4dModel, star: &StarModel) -> Result<()> {
    StarDims::from_vq(vq.config()).check_matches(star.dims())
}

/// Generates one object per conditioning object in `video` (an object directory or a
/// collection). The prompt defaults to each object's caption. Object `i` is sampled
/// with seed `run.seed + i`; a collection produces a collection under `out`.
pub fn cmd_generate(
    cfg: &RunConfig,
    star_path: &Path,
    vq_path: &Path,
    video: &Path,
    prompt: Option<&str>,
    out: &Path,
) -> Result<GenerateReport> {
    let vq = load_vq(vq_path).stage("load-vq")?;
    let star = load_star(star_path).stage("load-star")?;
    check_pair(&vq, &star).stage("load-star")?;
    let inputs = list_collection(video).stage("load-video")?;
    let single = inputs.len() == 1 && inputs[0] == video;
    let mut objects = Vec::new();
    for (i, dir) in inputs.iter().enumerate() {
        let (ex, cameras, caption) = condition_inputs(&vq, &star, dir, prompt).stage("load-video")?;
        let gen: Generation = star
            .generate(&ex.words, &ex.video, &ex.rays, &cfg.sampling, cfg.run.seed.wrapping_add(i as u64))
            .stage("generate")?;
        let dest = if single { out.to_path_buf() } else { out.join(object_name(i)) };
        export_tokens(&vq, &gen.tokens, &cameras, &caption, &dest)?;
        objects.push(dest);
    }
    if !single {
        let names: Vec<String> = (0..inputs.len()).map(object_name).collect();
        write_index(out, &names).stage("export")?;
    }
    Ok(GenerateReport { objects })
}

/// Decode-only path: renders a saved token file with the cameras and caption of `cameras_dir`.
pub fn cmd_decode(vq_path: &Path, tokens: &Path, cameras_dir: &Path, out: &Path) -> Result<GenerateReport> {
    let vq = load_vq(vq_path).stage("load-vq")?;
    let grid = TokenGrid::load(tokens).stage("load-tokens")?;
    let (m, caption) = load_frames(cameras_dir).stage("load-cameras")?;
    export_tokens(&vq, &grid, &m.cameras, &caption, out)?;
    Ok(GenerateReport {
        objects: vec![out.to_path_buf()],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub object: String,
    pub metrics: ObjectMetrics,
}

/// Per-object image metrics and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean: ObjectMetrics,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&ObjectMetrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        let mean = ObjectMetrics {
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            temporal_consistency: mean(|m| m.temporal_consistency),
        };
        Self { rows, mean }
    }

    /// Tab-separated table with a final `mean` row.
    pub fn to_table(&self) -> String {
        let mut s = String::from("object\tpsnr\tssim\ttemporal_consistency\n");
        for r in self.rows.iter().map(|r| (&r.object, &r.metrics)).chain([(&"mean".to_string(), &self.mean)]) {
            let _ = writeln!(s, "{}\t{:.4}\t{:.6}\t{:.6}", r.0, r.1.psnr, r.1.ssim, r.1.temporal_consistency);
        }
        s
    }
}

/// Scores generated objects against the truth dataset, pairing objects by index.
/// Temporal consistency warps the generated frames with the ground-truth flow.
pub fn cmd_eval(generated: &Path, truth: &Path) -> Result<EvalReport> {
    let gen_dirs = list_collection(generated).stage("load-generated")?;
    let truth_dirs = list_collection(truth).stage("load-truth")?;
    if gen_dirs.len() != truth_dirs.len() {
        return Err(invalid!("{} generated objects but {} in the truth dataset", gen_dirs.len(), truth_dirs.len()))
            .stage("eval");
    }
    let rows = Execution::default().map(gen_dirs.len(), |i| -> Result<EvalRow> {
        let (pred, _) = load_frames(&gen_dirs[i]).stage("load-generated")?;
        let t = load_dataset(&truth_dirs[i]).stage("load-truth")?;
        let metrics = evaluate(&pred, &t.matrix, &t.flow).stage("eval")?;
        let object = truth_dirs[i]
            .file_name()
            .map_or_else(|| truth_dirs[i].display().to_string(), |n| n.to_string_lossy().into_owned());
        Ok(EvalRow { object, metrics })
    });
    Ok(EvalReport::from_rows(rows.into_iter().collect::<Result<_>>()?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRow {
    /// Pool index, which is also the token's position in the group sequence.
    pub index: usize,
    pub token: u32,
    pub group: usize,
    pub view: usize,
    pub position: usize,
    pub rho: f64,
    pub varpi: f64,
    pub cluster: usize,
    pub center: bool,
}

/// Container clustering statistics over all groups of one object.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterReport {
    pub rows: Vec<ClusterRow>,
    /// `(center pool index, members)` per cluster, by center rank.
    pub histogram: Vec<(usize, usize)>,
}

impl ClusterReport {
    /// Tab-separated token table followed by a `# histogram` table.
    pub fn to_table(&self) -> String {
        let mut s = String::from("index\ttoken\tgroup\tview\tposition\trho\tvarpi\trho_varpi\tcluster\tcenter\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}\t{:.6e}\t{}\t{}",
                r.index,
                r.token,
                r.group,
                r.view,
                r.position,
                r.rho,
                r.varpi,
                r.rho * r.varpi,
                r.cluster,
                u8::from(r.center)
            );
        }
        s.push_str("# histogram\ncluster\tcenter_index\tsize\n");
        for (c, (center, n)) in self.histogram.iter().enumerate() {
            let _ = writeln!(s, "{c}\t{center}\t{n}");
        }
        s
    }
}

/// Clusters the teacher-forced pool of one dataset object (the first object of a collection).
pub fn cmd_cluster_report(star_path: &Path, vq_path: &Path, sample: &Path) -> Result<ClusterReport> {
    let vq = load_vq(vq_path).stage("load-vq")?;
    let star = load_star(star_path).stage("load-star")?;
    check_pair(&vq, &star).stage("load-star")?;
    let dir = list_collection(sample).stage("load-dataset")?.remove(0);
    let s = load_dataset(&dir).stage("load-dataset")?;
    let ex = star_examples(&vq, &star.net.cfg, std::slice::from_ref(&s))
        .stage("tokenize")?
        .remove(0);
    let (c, tags) = star.container_report(&ex).stage("cluster")?;
    let hist = c.histogram();
    let rows = tags
        .iter()
        .enumerate()
        .map(|(i, tag)| ClusterRow {
            index: i,
            token: ex.tokens[i],
            group: tag.group,
            view: tag.view,
            position: tag.position,
            rho: c.rho[i],
            varpi: c.varpi[i],
            cluster: c.assignment[i],
            center: c.centers.contains(&i),
        })
        .collect();
    Ok(ClusterReport {
        rows,
        histogram: c.centers.iter().copied().zip(hist).collect(),
    })
}

#[cfg(test)]
mod tests;
