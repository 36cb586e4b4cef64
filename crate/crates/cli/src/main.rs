use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use star4d::pipeline::{self, RunConfig};
use star4d::Error;

#[derive(Parser)]
#[command(name = "star4d", version, about = "Grouped autoregressive 4D object generation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file with `[section]` blocks of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesis, model initialization and sampling; overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path: dataset root, checkpoint file, output directory or report file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth {
        /// Timesteps per object.
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        /// Image side in pixels; a multiple of 8.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        objects: Option<usize>,
    },
    /// Train the 4D VQ-VAE.
    TrainVqvae {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint, including optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the autoregressive decoder on a frozen VQ-VAE.
    TrainStar {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Generate objects from a prompt and a conditioning video, or decode a saved token file.
    Generate {
        #[arg(long)]
        vq: PathBuf,
        #[arg(long, required_unless_present = "tokens")]
        star: Option<PathBuf>,
        /// Object directory or collection supplying the video (view 0) and cameras.
        #[arg(long, required_unless_present = "tokens")]
        video: Option<PathBuf>,
        /// Text prompt; defaults to the caption of each conditioning object.
        #[arg(long)]
        prompt: Option<String>,
        /// Decode this token file instead of sampling. Cameras come from --video or the file's directory.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Score generated objects against a truth dataset.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Dump container clustering statistics for one dataset object.
    ClusterReport {
        #[arg(long)]
        star: PathBuf,
        #[arg(long)]
        vq: PathBuf,
        #[arg(long)]
        sample: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::TrainVqvae { .. } => "train-vqvae",
            Command::TrainStar { .. } => "train-star",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::ClusterReport { .. } => "cluster-report",
        }
    }

    /// Overrides implied by subcommand flags.
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{key}={v}"));
            }
        };
        match self {
            Command::Synth { t, views, size, objects } => {
                push("scene.timesteps", t.map(|v| v.to_string()));
                push("scene.views", views.map(|v| v.to_string()));
                push("scene.size", size.map(|v| v.to_string()));
                push("scene.objects", objects.map(|v| v.to_string()));
            }
            Command::TrainVqvae { steps, .. } => push("train_vq.steps", steps.map(|v| v.to_string())),
            Command::TrainStar { steps, .. } => push("train_star.steps", steps.map(|v| v.to_string())),
            Command::Generate { temperature, top_k, .. } => {
                push("sampling.temperature", temperature.map(|v| v.to_string()));
                push("sampling.top_k", top_k.map(|v| v.to_string()));
            }
            _ => {}
        }
        o
    }
}

fn write_report(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let c = &cli.common;
    let mut overrides = c.set.clone();
    overrides.extend(cli.command.overrides());
    let cfg = RunConfig::load(c.config.as_deref(), &overrides, c.seed).map_err(|e| Error::Stage {
        stage: "config",
        source: Box::new(e),
    })?;
    let out = || {
        c.out
            .clone()
            .ok_or_else(|| Error::InvalidArgument("--out is required".into()))
    };
    let mut progress = std::io::stderr();
    match &cli.command {
        Command::Synth { .. } => print!("{}", pipeline::cmd_synth(&cfg, &out()?)?),
        Command::TrainVqvae { data, resume, .. } => {
            print!("{}", pipeline::cmd_train_vqvae(&cfg, data, &out()?, resume.as_deref(), &mut progress)?)
        }
        Command::TrainStar { data, vq, resume, .. } => print!(
            "{}",
            pipeline::cmd_train_star(&cfg, data, vq, &out()?, resume.as_deref(), &mut progress)?
        ),
        Command::Generate {
            vq,
            star,
            video,
            prompt,
            tokens,
            ..
        } => {
            let report = match tokens {
                Some(t) => {
                    let cams = video
                        .clone()
                        .unwrap_or_else(|| t.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf));
                    pipeline::cmd_decode(vq, t, &cams, &out()?)?
                }
                None => {
                    let (star, video) = star.as_ref().zip(video.as_ref()).expect("enforced by clap");
                    pipeline::cmd_generate(&cfg, star, vq, video, prompt.as_deref(), &out()?)?
                }
            };
            print!("{report}");
        }
        Command::Eval { generated, truth } => {
            write_report(c.out.as_deref(), &pipeline::cmd_eval(generated, truth)?.to_table())?
        }
        Command::ClusterReport { star, vq, sample } => write_report(
            c.out.as_deref(),
            &pipeline::cmd_cluster_report(star, vq, sample)?.to_table(),
        )?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e}");
            ExitCode::FAILURE
        }
    }
}
