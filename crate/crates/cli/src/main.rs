use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avatar_core::eval::{evaluate, evaluate_ground_truth, render_avatar, EvalProtocol, Lighting};
use avatar_core::gradcheck::run_suite;
use avatar_core::image::{write_pfm, write_png};
use avatar_core::raster::RenderedImage;
use avatar_core::sh::EnvLightProbe;
use avatar_core::skinning::read_poses;
use avatar_core::synth::{generate_sequence, SceneDataset, SceneSpec};
use avatar_core::trainer::{load_avatar, Checkpoint, Stage, TrainConfig, Trainer, CHECKPOINT_FILE, CONFIG_FILE};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Animatable, relightable Gaussian avatars on synthetic scenes.
#[derive(Parser)]
#[command(name = "avatar", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    Synth {
        /// Scene spec (TOML); defaults to the standard scene.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a dataset, resuming from a checkpoint in --out if present.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training config (TOML); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
    },
    /// Render rgb, normal and albedo images of a trained avatar.
    Render(ViewArgs),
    /// Render a trained avatar under a different light probe.
    Relight {
        #[command(flatten)]
        view: ViewArgs,
        /// Light probe (PFM, 64×32 lat-long).
        #[arg(long)]
        probe: PathBuf,
    },
    /// Score a trained avatar, or the ground truth itself without --config.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// config.toml inside a training output directory.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable path.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random configurations per check.
        #[arg(long, default_value_t = 50)]
        configs: usize,
    },
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    data: PathBuf,
    /// config.toml inside a training output directory; the checkpoint is read next to it.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pose file; its last frame is rendered. Defaults to the dataset poses.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Camera index into the dataset cameras.
    #[arg(long, default_value_t = 0)]
    camera: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

enum Failure {
    Usage(String),
    Run(avatar_core::Error),
}

impl From<avatar_core::Error> for Failure {
    fn from(e: avatar_core::Error) -> Self {
        Failure::Run(e)
    }
}

fn require(path: &Path, what: &str) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_data(dir: &Path) -> Result<SceneDataset, Failure> {
    require(dir, "dataset directory")?;
    Ok(SceneDataset::import(dir)?)
}

fn run_dir(config: &Path) -> Result<PathBuf, Failure> {
    require(config, "config")?;
    let dir = config.parent().unwrap_or(Path::new(".")).to_path_buf();
    require(&dir.join(CHECKPOINT_FILE), "checkpoint")?;
    Ok(dir)
}

fn write_view(out: &Path, name: &str, r: &RenderedImage) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", out.display())))?;
    let rgb = r.color.select(0..3);
    write_pfm(&out.join(format!("{name}.pfm")), &rgb)?;
    write_png(&out.join(format!("{name}.png")), &rgb)?;
    Ok(())
}

fn render_views(v: &ViewArgs, probe: Option<&EnvLightProbe>) -> Result<(), Failure> {
    let data = load_data(&v.data)?;
    let dir = run_dir(&v.config)?;
    let avatar = load_avatar(&data, &dir)?;
    let poses = match &v.pose {
        Some(p) => {
            require(p, "pose file")?;
            read_poses(p)?
        }
        None => data.poses.clone(),
    };
    if poses.is_empty() {
        return Err(Failure::Usage("pose file has no frames".into()));
    }
    let cam = data
        .cameras
        .get(v.camera)
        .ok_or_else(|| Failure::Usage(format!("camera {} out of range (0..{})", v.camera, data.cameras.len())))?;
    let t = poses.len() - 1;
    match probe {
        Some(p) => {
            let r = render_avatar(&avatar, &poses, t, cam, Lighting::Probe(p), [1.0; 3])?;
            write_view(&v.out, "relit", &r)?;
            println!("relight.frame.{t:04} = {}", v.out.join("relit.pfm").display());
        }
        None => {
            let r = render_avatar(&avatar, &poses, t, cam, Lighting::Auto, [1.0; 3])?;
            write_view(&v.out, "rgb", &r)?;
            let normal = r.color.select(3..6);
            write_png(&v.out.join("normal.png"), &normal)?;
            write_pfm(&v.out.join("normal.pfm"), &normal)?;
            write_png(&v.out.join("alpha.png"), &r.alpha)?;
            let a = render_avatar(&avatar, &poses, t, cam, Lighting::Albedo, [1.0; 3])?;
            write_view(&v.out, "albedo", &a)?;
            println!("render.frame.{t:04} = {}", v.out.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut spec = match &config {
                Some(p) => {
                    require(p, "config")?;
                    SceneSpec::load(p)?
                }
                None => SceneSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate_sequence(&spec)?;
            data.export(&out)?;
            println!("synth.checksum.all = {}", data.checksum());
            println!("synth.images.all = {}", data.records.len());
        }
        Command::Train { data, out, config, seed, stage } => {
            let dataset = load_data(&data)?;
            let mut cfg = match &config {
                Some(p) => {
                    require(p, "config")?;
                    TrainConfig::load(p)?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ckpt = out.join(CHECKPOINT_FILE);
            let mut trainer = if ckpt.exists() {
                Trainer::resume(&dataset, cfg.clone(), Checkpoint::load(&ckpt, cfg.lr)?)?
            } else {
                Trainer::new(&dataset, cfg)?
            };
            let log = |r: &avatar_core::trainer::LossRecord| {
                if r.iteration % 100 == 0 {
                    println!("stage{}.loss.{:06} = {}", r.stage, r.iteration, r.total);
                }
            };
            if matches!(stage, StageArg::Two) && trainer.stage1_done == 0 {
                return Err(Failure::Usage(format!("stage 2 needs a stage-1 checkpoint in {}", out.display())));
            }
            if matches!(stage, StageArg::One | StageArg::All) {
                trainer.run_stage(&dataset, Stage::One, Some(&out), log)?;
            }
            if matches!(stage, StageArg::Two | StageArg::All) {
                trainer.run_stage(&dataset, Stage::Two, Some(&out), log)?;
            }
            if let Some(r) = trainer.curve.last() {
                println!("stage{}.loss.final = {}", r.stage, r.total);
            }
            println!("train.output.all = {}", out.join(CONFIG_FILE).display());
        }
        Command::Render(v) => render_views(&v, None)?,
        Command::Relight { view, probe } => {
            require(&probe, "probe")?;
            let p = EnvLightProbe::load(&probe)?;
            render_views(&view, Some(&p))?;
        }
        Command::Eval { data, config, out } => {
            let dataset = load_data(&data)?;
            let protocol = EvalProtocol::standard(&dataset);
            let report = match &config {
                Some(c) => evaluate(&load_avatar(&dataset, &run_dir(c)?)?, &dataset, &protocol)?,
                None => evaluate_ground_truth(&dataset, &protocol)?,
            };
            print!("{report}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))?;
                avatar_core::image::write_atomic(&dir.join("report.txt"), report.to_string().as_bytes())?;
            }
        }
        Command::Gradcheck { seed, configs } => {
            let mut worst: f64 = 0.0;
            run_suite(configs, seed, |r| {
                println!("gradcheck.max_rel_error.{} = {:e}", r.name, r.max_rel_error);
                worst = worst.max(r.max_rel_error);
            })?;
            if !(worst <= 1e-4) {
                return Err(Failure::Run(avatar_core::Error::invalid(format!("max relative error {worst:e} exceeds 1e-4"))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
