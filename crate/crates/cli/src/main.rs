use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pulmovessel::config::PipelineConfig;
use pulmovessel::metrics::{jaccard, load_points_csv, roc_az, sens_spec, EvalReport};
use pulmovessel::phantom::{add_gaussian_noise, noise_label, rasterize_tubes, torso_phantom, NoiseSpec, PhantomSpec};
use pulmovessel::pipeline::{self, artifacts, RunOptions, StageError, Workspace};
use pulmovessel::volume::{load_metaimage, save_metaimage, Mask, VoxelIndex};
use thiserror::Error;

/// Exit code for configuration and usage problems.
const EXIT_CONFIG: u8 = 2;
/// Exit code for phantom and evaluate failures.
const EXIT_OTHER: u8 = 1;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(pulmovessel::Error),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("{0}")]
    Other(#[from] pulmovessel::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Stage(e) => e.stage.exit_code() as u8,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

#[derive(Parser)]
#[command(name = "pulmovessel", version, about = "Pulmonary vessel segmentation pipeline")]
struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage and write all artifacts.
    Pipeline(StageArgs),
    /// Airway region growing and trachea/bronchus labeling.
    Airway(StageArgs),
    /// Left/right lung segmentation (needs airway.mhd).
    Lungs(StageArgs),
    /// Multi-scale medialness filter (needs lungs.mhd, airway.mhd).
    Vesselness(StageArgs),
    /// Centerline extraction and reconnection (needs medialness.mhd, lungs.mhd, airway.mhd).
    Centerline(StageArgs),
    /// Radius estimation and vessel painting (needs centerline.json, lungs.mhd).
    Segment(StageArgs),
    /// Distance-metric report (needs centerline.json).
    Tortuosity {
        #[arg(long, value_name = "DIR")]
        output: PathBuf,
    },
    /// Write a synthetic phantom, optionally with a noise sweep.
    Phantom(PhantomArgs),
    /// Compare a prediction against a truth mask and/or annotated points.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct StageArgs {
    /// CT volume (.mhd).
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    output: PathBuf,
    /// Airway seed voxel, overriding trachea detection.
    #[arg(long, value_name = "I,J,K", value_parser = parse_voxel)]
    seed: Option<VoxelIndex>,
    /// Heart center voxel, overriding heart detection.
    #[arg(long, value_name = "I,J,K", value_parser = parse_voxel)]
    heart_seed: Option<VoxelIndex>,
    /// Swap the left/right bronchus assignment.
    #[arg(long)]
    flip_lr: bool,
}

impl StageArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            airway_seed: self.seed,
            heart_seed: self.heart_seed,
            flip_lr: self.flip_lr,
        }
    }
}

#[derive(Args)]
struct PhantomArgs {
    /// Tube phantom spec (JSON); the bundled branching tree when omitted.
    #[arg(long, value_name = "PATH", conflicts_with = "torso")]
    spec: Option<PathBuf>,
    /// Write the chest phantom with lungs, airway and heart instead.
    #[arg(long)]
    torso: bool,
    #[arg(long, value_name = "DIR")]
    output: PathBuf,
    /// Noise std (HU) of the written volume.
    #[arg(long, value_name = "STD", default_value_t = 0.0)]
    noise: f64,
    /// Noise std list (HU); runs the vessel pipeline per level.
    #[arg(long, value_name = "STD,...", value_delimiter = ',', conflicts_with = "torso")]
    sweep: Vec<f64>,
    /// Centerline root of the sweep runs; the first control point by default.
    #[arg(long, value_name = "I,J,K", value_parser = parse_voxel)]
    root: Option<VoxelIndex>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted mask (.mhd); nonzero voxels are vessel.
    #[arg(long, value_name = "PATH")]
    prediction: Option<PathBuf>,
    /// Ground-truth mask (.mhd); nonzero voxels are vessel.
    #[arg(long, value_name = "PATH")]
    truth: Option<PathBuf>,
    /// Annotated points CSV with columns x,y,z,label.
    #[arg(long, value_name = "PATH")]
    points: Option<PathBuf>,
    /// Score volume for the ROC analysis at the annotated points.
    #[arg(long, value_name = "PATH")]
    scores: Option<PathBuf>,
    /// Directory for eval_report.json and eval_report.txt.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

fn parse_voxel(s: &str) -> Result<VoxelIndex, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected I,J,K, got {s:?}"));
    }
    let mut c = [0usize; 3];
    for (a, p) in parts.iter().enumerate() {
        c[a] = p.parse().map_err(|_| format!("bad voxel coordinate {p:?}"))?;
    }
    Ok(VoxelIndex::new(c[0], c[1], c[2]))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(CliError::Config)?,
        None => PipelineConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(pulmovessel::Error::Config(format!("expected KEY=VALUE, got {kv:?}"))))?;
        cfg.set(k.trim(), v.trim()).map_err(CliError::Config)?;
    }
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn workspace(dir: &Path, cfg: &PipelineConfig) -> Result<Workspace, CliError> {
    let ws = Workspace::new(dir).map_err(|e| StageError {
        stage: pipeline::Stage::Input,
        source: e,
    })?;
    cfg.save(ws.path(artifacts::RUN_CONFIG)).map_err(|e| StageError {
        stage: pipeline::Stage::Input,
        source: e,
    })?;
    Ok(ws)
}

fn load_mask(path: &Path) -> pulmovessel::Result<Mask> {
    Ok(load_metaimage(path)?.into_scalar().map(|v| v != 0.0))
}

fn cmd_phantom(args: &PhantomArgs, cfg: &PipelineConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&args.output).map_err(|e| pulmovessel::Error::io(&args.output, e))?;
    let out = |name: &str| args.output.join(name);
    let noise = (args.noise > 0.0).then_some(NoiseSpec {
        std: args.noise,
        seed: cfg.noise_seed,
    });
    if args.torso {
        let t = torso_phantom(noise)?;
        save_metaimage(&t.volume, out("phantom.mhd"))?;
        t.vessels
            .to_labels(pulmovessel::volume::labels::VESSEL)
            .save(out("truth.mhd"))?;
        t.lungs.save(out("lungs_truth.mhd"))?;
        println!(
            "heart center {:?}, trachea top {:?}",
            t.heart.as_array(),
            t.trachea_top.as_array()
        );
        return Ok(());
    }
    let spec = match &args.spec {
        Some(p) => PhantomSpec::load(p)?,
        None => PhantomSpec::branching_tree(),
    };
    let phantom = rasterize_tubes(&spec)?;
    let vol = match noise {
        Some(n) => add_gaussian_noise(&phantom.volume, n)?,
        None => phantom.volume.clone(),
    };
    save_metaimage(&vol, out("phantom.mhd"))?;
    phantom.truth.save(out("truth.mhd"))?;
    if args.sweep.is_empty() {
        return Ok(());
    }
    let root = match args.root {
        Some(r) => r,
        None => {
            let p = spec.tubes[0].points[0];
            VoxelIndex::new(p[0].round() as usize, p[1].round() as usize, p[2].round() as usize)
        }
    };
    let truth = phantom.mask();
    let mut csv = String::from("noise_std_hu,jaccard\n");
    for &std in &args.sweep {
        let noisy = add_gaussian_noise(
            &phantom.volume,
            NoiseSpec {
                std,
                seed: cfg.noise_seed,
            },
        )?;
        let label = noise_label(std);
        save_metaimage(&noisy, out(&format!("{label}.mhd")))?;
        let run = pipeline::run_phantom(&noisy, root, cfg)?;
        run.segmentation.vessels.save(out(&format!("{label}_vessels.mhd")))?;
        let j = jaccard(&run.vessels, &truth)?;
        println!("noise std {std} HU: jaccard {j:.4}");
        csv.push_str(&format!("{std},{j:.6}\n"));
    }
    let path = out("jaccard_vs_noise.csv");
    std::fs::write(&path, csv).map_err(|e| pulmovessel::Error::io(&path, e))?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let mut report = EvalReport::default();
    let prediction = args.prediction.as_deref().map(load_mask).transpose()?;
    if let Some(t) = &args.truth {
        let truth = load_mask(t)?;
        let p = prediction
            .as_ref()
            .ok_or_else(|| CliError::Config(pulmovessel::Error::Config("--truth requires --prediction".into())))?;
        report.jaccard = Some(jaccard(p, &truth)?);
    }
    if let Some(pts) = &args.points {
        let reference = match (&prediction, &args.scores) {
            (Some(p), _) => *p.grid(),
            (None, Some(s)) => *load_metaimage(s)?.grid(),
            (None, None) => {
                return Err(CliError::Config(pulmovessel::Error::Config(
                    "--points requires --prediction or --scores".into(),
                )))
            }
        };
        let points = load_points_csv(pts, reference.dims)?;
        let labels: Vec<bool> = points.iter().map(|p| p.vessel).collect();
        if let Some(p) = &prediction {
            let pred: Vec<bool> = points.iter().map(|q| p.get(q.voxel)).collect();
            let (sens, spec) = sens_spec(&pred, &labels)?;
            report.sensitivity = sens;
            report.specificity = spec;
        }
        if let Some(s) = &args.scores {
            let scores = load_metaimage(s)?.into_scalar();
            scores.same_dims(&Mask::filled(reference, false))?;
            let values: Vec<f64> = points.iter().map(|q| scores.get(q.voxel) as f64).collect();
            report.az = Some(roc_az(&values, &labels)?.az);
        }
    }
    print!("{report}");
    if let Some(dir) = &args.output {
        std::fs::create_dir_all(dir).map_err(|e| pulmovessel::Error::io(dir, e))?;
        let json = dir.join("eval_report.json");
        std::fs::write(&json, report.to_json()?).map_err(|e| pulmovessel::Error::io(&json, e))?;
        let txt = dir.join("eval_report.txt");
        std::fs::write(&txt, report.to_string()).map_err(|e| pulmovessel::Error::io(&txt, e))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(pulmovessel::Error::Config(format!("thread pool: {e}"))))?;
    }
    match &cli.command {
        Command::Pipeline(a) => {
            let ws = workspace(&a.output, &cfg)?;
            let out = pipeline::run_pipeline(&a.input, &ws, &cfg, &a.options())?;
            if let Some(s) = &out.dm.overall {
                println!("branches {}, DM mean {:.4} (std {:.4})", s.branches, s.mean, s.std);
            }
        }
        Command::Airway(a) => pipeline::run_airway(&a.input, &workspace(&a.output, &cfg)?, &cfg, &a.options())?,
        Command::Lungs(a) => pipeline::run_lungs(&a.input, &workspace(&a.output, &cfg)?, &cfg)?,
        Command::Vesselness(a) => pipeline::run_vesselness(&a.input, &workspace(&a.output, &cfg)?, &cfg)?,
        Command::Centerline(a) => pipeline::run_centerline(&a.input, &workspace(&a.output, &cfg)?, &cfg, &a.options())?,
        Command::Segment(a) => pipeline::run_segment(&a.input, &workspace(&a.output, &cfg)?, &cfg)?,
        Command::Tortuosity { output } => {
            let report = pipeline::run_tortuosity(&workspace(output, &cfg)?, &cfg)?;
            if let Some(s) = &report.overall {
                println!("branches {}, DM mean {:.4} (std {:.4})", s.branches, s.mean, s.std);
            }
        }
        Command::Phantom(a) => cmd_phantom(a, &cfg)?,
        Command::Evaluate(a) => cmd_evaluate(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
