use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apl_core::config::ExperimentConfig;
use apl_core::error::{AplError, Result};
use apl_core::experiment::{run_experiment, sweep, train_and_save, Lab, SweepParam, CHECKPOINT_FILE};
use apl_core::geom::ViewGrid;
use apl_core::parallel;
use apl_core::ppo::CurvePoint;
use apl_core::scene::render;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "apl", version, about = "Active multi-object pose estimation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an agent and write agent.ckpt and curve.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate one policy: a baseline name, `learned`, `learned-lowest-score`,
    /// or a checkpoint path.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: String,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the experiment over values of alpha or T.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Train if needed, then evaluate every policy listed in the config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Render one view of one scene and dump depth (PGM) plus mask summary (JSON).
    RenderDebug {
        #[arg(long)]
        scene_seed: u64,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn load(config: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config).map_err(|e| match e {
        AplError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => AplError::MissingArtifact(config.to_path_buf()),
        other => other,
    })?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Ok(cfg)
}

fn reporter(quiet: bool) -> impl FnMut(&CurvePoint) {
    move |p: &CurvePoint| {
        if !quiet {
            eprintln!(
                "step {:>8}  return {:>9.4}  e_add {:>6.2} mm  detection {:.3}  distance {:>7.1} mm",
                p.step, p.mean_return, p.mean_e_add, p.detection_rate, p.distance
            );
        }
    }
}

fn looks_like_path(policy: &str) -> bool {
    policy.contains('/') || policy.contains('\\') || policy.ends_with(".ckpt") || Path::new(policy).is_file()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out, quiet } => {
            let mut cfg = load(&config, out)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let dir = cfg.output_dir.clone();
            let mut lab = Lab::new(cfg)?;
            let mut report = reporter(quiet);
            let t = train_and_save(&mut lab, &dir, &mut report)?;
            println!("{}", t.checkpoint.display());
            println!("{}", t.curve.display());
        }
        Command::Eval {
            config,
            policy,
            episodes,
            seed,
            out,
        } => {
            let mut cfg = load(&config, out)?;
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            if looks_like_path(&policy) {
                cfg.eval.checkpoint = Some(PathBuf::from(&policy));
                cfg.eval.policies = vec!["learned".into()];
            } else {
                if policy.starts_with("learned") && cfg.eval.checkpoint.is_none() {
                    cfg.eval.checkpoint = Some(cfg.output_dir.join(CHECKPOINT_FILE));
                }
                cfg.eval.policies = vec![policy];
            }
            cfg.validate()?;
            let o = run_experiment(cfg, |_| {})?;
            println!("{}", o.metrics.display());
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
            quiet,
        } => {
            let cfg = load(&config, out)?;
            let mut report = reporter(quiet);
            let p = sweep(cfg, param, &values, |v, point| {
                if !quiet {
                    eprint!("{}={v}  ", param.name());
                }
                report(point)
            })?;
            println!("{}", p.display());
        }
        Command::Run { config, out, quiet } => {
            let cfg = load(&config, out)?;
            let o = run_experiment(cfg, reporter(quiet))?;
            println!("{}", o.metrics.display());
        }
        Command::RenderDebug {
            scene_seed,
            view,
            config,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => load(p, None)?,
                None => ExperimentConfig::default(),
            };
            // Only the one scene is needed.
            cfg.scenes.eval_seeds = vec![scene_seed];
            cfg.scenes.train_seeds.retain(|&s| s != scene_seed);
            cfg.eval.policies.retain(|p| !p.starts_with("learned"));
            let grid: ViewGrid = cfg.grid.build()?;
            if view >= grid.len() {
                return Err(AplError::InvalidArgument(format!("view {view} is outside the {}-view grid", grid.len())));
            }
            let model = std::sync::Arc::new(apl_core::scene::make_model(
                cfg.scenes.model,
                cfg.scenes.model_points,
                cfg.scenes.model_seed,
            )?);
            let scene = apl_core::experiment::build_scene(model, scene_seed, cfg.scenes.instance_range())?;
            let r = render(&scene, &grid, view, &cfg.camera)?;
            let stem = format!("scene{scene_seed}-view{view}");
            r.write_debug(&out, &stem)?;
            println!("{}", out.join(format!("{stem}.pgm")).display());
            println!("{}", out.join(format!("{stem}.json")).display());
        }
    }
    Ok(())
}

fn exit_code(e: &AplError) -> u8 {
    match e {
        AplError::Config { .. } => 2,
        AplError::MissingArtifact(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    parallel::init_threads_from_env();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
