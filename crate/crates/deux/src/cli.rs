//! Command-line front end. Exit codes: 0 on success, 1 on usage errors,
//! 2 on data-format errors. Logging is controlled by the `DEUX_LOG`
//! environment variable (standard filter syntax, e.g. `DEUX_LOG=info`).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Once;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::completion::CompletorParams;
use crate::config::{ConfigError, RunConfig};
use crate::geometry::Intrinsics;
use crate::mapping::{integrate, OccupancyGrid};
use crate::pipeline::{
    build_test_set, collect_episode, evaluate_on_test_set, fit_samples_of, mix_seed,
    read_dataset, render_trajectory_plot, run_benchmark, train_scene_seeds, write_dataset,
    write_ppm, write_report, CollectOptions, EpisodeRecord, FrameRetention, PipelineError,
};
use crate::policies::{EpisodeBudget, PolicyKind, SeedModel};
use crate::world::{generate_scene, render, WorldError};

/// Exit code for command-line usage errors.
pub const EXIT_USAGE: i32 = 1;
/// Exit code for malformed input data.
pub const EXIT_DATA: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "deux",
    about = "Procedural voxel-world exploration and depth-completion benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArg {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Procedural world operations.
    World {
        #[command(subcommand)]
        command: WorldCommand,
    },
    /// Run a single exploration episode and save it as a dataset.
    Explore {
        #[command(flatten)]
        config: ConfigArg,
        /// Scene seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Policy: random, frontier, oracle, or deux.
        #[arg(long, default_value = "frontier")]
        policy: PolicyKind,
        /// Step budget override.
        #[arg(long)]
        steps: Option<usize>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Fitted completor parameters JSON (required for the deux policy).
        #[arg(long)]
        seed_model: Option<PathBuf>,
    },
    /// Collect training episodes over all training scenes of a master seed.
    Collect {
        #[command(flatten)]
        config: ConfigArg,
        /// Master seed selecting the training scene set.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "random")]
        policy: PolicyKind,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed_model: Option<PathBuf>,
    },
    /// Fit completor parameters on a collected dataset.
    Fit {
        #[command(flatten)]
        config: ConfigArg,
        /// Input dataset directory.
        data: PathBuf,
        /// Output parameters JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate fitted completor parameters on the held-out test set.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Fitted completor parameters JSON.
        #[arg(long)]
        seed_model: PathBuf,
        /// Master seed anchoring the test set.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional metrics JSON output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full multi-policy benchmark and write report.csv/report.json.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory override (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker thread count override; results are identical for any value.
        #[arg(long)]
        jobs: Option<usize>,
        /// External seed model JSON (otherwise fitted from random-policy data).
        #[arg(long)]
        seed_model: Option<PathBuf>,
    },
    /// Render a trajectory plot for an episode of a dataset.
    Plot {
        #[command(flatten)]
        config: ConfigArg,
        /// Input dataset directory.
        data: PathBuf,
        /// Episode index within the dataset.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        /// Output PPM path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum WorldCommand {
    /// Generate a scene, save it, and render a preview frame.
    Gen {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the scene file and preview image.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Format(_) => CliError::Data(e.to_string()),
            PipelineError::World(WorldError::Format(_)) => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match &e {
            ConfigError::Parse(_) => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match &e {
            WorldError::Format(_) => CliError::Data(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn init_logging() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        let env = env_logger::Env::new().filter("DEUX_LOG");
        let _ = env_logger::Builder::from_env(env).try_init();
    });
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig, CliError> {
    match &arg.config {
        Some(path) => Ok(RunConfig::load(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn load_seed_model(path: Option<&Path>, needed: bool) -> Result<Option<SeedModel>, CliError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let params: CompletorParams = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            params
                .validate()
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Ok(Some(SeedModel::Completor(params)))
        }
        None if needed => Err(CliError::Usage(
            "the deux policy requires --seed-model <params.json>".into(),
        )),
        None => Ok(None),
    }
}

fn collect_one(
    config: &RunConfig,
    scene_seed: u64,
    policy: PolicyKind,
    steps: Option<usize>,
    seed_model: Option<SeedModel>,
    episode_seed: u64,
) -> Result<EpisodeRecord, CliError> {
    let scene = generate_scene(scene_seed, &config.world)?;
    let budget = EpisodeBudget { max_steps: steps.unwrap_or(config.budget.max_steps) };
    let opts = CollectOptions {
        intrinsics: Intrinsics::default_square(config.frame_size),
        sparse_count: config.sparse_count,
        retention: FrameRetention::All,
    };
    Ok(collect_episode(&scene, policy, seed_model, &budget, episode_seed, &opts)?)
}

fn rebuild_grid(config: &RunConfig, episode: &EpisodeRecord) -> OccupancyGrid {
    let mut grid = OccupancyGrid::unknown(
        config.world.nx,
        config.world.ny,
        (0.0, 0.0),
        config.world.cell_size_m,
    );
    for frame in &episode.frames {
        integrate(
            &mut grid,
            &frame.pose,
            &frame.depth_gt,
            &episode.intrinsics,
            config.world.cell_size_m,
        );
    }
    grid
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::World { command: WorldCommand::Gen { config, seed, out } } => {
            let config = load_config(&config)?;
            let scene = generate_scene(seed, &config.world)?;
            std::fs::create_dir_all(&out)?;
            let scene_path = out.join(format!("scene_{seed}.bin"));
            scene.save(&scene_path)?;
            let k = Intrinsics::default_square(config.frame_size);
            let frame = render(&scene, &scene.camera_pose(&scene.spawn), &k, 0)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let preview_path = out.join(format!("preview_{seed}.ppm"));
            write_ppm(&preview_path, &frame.rgb)?;
            println!("scene: {}", scene_path.display());
            println!("preview: {}", preview_path.display());
        }
        Command::Explore { config, seed, policy, steps, out, seed_model } => {
            let config = load_config(&config)?;
            let model = load_seed_model(seed_model.as_deref(), policy == PolicyKind::Deux)?;
            let rec = collect_one(&config, seed, policy, steps, model, mix_seed(seed, 1))?;
            info!("episode finished with {} frames", rec.frames.len());
            write_dataset(std::slice::from_ref(&rec), &out, config.hash())?;
            let plot = render_trajectory_plot(&rec, &rec.final_grid, &out.join("trajectory.ppm"))?;
            println!("episode: {} frames", rec.frames.len());
            println!("dataset: {}", out.display());
            println!("trajectory: {}", plot.display());
        }
        Command::Collect { config, seed, policy, steps, out, seed_model } => {
            let config = load_config(&config)?;
            let model = load_seed_model(seed_model.as_deref(), policy == PolicyKind::Deux)?;
            let mut records = Vec::new();
            for (i, scene_seed) in
                train_scene_seeds(seed, config.train_scenes).into_iter().enumerate()
            {
                info!("collecting scene {i} (seed {scene_seed})");
                records.push(collect_one(
                    &config,
                    scene_seed,
                    policy,
                    steps,
                    model.clone(),
                    mix_seed(seed, i as u64),
                )?);
            }
            write_dataset(&records, &out, config.hash())?;
            println!(
                "collected {} episodes ({} frames) into {}",
                records.len(),
                records.iter().map(|r| r.frames.len()).sum::<usize>(),
                out.display()
            );
        }
        Command::Fit { config, data, out } => {
            let config = load_config(&config)?;
            let (_, records) = read_dataset(&data)?;
            let samples = fit_samples_of(&records, config.fit_samples_max);
            if samples.is_empty() {
                return Err(CliError::Usage(
                    "dataset contains no consecutive frame triplets to fit on".into(),
                ));
            }
            info!("fitting on {} samples", samples.len());
            let mut init = config.completor_init.clone();
            init.weights = config.weights;
            let fitted = crate::completion::fit_completor(&samples, &init)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            std::fs::write(&out, serde_json::to_string_pretty(&fitted).unwrap())?;
            println!("fitted parameters: {}", out.display());
        }
        Command::Eval { config, seed_model, seed, out } => {
            let config = load_config(&config)?;
            let model = load_seed_model(Some(&seed_model), true)?;
            let params = match model {
                Some(SeedModel::Completor(p)) => p,
                _ => unreachable!("load_seed_model returned no parameters"),
            };
            let k = Intrinsics::default_square(config.frame_size);
            let test_seed = mix_seed(seed, 0x74455354);
            let test = build_test_set(
                &config.world,
                config.test_scenes,
                config.test_triplets_per_scene,
                test_seed,
                &k,
            )?;
            let metrics =
                evaluate_on_test_set(&params, &test, config.sparse_count, mix_seed(test_seed, 1))?;
            let json = serde_json::to_string_pretty(&metrics).unwrap();
            if let Some(out) = out {
                std::fs::write(&out, &json)?;
                println!("metrics: {}", out.display());
            }
            println!("{json}");
        }
        Command::Bench { config, out, jobs, seed_model } => {
            let mut cfg = load_config(&config)?;
            if let Some(jobs) = jobs {
                cfg.jobs = jobs;
            }
            let model = load_seed_model(seed_model.as_deref(), false)?;
            let report = run_benchmark(&cfg, model)?;
            let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            write_report(&report, &dir)?;
            println!("report: {}", dir.join("report.csv").display());
            for agg in &report.aggregates {
                println!(
                    "{:>8}  mae={:.1}mm rmse={:.1}mm imae={:.2} irmse={:.2}",
                    agg.policy.label(),
                    agg.mean.mae_mm,
                    agg.mean.rmse_mm,
                    agg.mean.imae_per_km,
                    agg.mean.irmse_per_km
                );
            }
            for imp in &report.improvements {
                println!(
                    "deux vs {:>8}: {:+.1}% mae",
                    imp.baseline.label(),
                    imp.mae_improvement_pct
                );
            }
        }
        Command::Plot { config, data, episode, out } => {
            let config = load_config(&config)?;
            let (_, records) = read_dataset(&data)?;
            let rec = records.get(episode).ok_or_else(|| {
                CliError::Usage(format!(
                    "episode {episode} out of range (dataset has {})",
                    records.len()
                ))
            })?;
            let grid = rebuild_grid(&config, rec);
            let plot = render_trajectory_plot(rec, &grid, &out)?;
            println!("trajectory: {}", plot.display());
        }
    }
    Ok(())
}

/// Parses `argv` and runs the selected command, returning the process exit
/// code. The first element is the program name.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own help/version output with exit code 0.
            let code = if e.exit_code() == 0 { 0 } else { EXIT_USAGE };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}
