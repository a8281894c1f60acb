use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use orthofuse::matching::MatcherKind;
use orthofuse_cli::{stages, CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "orthofuse", version, about = "GPS/IMU/radar-aided UAV orthoimage pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON pipeline configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the scene seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory
    #[arg(long)]
    output: Option<PathBuf>,
    /// Built-in scene (road-like, hill-like, noisy, tiny)
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory
    Simulate(Common),
    /// GPS/IMU fusion to a TUM trajectory
    Fuse(Common),
    /// Radar point cloud to a terrain grid
    Terrain(Common),
    /// Match consecutive frames and refine poses
    Match {
        #[command(flatten)]
        common: Common,
        /// bf, bf-opt, kd or kd-opt
        #[arg(long)]
        mode: Option<MatcherKind>,
        /// Keep at most N pairs per block
        #[arg(long, num_args = 0..=1, default_missing_value = "4")]
        homogenize: Option<usize>,
    },
    /// Render the georeferenced orthoimage
    Ortho(Common),
    /// Compare stage outputs with the scene ground truth
    Eval(Common),
    /// Run every stage and write summary.json
    RunAll(Common),
    /// Time the full matcher matrix
    Bench(Common),
}

fn load(common: &Common) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(t) = common.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = &common.output {
        cfg.output = o.clone();
    }
    if let Some(p) = &common.preset {
        cfg.preset = Some(p.clone());
        cfg.scene = None;
    }
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).unwrap_or_default()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (common, cmd) = match &cli.command {
        Command::Simulate(c)
        | Command::Fuse(c)
        | Command::Terrain(c)
        | Command::Ortho(c)
        | Command::Eval(c)
        | Command::RunAll(c)
        | Command::Bench(c) => (c.clone(), &cli.command),
        Command::Match { common, .. } => (common.clone(), &cli.command),
    };
    let mut cfg = load(&common)?;
    if let Command::Match { mode, homogenize, .. } = cmd {
        if let Some(m) = mode {
            cfg.matching.matcher = *m;
        }
        if homogenize.is_some() {
            cfg.matching.homogenize = *homogenize;
        }
    }
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    match cmd {
        Command::Simulate(_) => {
            let r = stages::cmd_simulate(&cfg)?;
            println!("wrote {} frames to {}", r.frames, r.dir.display());
        }
        Command::Fuse(_) => {
            let r = stages::cmd_fuse(&cfg)?;
            println!("fused {} poses ({} camera poses)", r.body.len(), r.cameras.len());
        }
        Command::Terrain(_) => {
            let g = stages::cmd_terrain(&cfg)?;
            println!("terrain grid {} x {} at {} m", g.cols, g.rows, g.cell_size);
        }
        Command::Match { .. } => {
            let r = stages::cmd_match(&cfg)?;
            println!("{}", orthofuse::eval::bench_csv(std::slice::from_ref(&r.row)).trim_end());
            if let Some(q) = r.quality {
                println!("precision {:.4} recall {:.4}", q.precision, q.recall);
            }
        }
        Command::Ortho(_) => {
            let r = stages::cmd_ortho(&cfg)?;
            println!("orthoimage {} x {} at gsd {:.4} m: {}", r.raster.cols, r.raster.rows, r.raster.gsd, r.files.png.display());
        }
        Command::Eval(_) => println!("{}", json(&stages::cmd_eval(&cfg)?)),
        Command::RunAll(_) => println!("{}", json(&stages::cmd_run_all(&cfg)?)),
        Command::Bench(_) => {
            let r = stages::cmd_bench(&cfg)?;
            print!("{}", orthofuse::eval::bench_csv(&r.rows()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
