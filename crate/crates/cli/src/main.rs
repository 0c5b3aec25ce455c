use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::error::ErrorKind as ClapKind;
use clap::{Args, Parser, Subcommand};
use laneforge_cli::{run_stages, Overrides, PipelineConfig, PipelineError, Stage};

#[derive(Parser)]
#[command(name = "laneforge", version, about = "Lane-level road network synthesis from street-view lane observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides `run_dir`.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Crawl seed panorama id; repeatable, replaces the configured seeds.
    #[arg(long = "seed", value_name = "ID")]
    seeds: Vec<String>,
    #[arg(long, value_name = "METERS")]
    radius_m: Option<f64>,
    #[arg(long, value_name = "METERS")]
    lane_width_m: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Timestamp recorded in the catalog (RFC 3339).
    #[arg(long, value_name = "TIME")]
    crawled_at: Option<DateTime<Utc>>,
}

#[derive(Subcommand)]
enum Command {
    /// Breadth-first crawl of panorama metadata into catalog.jsonl.
    Crawl(Common),
    /// Convert the catalog to WGS-84.
    Transform(Common),
    /// Chain panoramas into observation tracks split at junctions.
    Tracks(Common),
    /// Match tracks to road edges.
    Match(Common),
    /// Fuse observed lane counts per edge.
    Fuse(Common),
    /// Build the lane-level network.
    Build(Common),
    /// Write GeoJSON and simulation XML.
    Export(Common),
    /// Score detections against annotations.
    Eval(Common),
    /// Run every stage in order.
    All(Common),
    /// Write the synthetic grid town fixture.
    #[command(hide = true)]
    FixtureTown {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn fail(e: &PipelineError) -> ExitCode {
    eprintln!("{}", e.record());
    ExitCode::from(e.exit_code() as u8)
}

fn run_pipeline(common: Common, stages: Option<Stage>) -> Result<(), PipelineError> {
    let Some(path) = common.config else {
        return Err(PipelineError::config("--config <PATH> is required"));
    };
    let overrides = Overrides {
        run_dir: common.run_dir,
        seeds: common.seeds,
        radius_m: common.radius_m,
        lane_width_m: common.lane_width_m,
        tau: common.tau,
        crawled_at: common.crawled_at,
    };
    let cfg = PipelineConfig::load(&path, &overrides)?;
    match stages {
        Some(s) => run_stages(&cfg, &[s]),
        None => {
            let all: Vec<Stage> = Stage::ALL
                .into_iter()
                .filter(|s| *s != Stage::Eval || cfg.annotations.is_some())
                .collect();
            run_stages(&cfg, &all)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (common, stage) = match cli.command {
        Command::FixtureTown { out } => {
            return match laneforge::fixture::write_town(&out) {
                Ok(_) => ExitCode::SUCCESS,
                Err(e) => fail(&PipelineError::io(e.to_string()).with_path(&out)),
            };
        }
        Command::Crawl(c) => (c, Some(Stage::Crawl)),
        Command::Transform(c) => (c, Some(Stage::Transform)),
        Command::Tracks(c) => (c, Some(Stage::Tracks)),
        Command::Match(c) => (c, Some(Stage::Match)),
        Command::Fuse(c) => (c, Some(Stage::Fuse)),
        Command::Build(c) => (c, Some(Stage::Build)),
        Command::Export(c) => (c, Some(Stage::Export)),
        Command::Eval(c) => (c, Some(Stage::Eval)),
        Command::All(c) => (c, None),
    };
    if common.config.is_none() {
        eprintln!("error: --config <PATH> is required\n\nUsage: laneforge <STAGE> --config <PATH>\n\nFor more information, try '--help'.");
        return fail(&PipelineError::config("--config <PATH> is required"));
    }
    match run_pipeline(common, stage) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
