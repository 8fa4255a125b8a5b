use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zpd_cli::{run, Command, Context, Overrides, PipelineConfig, StageError};
use zpd_core::gateway::GatewayMode;

#[derive(Parser)]
#[command(name = "zpd", version, about = "Zone-of-proximal-development pipeline for in-context learning")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, default_value = "zpd.toml")]
    config: PathBuf,
    /// Base seed for every stochastic stage without an explicit seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Serve everything from the replay cache; fail on a miss.
    #[arg(long, global = true, conflicts_with = "live")]
    replay: bool,
    /// Call the endpoint on cache misses.
    #[arg(long, global = true)]
    live: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assign zones from paired DP/ICL responses; writes zones.csv, zone_dist.json, overlap.json.
    MeasureZones,
    /// Build candidate pools and greedy oracle demonstrations; resumable.
    BuildOracle,
    /// Fit the IRT variants; writes irt_model.bin, irt_eval.json, irt_pearson.json.
    FitIrt,
    /// Predict per-query zones from the fitted model.
    PredictZones,
    /// Grid-search selective-ICL thresholds; writes policy_points.csv and pareto.csv.
    SelectIcl {
        #[arg(long)]
        grid_step: Option<f64>,
        #[arg(long)]
        token_budget: Option<u64>,
        #[arg(long)]
        strategy_records: Option<PathBuf>,
    },
    /// Write a baby-step curriculum schedule.json.
    MakeCurriculum,
    /// Summarise a fine-tuning loss log by zone.
    AnalyzeDynamics,
    /// Collect the summaries into report.json.
    Report,
}

fn fail(stage: &'static str, error: anyhow::Error) -> ExitCode {
    println!("{}", StageError { stage, error }.to_json());
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut overrides = Overrides {
        seed: cli.seed,
        mode: if cli.live {
            Some(GatewayMode::Live)
        } else if cli.replay {
            Some(GatewayMode::Replay)
        } else {
            None
        },
        out_dir: cli.out_dir,
        ..Default::default()
    };
    let cmd = match cli.command {
        Cmd::MeasureZones => Command::MeasureZones,
        Cmd::BuildOracle => Command::BuildOracle,
        Cmd::FitIrt => Command::FitIrt,
        Cmd::PredictZones => Command::PredictZones,
        Cmd::SelectIcl {
            grid_step,
            token_budget,
            strategy_records,
        } => {
            overrides.grid_step = grid_step;
            overrides.token_budget = token_budget;
            overrides.strategy_records = strategy_records;
            Command::SelectIcl
        }
        Cmd::MakeCurriculum => Command::MakeCurriculum,
        Cmd::AnalyzeDynamics => Command::AnalyzeDynamics,
        Cmd::Report => Command::Report,
    };
    let mut config = match PipelineConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => return fail("config", e),
    };
    config.apply(&overrides);
    match run(cmd, &Context::new(config)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
