use std::path::PathBuf;
use std::process::ExitCode;

use checklist_forge::pipeline::{
    build_executor, build_gateway, GatewayOptions, StageReport, TeacherSource,
};
use checklist_forge::{Pipeline, PipelineConfig, PipelineError, Stage};
use clap::Parser;

/// Builds checklist-scored preference data from an instruction corpus.
#[derive(Debug, Parser)]
#[command(name = "checklist-forge", version)]
struct Cli {
    /// ingest, checklists, verifiers, responses, score, mine, eval-checklists or all
    stage: String,
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Serve teacher calls only from this transcript store.
    #[arg(long, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Serve teacher calls from this store when possible and append new ones.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Use the built-in simulated teacher instead of an HTTP endpoint.
    #[arg(long)]
    simulate: bool,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(reports) => {
            for r in reports {
                println!("{}", describe(&r));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<Vec<StageReport>, PipelineError> {
    let target = match cli.stage.as_str() {
        "all" => None,
        name => Some(name.parse::<Stage>().map_err(PipelineError::Setup)?),
    };
    let config = PipelineConfig::load(&cli.config)?;
    let options = GatewayOptions {
        source: if cli.simulate {
            TeacherSource::Simulated
        } else {
            TeacherSource::Endpoint
        },
        record: cli.record.clone(),
        replay: cli.replay.clone(),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| PipelineError::Setup(format!("cannot start runtime: {e}")))?;
    let gateway = build_gateway(&config, &options)?;
    let executor = build_executor(&config);
    let pipeline = Pipeline::new(config, gateway, executor);
    runtime.block_on(async {
        match target {
            Some(stage) => Ok(vec![pipeline.run_stage(stage).await?]),
            None => pipeline.run_all().await,
        }
    })
}

fn describe(report: &StageReport) -> String {
    let status = if report.skipped { "up to date" } else { "done" };
    let counts = report
        .counts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    format!("{:<16} {status:<10} {counts}", report.stage.name())
}
