use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use embryogen_cli::{load_config, parse_stages, ConfigError, Pipeline, PipelineConfig, PipelineError, StageName};
use embryogen_turing::{serve, AppState};

#[derive(Parser)]
#[command(name = "embryogen", version, about = "Synthetic embryo imaging workflow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run pipeline stages (all batch stages by default).
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of ingest, train-gen, select, generate,
        /// train-clf, evaluate, report, serve.
        #[arg(long)]
        stages: Option<String>,
    },
    /// Check a configuration and print its normalized form.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Serve the generated evaluation pool over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
    },
}

fn configure(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut config = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn serve_pool(pipeline: &Pipeline) -> anyhow::Result<()> {
    let (store, pool_id) = pipeline.prepare_service()?;
    let bind = pipeline.config().bind.clone();
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        println!("serving pool `{pool_id}` on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve(listener, AppState::new(store), shutdown).await.context("serving")
    })
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Validate { common } => {
            let pipeline = Pipeline::new(configure(&common)?)?;
            let path = pipeline.echo_config()?;
            print!("{}", pipeline.config().to_toml());
            eprintln!("normalized configuration written to {}", path.display());
        }
        Command::Run { common, stages } => {
            let requested: BTreeSet<StageName> = match stages {
                Some(list) => parse_stages(&list)?,
                None => StageName::BATCH.into_iter().collect(),
            };
            let pipeline = Pipeline::new(configure(&common)?)?.verbose(!common.quiet);
            let outcomes = pipeline.run(&requested)?;
            if !common.quiet {
                for o in &outcomes {
                    println!("{:<10} {:?} {}", o.stage.as_str(), o.status, &o.digest[..16]);
                }
            }
            if requested.contains(&StageName::Serve) {
                serve_pool(&pipeline)?;
            }
        }
        Command::Serve { common } => {
            let pipeline = Pipeline::new(configure(&common)?)?;
            serve_pool(&pipeline)?;
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        p.kind()
    } else if let Some(c) = e.downcast_ref::<ConfigError>() {
        c.kind()
    } else {
        "error"
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
