//! `fanout` binary. Flags with dots in their names (`--cost.search_cost 2`)
//! are configuration overrides and are peeled off before clap sees the
//! argument list; everything else is ordinary subcommand syntax.
//!
//! Exit codes: 0 success, 2 configuration or usage problem, 3 backend or
//! generation failure, 4 unparseable model output or input file.

use clap::{Parser, Subcommand};
use fanout_cli::{cmd_bench, cmd_dag, cmd_run, load_config, split_dotted_overrides, CliError};
use fanout_core::engine::Mode;
use fanout_core::workload::Family;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fanout", version, about = "Decompose queries and expand the points in parallel")]
struct Cli {
    /// JSON config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one query and write its timeline and answer artifacts.
    Run {
        /// Query text (or use --query-file).
        #[arg(long, conflicts_with = "query_file")]
        query: Option<String>,
        /// Read the query from a file.
        #[arg(long)]
        query_file: Option<PathBuf>,
        /// Identifier used in artifact names.
        #[arg(long, default_value = "q1")]
        query_id: String,
        /// normal, parexp, depexp or pipsch (defaults to the config's mode).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Run a scripted workload family across modes and write reports.
    Bench {
        /// independent, context-chain or dependent-chain.
        #[arg(long, default_value = "independent")]
        family: String,
        #[arg(long, default_value_t = 4)]
        queries: usize,
        #[arg(long, default_value_t = 4)]
        points: usize,
        #[arg(long, default_value_t = 100)]
        tokens_per_point: usize,
        /// Comma-separated list of modes to compare.
        #[arg(long, default_value = "normal,depexp,pipsch")]
        modes: String,
    },
    /// Serve the pipeline over HTTP.
    Serve {
        /// Listen address, e.g. 127.0.0.1:8787.
        #[arg(long)]
        bind: Option<String>,
        /// Default mode for submitted queries.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Print the graphs a decomposition file produces.
    Dag {
        /// JSON key-point list in the decomposition wire format.
        #[arg(long)]
        points_file: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    s.parse().map_err(|e: String| CliError::Config(anyhow::anyhow!(e)))
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), CliError> {
    let mut cfg =
        load_config(cli.config.as_deref(), overrides).map_err(CliError::Config)?;

    match cli.command {
        Command::Run {
            query,
            query_file,
            query_id,
            mode,
        } => {
            let query = match (query, query_file) {
                (Some(q), _) => q,
                (None, Some(path)) => std::fs::read_to_string(&path).map_err(|e| {
                    CliError::Config(anyhow::anyhow!("cannot read {}: {e}", path.display()))
                })?,
                (None, None) => {
                    return Err(CliError::Config(anyhow::anyhow!(
                        "one of --query or --query-file is required"
                    )))
                }
            };
            let mode = match mode {
                Some(m) => parse_mode(&m)?,
                None => cfg.run_mode(),
            };
            let out = cmd_run(&cfg, &query, &query_id, mode)?;
            for w in &out.warnings {
                log::warn!("{w}");
            }
            println!("{}", out.answer);
            log::info!(
                "mode={} tokens={} elapsed={:.3} artifacts={}",
                out.mode.as_str(),
                out.tokens,
                out.elapsed,
                cfg.out_dir.display()
            );
            Ok(())
        }
        Command::Bench {
            family,
            queries,
            points,
            tokens_per_point,
            modes,
        } => {
            let family: Family = family
                .parse()
                .map_err(|e: String| CliError::Config(anyhow::anyhow!(e)))?;
            let modes = modes
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(parse_mode)
                .collect::<Result<Vec<_>, _>>()?;
            let out = cmd_bench(&cfg, family, queries, points, tokens_per_point, &modes)?;
            print!("{}", out.render_table());
            log::info!("wrote {} files under {}", out.files.len(), cfg.out_dir.display());
            Ok(())
        }
        Command::Serve { bind, mode } => {
            if let Some(bind) = bind {
                cfg.service.bind = bind;
            }
            if let Some(mode) = mode {
                parse_mode(&mode)?;
                cfg.mode = mode;
            }
            fanout_cli::service::serve(&cfg)
        }
        Command::Dag { points_file } => {
            print!("{}", cmd_dag(&points_file)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (plain, overrides) = split_dotted_overrides(std::env::args().collect());
    let cli = Cli::parse_from(plain);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
