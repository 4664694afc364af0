use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use zagii::backend::{build_gateway, export_demo_scripts, BackendKind};
use zagii_core::analytics::{analytics_summary, simulate, SimulationConfig};
use zagii_core::engine::{Engine, EngineConfig};
use zagii_core::persistence::{FileStore, MemoryStore, Store};

#[derive(Parser)]
#[command(name = "zagii", version, about = "AI-native role-playing game engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendKind,
    /// Directory with gateway.toml, or light.jsonl and sota.jsonl.
    #[arg(long)]
    scripts: Option<PathBuf>,
    /// Gateway TOML file; overrides --scripts.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fraction of rounds replayed on the SOTA tier for comparison.
    #[arg(long, default_value_t = 0.1)]
    sampling_rate: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP and WebSocket service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "zagii-data")]
        data_dir: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        /// End sessions idle for this many seconds.
        #[arg(long)]
        idle_timeout_secs: Option<u64>,
        /// Game documents to register at startup.
        #[arg(long = "game")]
        games: Vec<PathBuf>,
    },
    /// Play a game in the terminal.
    Play {
        game_file: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        /// Persist the session under this directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Generate a synthetic session corpus and print its analytics summary.
    Simulate {
        #[arg(long)]
        games: usize,
        #[arg(long)]
        sessions: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1.1)]
        zipf_exponent: f64,
        /// Add one outlier game with this many sessions.
        #[arg(long)]
        outlier_sessions: Option<usize>,
        /// Exclude games with more sessions than this from the summary.
        #[arg(long)]
        outlier_threshold: Option<u64>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Write the session records into this data directory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Write the bundled demo scripts to a directory.
    ExportScripts { dir: PathBuf },
}

fn engine_config(backend: &BackendArgs) -> EngineConfig {
    EngineConfig { sampling_rate: backend.sampling_rate, ..EngineConfig::default() }
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Serve { port, data_dir, backend, idle_timeout_secs, games } => {
            let gateway = build_gateway(backend.backend, backend.scripts.as_deref(), backend.config.as_deref())?;
            let store = Arc::new(FileStore::open(&data_dir)?);
            let engine = Arc::new(Engine::new(Arc::new(gateway), store, engine_config(&backend))?);
            for path in games {
                let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                let (id, _) = engine.register_game_document(&bytes).with_context(|| format!("registering {}", path.display()))?;
                tracing::info!(game = %id, "registered");
            }
            serve(engine, port, idle_timeout_secs.map(Duration::from_secs))
        }
        Command::Play { game_file, backend, data_dir } => {
            let gateway = build_gateway(backend.backend, backend.scripts.as_deref(), backend.config.as_deref())?;
            let store: Arc<dyn Store> = match data_dir {
                Some(dir) => Arc::new(FileStore::open(dir)?),
                None => Arc::new(MemoryStore::new()),
            };
            let engine = Engine::new(Arc::new(gateway), store, engine_config(&backend))?;
            let bytes = std::fs::read(&game_file).with_context(|| format!("reading {}", game_file.display()))?;
            let (game_id, _) = engine.register_game_document(&bytes)?;
            let stdin = std::io::stdin();
            zagii::repl::play(&engine, &game_id, stdin.lock(), std::io::stdout())?;
            Ok(())
        }
        Command::Simulate { games, sessions, seed, zipf_exponent, outlier_sessions, outlier_threshold, top_k, data_dir } => {
            let config = SimulationConfig { games, sessions, seed, zipf_exponent, outlier_sessions };
            let records = simulate(&config);
            if let Some(dir) = data_dir {
                let store = FileStore::open(dir)?;
                for record in &records {
                    store.put_record(record)?;
                }
            }
            let summary = analytics_summary(&records, top_k, outlier_threshold);
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{}", serde_json::to_string_pretty(&summary)?) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => Ok(r?),
            }
        }
        Command::ExportScripts { dir } => export_demo_scripts(&dir),
    }
}

fn serve(engine: Arc<Engine>, port: u16, idle: Option<Duration>) -> anyhow::Result<()> {
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        if let Some(idle) = idle {
            let engine = engine.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(idle.min(Duration::from_secs(30)).max(Duration::from_secs(1)));
                loop {
                    tick.tick().await;
                    let engine = engine.clone();
                    let expired = tokio::task::spawn_blocking(move || engine.expire_idle(idle)).await.unwrap_or_default();
                    for id in expired {
                        tracing::info!(session = %id, "ended after idle timeout");
                    }
                }
            });
        }
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        eprintln!("zagii listening on {}", listener.local_addr()?);
        axum::serve(listener, zagii::api::router(engine)).await?;
        Ok(())
    })
}
