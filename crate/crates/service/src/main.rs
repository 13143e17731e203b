use std::path::PathBuf;

use clap::Parser;
use eoimap_service::{serve, ServiceConfig};
use tracing_subscriber::EnvFilter;

/// Serve events of interest over HTTP.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Listen address, e.g. 127.0.0.1:8080.
    #[arg(long)]
    listen: Option<String>,
    /// Window length in milliseconds.
    #[arg(long)]
    window_ms: Option<i64>,
    /// Snapshot directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .init();
    let args = Args::parse();
    let mut config = ServiceConfig::load(args.config.as_deref())?;
    if let Some(l) = args.listen {
        config.pipeline.listen = l;
    }
    if let Some(w) = args.window_ms {
        config.pipeline.window_ms = w;
    }
    if let Some(d) = args.data_dir {
        config.pipeline.data_dir = Some(d);
    }
    config.pipeline.validate().map_err(anyhow::Error::msg)?;
    serve(config).await
}
