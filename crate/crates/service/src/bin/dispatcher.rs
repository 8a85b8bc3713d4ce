//! Step dispatcher.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;

use chips_core::dispatch::ComputeNode;
use chips_service::api;
use chips_service::dispatcher::{router, Dispatcher, DispatcherConfig};

#[derive(Parser)]
#[command(
    name = "dispatcher",
    about = "Places steps on compute nodes and drives them to completion"
)]
struct Args {
    /// JSON array of compute nodes, used when the state dir has none.
    #[arg(long)]
    nodes: Option<PathBuf>,
    #[arg(long)]
    state_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 5055)]
    port: u16,
    /// Seconds between health probes; 0 turns them off.
    #[arg(long, default_value_t = 10)]
    health_interval: u64,
    #[arg(long, default_value_t = 1000)]
    backoff_ms: u64,
    #[arg(long, default_value_t = 500)]
    poll_ms: u64,
    #[arg(long, default_value_t = 3)]
    retry_budget: u32,
    /// Bearer token required by PUT /api/v1/nodes.
    #[arg(long, env = "CHIPS_DISPATCHER_ADMIN_TOKEN")]
    admin_token: Option<String>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    api::init_tracing();
    let args = Args::parse();
    let seed: Vec<ComputeNode> = match &args.nodes {
        Some(p) => {
            serde_json::from_slice(&std::fs::read(p).context("reading nodes file")?).context("parsing nodes file")?
        }
        None => Vec::new(),
    };
    let mut cfg = DispatcherConfig::new(&args.state_dir);
    cfg.health_interval = (args.health_interval > 0).then(|| Duration::from_secs(args.health_interval));
    cfg.backoff_base = Duration::from_millis(args.backoff_ms);
    cfg.poll_interval = Duration::from_millis(args.poll_ms);
    cfg.retry_budget = args.retry_budget;
    cfg.admin_token = args.admin_token;
    let d = Dispatcher::open(cfg, seed)?;
    api::serve(router(d), &args.host, args.port).await?;
    Ok(())
}
