//! Per-node job manager.

use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, ValueEnum};

use chips_service::api;
use chips_service::jobmgr::{router, Backend, JobManager, JobManagerConfig};

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Local,
    Container,
}

#[derive(Parser)]
#[command(name = "jobmgr", about = "Runs plugin jobs on one compute node")]
struct Args {
    #[arg(long)]
    job_root: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 5010)]
    port: u16,
    #[arg(long, default_value_t = 4)]
    max_parallel: usize,
    #[arg(long, value_enum, default_value = "local")]
    backend: BackendArg,
    /// Container runtime for `--backend container`.
    #[arg(long, default_value = "docker")]
    runtime: String,
    #[arg(long, default_value_t = 1024)]
    queue_limit: usize,
    /// Seconds between SIGTERM and SIGKILL.
    #[arg(long, default_value_t = 5)]
    grace_secs: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    api::init_tracing();
    let args = Args::parse();
    let mut cfg = JobManagerConfig::new(&args.job_root, args.max_parallel);
    cfg.queue_limit = args.queue_limit;
    cfg.grace = Duration::from_secs(args.grace_secs);
    cfg.backend = match args.backend {
        BackendArg::Local => Backend::Local,
        BackendArg::Container => Backend::Container { runtime: args.runtime },
    };
    let mgr = JobManager::new(cfg)?;
    api::serve(router(mgr), &args.host, args.port).await?;
    Ok(())
}
