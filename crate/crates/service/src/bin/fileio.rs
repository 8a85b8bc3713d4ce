//! Tree transfer service for a node's job root.

use std::path::PathBuf;

use clap::Parser;

use chips_service::api;
use chips_service::fileio::{router, FileIoState};

#[derive(Parser)]
#[command(name = "fileio", about = "Moves input and output trees in and out of a job root")]
struct Args {
    #[arg(long)]
    job_root: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 5005)]
    port: u16,
    /// Accept `?fault=` on pulls.
    #[arg(long)]
    fault_hooks: bool,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    api::init_tracing();
    let args = Args::parse();
    let state = FileIoState::new(&args.job_root, args.fault_hooks)?;
    api::serve(router(state), &args.host, args.port).await?;
    Ok(())
}
