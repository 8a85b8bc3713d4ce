//! The core API server.

use std::path::PathBuf;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;

use chips_service::api;
use chips_service::server::{router, Core, CoreConfig};

#[derive(Parser)]
#[command(name = "chips-server", about = "CHIPS core API")]
struct Args {
    #[arg(long)]
    store_path: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8000)]
    port: u16,
    #[arg(long, default_value = "http://127.0.0.1:5055")]
    dispatcher_url: String,
    #[arg(long)]
    pacs_url: Option<String>,
    /// `identifier:secret` for the PACS.
    #[arg(long, env = "CHIPS_PACS_CRED")]
    pacs_cred: Option<String>,
    /// Lines of `login:secret:ROLE` added at startup if missing.
    #[arg(long)]
    users: Option<PathBuf>,
    /// Static files served under /ui.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Key for signing session tokens.
    #[arg(long, env = "CHIPS_SECRET")]
    secret: String,
    /// Session lifetime in seconds.
    #[arg(long, default_value_t = 43200)]
    token_ttl: i64,
    #[arg(long, env = "CHIPS_ANON_SALT")]
    anon_salt: Option<String>,
    #[arg(long, default_value_t = 500)]
    poll_ms: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    api::init_tracing();
    let args = Args::parse();
    let mut cfg = CoreConfig::new(&args.store_path, args.dispatcher_url, args.secret);
    cfg.pacs_url = args.pacs_url;
    cfg.pacs_cred = match args.pacs_cred {
        Some(c) => {
            let (id, secret) = c.split_once(':').context("--pacs-cred must be identifier:secret")?;
            Some((id.to_string(), secret.to_string()))
        }
        None => None,
    };
    cfg.token_ttl = chrono::Duration::seconds(args.token_ttl);
    cfg.anon_salt = args.anon_salt;
    cfg.poll_interval = Duration::from_millis(args.poll_ms);
    cfg.ui_dir = args.ui_dir;
    let core = Core::open(cfg)?;
    if let Some(p) = &args.users {
        let n = core.seed_users(&std::fs::read_to_string(p).context("reading users file")?)?;
        tracing::info!(added = n, "users seeded");
    }
    api::serve(router(core), &args.host, args.port).await?;
    Ok(())
}
