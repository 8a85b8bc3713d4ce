//! Simulated PACS serving a synthetic corpus.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;

use chips_core::pacs::{build_corpus, Authenticator, Corpus, CorpusConfig, CredentialTable, SystemClock};
use chips_service::{api, pacs_sim};

#[derive(Parser)]
#[command(name = "pacs-sim", about = "Simulated PACS over a synthetic corpus")]
struct Args {
    /// Corpus directory (holds manifest.json).
    #[arg(long)]
    corpus: PathBuf,
    /// Build the default corpus first if the directory has none.
    #[arg(long)]
    build: bool,
    /// Lines of `identifier:secret`.
    #[arg(long)]
    cred_file: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 4242)]
    port: u16,
    /// Token lifetime in seconds.
    #[arg(long, default_value_t = 3600)]
    token_ttl: u64,
    /// Accept `?fault=` on retrieve.
    #[arg(long)]
    fault_hooks: bool,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    api::init_tracing();
    let args = Args::parse();
    let corpus = match Corpus::load(&args.corpus) {
        Ok(c) => c,
        Err(_) if args.build => build_corpus(&args.corpus, &CorpusConfig::default())?,
        Err(e) => return Err(e).context("loading corpus"),
    };
    let creds = std::fs::read_to_string(&args.cred_file).context("reading credential file")?;
    let auth = Authenticator::new(
        CredentialTable::parse(&creds)?,
        std::time::Duration::from_secs(args.token_ttl),
        Arc::new(SystemClock),
    );
    let state = Arc::new(pacs_sim::PacsState {
        corpus,
        auth,
        fault_hooks: args.fault_hooks,
    });
    api::serve(pacs_sim::router(state), &args.host, args.port).await?;
    Ok(())
}
