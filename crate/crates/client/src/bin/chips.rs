use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use chips_client::{CoreClient, FileIoClient, PacsClient};
use chips_core::dicom::AnonymizationPolicy;
use chips_core::pacs::{build_corpus, CorpusConfig, QueryLevel, QuerySpec};
use chips_core::workflow::{AnnotateAction, PluginDescriptor};

#[derive(Parser)]
#[command(name = "chips", about = "Command-line client for the CHIPS services")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Talk to a PACS directly.
    Pacs {
        #[arg(long, env = "CHIPS_PACS_URL", default_value = "http://127.0.0.1:4242")]
        url: String,
        /// `identifier:secret`
        #[arg(long, env = "CHIPS_PACS_CRED")]
        cred: String,
        #[command(subcommand)]
        cmd: PacsCmd,
    },
    /// Push or pull directory trees on a file-IO node.
    Io {
        #[arg(long, env = "CHIPS_FILEIO_URL", default_value = "http://127.0.0.1:5005")]
        url: String,
        #[command(subcommand)]
        cmd: IoCmd,
    },
    /// Generate a synthetic corpus on disk.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        studies: usize,
        #[arg(long, default_value_t = 2)]
        series: usize,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print a session token for the core service.
    Login {
        #[arg(long, env = "CHIPS_URL", default_value = "http://127.0.0.1:8000")]
        url: String,
        #[arg(long)]
        user: String,
        #[arg(long, env = "CHIPS_PASSWORD")]
        secret: String,
    },
    /// Calls against the core service.
    Core {
        #[arg(long, env = "CHIPS_URL", default_value = "http://127.0.0.1:8000")]
        url: String,
        #[arg(long, env = "CHIPS_TOKEN")]
        token: String,
        #[command(subcommand)]
        cmd: CoreCmd,
    },
}

#[derive(Subcommand)]
enum PacsCmd {
    /// Study-level query; filters are `Keyword=pattern`.
    Query {
        #[arg(long)]
        series: bool,
        filters: Vec<String>,
    },
    /// Retrieve and anonymize a study into a directory.
    Pull {
        #[arg(long)]
        study: String,
        #[arg(long)]
        dest: PathBuf,
        /// Policy file; the bundled default when absent.
        #[arg(long)]
        anon_policy: Option<PathBuf>,
        #[arg(long, env = "CHIPS_ANON_SALT")]
        salt: Option<String>,
    },
}

#[derive(Subcommand)]
enum IoCmd {
    Push {
        dir: PathBuf,
        job_key: String,
    },
    Pull {
        job_key: String,
        dir: PathBuf,
        #[arg(long, default_value = "output")]
        subdir: String,
    },
    Manifest {
        job_key: String,
    },
}

#[derive(Subcommand)]
enum CoreCmd {
    Feeds,
    Feed {
        id: u64,
    },
    Tree {
        id: u64,
    },
    /// Pull a PACS study through the core and open a feed on it.
    Pull {
        study_uid: String,
        #[arg(long, default_value = "")]
        title: String,
    },
    Share {
        feed: u64,
        user: String,
    },
    Tag {
        feed: u64,
        text: String,
    },
    Comment {
        feed: u64,
        text: String,
    },
    Plugins,
    /// Register a plugin from a JSON descriptor file.
    Register {
        file: PathBuf,
    },
    /// Run a plugin on a feed; params are `name=value`.
    Run {
        feed: u64,
        plugin: String,
        #[arg(long)]
        parent: Option<u64>,
        #[arg(long)]
        version: Option<String>,
        params: Vec<String>,
    },
    Instance {
        id: u64,
    },
    Cancel {
        id: u64,
    },
    /// Metadata query, e.g. `"PatientSex = F AND file_count > 2"`.
    Meta {
        predicate: String,
    },
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn split_pair(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => bail!("expected name=value, got {s:?}"),
    }
}

fn split_cred(cred: &str) -> Result<(&str, &str)> {
    cred.split_once(':').context("credential must be identifier:secret")
}

#[tokio::main]
async fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Pacs { url, cred, cmd } => {
            let client = PacsClient::new(url);
            let (id, secret) = split_cred(&cred)?;
            match cmd {
                PacsCmd::Query { series, filters } => {
                    let mut spec = QuerySpec::study();
                    if series {
                        spec.level = QueryLevel::Series;
                    }
                    for f in &filters {
                        let (k, v) = split_pair(f)?;
                        spec = spec.with(&k, &v);
                    }
                    let token = client.authenticate(id, secret).await?;
                    print(&client.query(&token.token, &spec).await?)?;
                }
                PacsCmd::Pull {
                    study,
                    dest,
                    anon_policy,
                    salt,
                } => {
                    let mut policy = match anon_policy {
                        Some(f) => std::fs::read_to_string(&f)
                            .with_context(|| format!("reading {}", f.display()))?
                            .parse::<AnonymizationPolicy>()?,
                        None => AnonymizationPolicy::default_policy(),
                    };
                    if let Some(s) = salt {
                        policy = policy.with_salt(s.into_bytes());
                    }
                    let receipt = client.pull_study(id, secret, &study, policy, &dest, None).await?;
                    print(&receipt)?;
                }
            }
        }
        Cmd::Io { url, cmd } => {
            let client = FileIoClient::new(url);
            match cmd {
                IoCmd::Push { dir, job_key } => print(&client.push_tree(&dir, &job_key, None).await?)?,
                IoCmd::Pull { job_key, dir, subdir } => print(&client.pull_tree(&job_key, &subdir, &dir, None).await?)?,
                IoCmd::Manifest { job_key } => print(&client.manifests(&job_key).await?)?,
            }
        }
        Cmd::Corpus {
            out,
            studies,
            series,
            instances,
            seed,
        } => {
            let config = CorpusConfig {
                studies,
                series_per_study: series,
                instances_per_series: instances,
                seed,
                ..CorpusConfig::default()
            };
            let corpus = build_corpus(&out, &config)?;
            print(&corpus.studies())?;
        }
        Cmd::Login { url, user, secret } => {
            let mut client = CoreClient::new(url);
            let resp = client.login(&user, &secret).await?;
            println!("{}", resp.token);
        }
        Cmd::Core { url, token, cmd } => {
            let client = CoreClient::new(url).with_token(token);
            match cmd {
                CoreCmd::Feeds => print(&client.feeds().await?)?,
                CoreCmd::Feed { id } => print(&client.feed(id).await?)?,
                CoreCmd::Tree { id } => print(&client.tree(id).await?)?,
                CoreCmd::Pull { study_uid, title } => {
                    let receipt = client.pacs_pull(&study_uid).await?;
                    print(&client.create_feed(&title, &receipt).await?)?;
                }
                CoreCmd::Share { feed, user } => print(&client.share(feed, &user).await?)?,
                CoreCmd::Tag { feed, text } => print(&client.annotate(feed, &AnnotateAction::AddTag { text }).await?)?,
                CoreCmd::Comment { feed, text } => {
                    print(&client.annotate(feed, &AnnotateAction::AddComment { text }).await?)?
                }
                CoreCmd::Plugins => print(&client.plugins().await?)?,
                CoreCmd::Register { file } => {
                    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
                    let d: PluginDescriptor = serde_json::from_str(&text)?;
                    print(&client.register_plugin(&d).await?)?;
                }
                CoreCmd::Run {
                    feed,
                    plugin,
                    parent,
                    version,
                    params,
                } => {
                    let mut map = BTreeMap::new();
                    for p in &params {
                        let (k, v) = split_pair(p)?;
                        let value = serde_json::from_str(&v).unwrap_or(serde_json::Value::String(v));
                        map.insert(k, value);
                    }
                    print(
                        &client
                            .create_instance(feed, parent, &plugin, version.as_deref(), map)
                            .await?,
                    )?;
                }
                CoreCmd::Instance { id } => print(&client.instance(id).await?)?,
                CoreCmd::Cancel { id } => print(&client.cancel_instance(id).await?)?,
                CoreCmd::Meta { predicate } => print(&client.query_metadata(&predicate).await?)?,
            }
        }
    }
    Ok(())
}
