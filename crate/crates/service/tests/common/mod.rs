#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use chips_core::dispatch::{ComputeNode, NodeHealth};
use chips_core::pacs::{build_corpus, Corpus, CorpusConfig};

pub const PACS_ID: &str = "chips";
pub const PACS_SECRET: &str = "s3cret";
pub const ADMIN: (&str, &str) = ("admin", "adminpw");

/// A service binary running on an ephemeral port. Killed on drop.
pub struct Proc {
    pub name: String,
    pub url: String,
    pub child: Child,
}

impl Proc {
    pub fn start(bin: &str, args: &[String], log_dir: &Path) -> Proc {
        let name = Path::new(bin).file_name().unwrap().to_string_lossy().into_owned();
        let log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_dir.join(format!("{name}.log")))
            .unwrap();
        let mut child = Command::new(bin)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(log)
            .env("RUST_LOG", "info")
            .spawn()
            .unwrap_or_else(|e| panic!("starting {bin}: {e}"));
        let stdout = child.stdout.take().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut r = BufReader::new(stdout);
            let mut line = String::new();
            let _ = r.read_line(&mut line);
            let _ = tx.send(line);
            let mut sink = Vec::new();
            let _ = r.read_to_end(&mut sink);
        });
        let line = rx
            .recv_timeout(Duration::from_secs(20))
            .unwrap_or_else(|_| panic!("{name} did not report its address"));
        let addr = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("{name}: unexpected first line {line:?}"));
        Proc {
            name,
            url: format!("http://{addr}"),
            child,
        }
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        self.kill();
    }
}

pub fn pid_alive(pid: u32) -> bool {
    // SAFETY: signal 0 only checks for existence.
    unsafe { libc::kill(pid as i32, 0) == 0 }
}

pub fn s(v: impl ToString) -> String {
    v.to_string()
}

pub struct Cluster {
    pub dir: tempfile::TempDir,
    pub corpus: Corpus,
    pub pacs: Proc,
    pub fileio: Proc,
    pub jobmgrs: Vec<Proc>,
    pub dispatcher: Proc,
    pub core: Proc,
}

impl Cluster {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn job_root(&self) -> PathBuf {
        self.root().join("jobs")
    }

    pub fn start(jobmgrs: usize) -> Cluster {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let logs = root.join("logs");
        std::fs::create_dir_all(&logs).unwrap();
        let corpus = build_corpus(&root.join("corpus"), &CorpusConfig::default()).unwrap();
        std::fs::write(root.join("creds"), format!("{PACS_ID}:{PACS_SECRET}\n")).unwrap();
        std::fs::write(root.join("users"), format!("{}:{}:ADMIN\n", ADMIN.0, ADMIN.1)).unwrap();
        let p = |x: &str| root.join(x).to_string_lossy().into_owned();

        let pacs = Proc::start(
            env!("CARGO_BIN_EXE_pacs-sim"),
            &[
                s("--corpus"),
                p("corpus"),
                s("--cred-file"),
                p("creds"),
                s("--port"),
                s(0),
                s("--fault-hooks"),
            ],
            &logs,
        );
        let fileio = Proc::start(
            env!("CARGO_BIN_EXE_fileio"),
            &[s("--job-root"), p("jobs"), s("--port"), s(0), s("--fault-hooks")],
            &logs,
        );
        let jms: Vec<Proc> = (0..jobmgrs).map(|_| start_jobmgr(&root.join("jobs"), &logs)).collect();
        let nodes: Vec<ComputeNode> = jms
            .iter()
            .enumerate()
            .map(|(i, j)| ComputeNode {
                id: format!("node{}", i + 1),
                jobmgr_url: j.url.clone(),
                fileio_url: fileio.url.clone(),
                capacity: 2,
                queue_len: 0,
                health: NodeHealth::Up,
                labels: Default::default(),
            })
            .collect();
        std::fs::write(root.join("nodes.json"), serde_json::to_vec_pretty(&nodes).unwrap()).unwrap();
        let dispatcher = start_dispatcher(root, &logs);
        let core = start_core(root, &logs, &dispatcher.url, &pacs.url);
        Cluster {
            dir,
            corpus,
            pacs,
            fileio,
            jobmgrs: jms,
            dispatcher,
            core,
        }
    }

    pub fn restart_dispatcher(&mut self) {
        self.dispatcher.kill();
        self.dispatcher = start_dispatcher(self.dir.path(), &self.dir.path().join("logs"));
    }

    pub fn restart_core(&mut self) {
        self.core.kill();
        let root = self.dir.path();
        self.core = start_core(root, &root.join("logs"), &self.dispatcher.url, &self.pacs.url);
    }

    pub fn dump_logs(&self) {
        let logs = self.root().join("logs");
        for e in std::fs::read_dir(&logs).unwrap().flatten() {
            let text = std::fs::read_to_string(e.path()).unwrap_or_default();
            let tail: Vec<&str> = text.lines().rev().take(30).collect();
            eprintln!("--- {} ---", e.path().display());
            for l in tail.iter().rev() {
                eprintln!("{l}");
            }
        }
    }
}

pub fn start_core(root: &Path, logs: &Path, dispatcher_url: &str, pacs_url: &str) -> Proc {
    let p = |x: &str| root.join(x).to_string_lossy().into_owned();
    Proc::start(
        env!("CARGO_BIN_EXE_chips-server"),
        &[
            s("--store-path"),
            p("store"),
            s("--port"),
            s(0),
            s("--dispatcher-url"),
            s(dispatcher_url),
            s("--pacs-url"),
            s(pacs_url),
            s("--pacs-cred"),
            format!("{PACS_ID}:{PACS_SECRET}"),
            s("--users"),
            p("users"),
            s("--secret"),
            s("test-signing-key"),
            s("--poll-ms"),
            s(100),
        ],
        logs,
    )
}

pub fn start_jobmgr(job_root: &Path, logs: &Path) -> Proc {
    Proc::start(
        env!("CARGO_BIN_EXE_jobmgr"),
        &[
            s("--job-root"),
            job_root.to_string_lossy().into_owned(),
            s("--port"),
            s(0),
            s("--max-parallel"),
            s(2),
            s("--grace-secs"),
            s(1),
        ],
        logs,
    )
}

pub fn start_dispatcher(root: &Path, logs: &Path) -> Proc {
    let p = |x: &str| root.join(x).to_string_lossy().into_owned();
    Proc::start(
        env!("CARGO_BIN_EXE_dispatcher"),
        &[
            s("--nodes"),
            p("nodes.json"),
            s("--state-dir"),
            p("dispatch"),
            s("--port"),
            s(0),
            s("--health-interval"),
            s(1),
            s("--backoff-ms"),
            s(100),
            s("--poll-ms"),
            s(100),
        ],
        logs,
    )
}

pub async fn poll_until<T, F, Fut>(limit: Duration, mut f: F) -> Option<T>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Option<T>>,
{
    let start = Instant::now();
    loop {
        if let Some(v) = f().await {
            return Some(v);
        }
        if start.elapsed() > limit {
            return None;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}
