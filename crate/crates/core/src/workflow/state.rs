use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde_json::Value;

use super::model::*;
use super::plugin::{render_command, resolve_params, validate_descriptor};
use super::store::WalEntry;
use super::CoreError;
use crate::analysis::analyze_output;
use crate::dicom::{MetaSource, MetadataRecord};
use crate::dispatch::{Requirements, StepRequest};
use crate::index::{MetadataIndex, Predicate};
use crate::pacs::PullReceipt;

/// Everything core persists, with the operations over it. Each mutating
/// call queues the records it touched; the caller drains them with
/// [`CoreState::take_pending`] and appends them to the log.
#[derive(Debug)]
pub struct CoreState {
    store_root: PathBuf,
    users: BTreeMap<UserId, User>,
    logins: HashMap<String, UserId>,
    feeds: BTreeMap<FeedId, Feed>,
    plugins: BTreeMap<(String, String), PluginDescriptor>,
    instances: BTreeMap<InstanceId, PluginInstance>,
    index: MetadataIndex,
    next_user: UserId,
    next_feed: FeedId,
    next_instance: InstanceId,
    pending: Vec<WalEntry>,
}

/// Outcome of a status update from the dispatcher.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatusUpdate {
    pub changed: bool,
    pub analysis_records: usize,
    pub analysis_warnings: u32,
}

impl CoreState {
    pub fn new(store_root: impl Into<PathBuf>) -> Self {
        Self {
            store_root: store_root.into(),
            users: BTreeMap::new(),
            logins: HashMap::new(),
            feeds: BTreeMap::new(),
            plugins: BTreeMap::new(),
            instances: BTreeMap::new(),
            index: MetadataIndex::new(),
            next_user: 1,
            next_feed: 1,
            next_instance: 1,
            pending: Vec::new(),
        }
    }

    /// Rebuilds state from a log replay.
    pub fn replay(store_root: impl Into<PathBuf>, entries: Vec<WalEntry>) -> Self {
        let mut s = Self::new(store_root);
        for e in entries {
            s.apply(e);
        }
        s
    }

    fn apply(&mut self, e: WalEntry) {
        match e {
            WalEntry::User(u) => {
                self.next_user = self.next_user.max(u.id + 1);
                self.logins.insert(u.login.clone(), u.id);
                self.users.insert(u.id, u);
            }
            WalEntry::Feed(f) => {
                self.next_feed = self.next_feed.max(f.id + 1);
                self.feeds.insert(f.id, f);
            }
            WalEntry::Plugin(p) => {
                self.plugins.insert((p.name.clone(), p.version.clone()), p);
            }
            WalEntry::Instance(i) => {
                self.next_instance = self.next_instance.max(i.id + 1);
                self.instances.insert(i.id, i);
            }
            WalEntry::Metadata(r) => {
                self.index.upsert(r);
            }
        }
    }

    /// Full snapshot, suitable for log compaction.
    pub fn snapshot(&self) -> Vec<WalEntry> {
        let mut out: Vec<WalEntry> = self.users.values().cloned().map(WalEntry::User).collect();
        out.extend(self.plugins.values().cloned().map(WalEntry::Plugin));
        out.extend(self.feeds.values().cloned().map(WalEntry::Feed));
        out.extend(self.instances.values().cloned().map(WalEntry::Instance));
        out.extend(self.index.records().cloned().map(WalEntry::Metadata));
        out
    }

    pub fn take_pending(&mut self) -> Vec<WalEntry> {
        std::mem::take(&mut self.pending)
    }

    pub fn store_root(&self) -> &Path {
        &self.store_root
    }

    pub fn index(&self) -> &MetadataIndex {
        &self.index
    }

    fn touch_feed(&mut self, id: FeedId) {
        self.pending.push(WalEntry::Feed(self.feeds[&id].clone()));
    }

    fn touch_instance(&mut self, id: InstanceId) {
        self.pending.push(WalEntry::Instance(self.instances[&id].clone()));
    }

    // ---- users ----

    pub fn add_user(&mut self, login: &str, secret: &str, role: Role) -> Result<UserInfo, CoreError> {
        let ok = !login.is_empty()
            && login.len() <= 64
            && login.chars().all(|c| c.is_ascii_alphanumeric() || "_.-@".contains(c));
        if !ok {
            return Err(CoreError::BadRequest(format!("bad login name `{login}`")));
        }
        if secret.is_empty() {
            return Err(CoreError::BadRequest("empty secret".into()));
        }
        if self.logins.contains_key(login) {
            return Err(CoreError::DuplicateLogin(login.into()));
        }
        let user = User {
            id: self.next_user,
            login: login.into(),
            secret_digest: User::digest_secret(login, secret),
            role,
        };
        self.next_user += 1;
        let info = UserInfo::from(&user);
        self.pending.push(WalEntry::User(user.clone()));
        self.apply(WalEntry::User(user));
        Ok(info)
    }

    /// Unknown login and wrong secret are indistinguishable to the caller.
    pub fn login(&self, login: &str, secret: &str) -> Result<UserInfo, CoreError> {
        let user = self.logins.get(login).and_then(|id| self.users.get(id));
        match user {
            Some(u) if u.verify(secret) => Ok(UserInfo::from(u)),
            _ => Err(CoreError::InvalidCredentials),
        }
    }

    pub fn user(&self, id: UserId) -> Result<UserInfo, CoreError> {
        self.users
            .get(&id)
            .map(UserInfo::from)
            .ok_or_else(|| CoreError::UnknownUser(id.to_string()))
    }

    pub fn user_by_login(&self, login: &str) -> Result<UserInfo, CoreError> {
        self.logins
            .get(login)
            .map(|id| UserInfo::from(&self.users[id]))
            .ok_or_else(|| CoreError::UnknownUser(login.into()))
    }

    pub fn users(&self) -> Vec<UserInfo> {
        self.users.values().map(UserInfo::from).collect()
    }

    // ---- feeds ----

    fn feed_for(&self, id: FeedId, user: UserId) -> Result<&Feed, CoreError> {
        let feed = self.feeds.get(&id).ok_or(CoreError::UnknownFeed(id))?;
        if !feed.can_access(user) {
            return Err(CoreError::NotAuthorized);
        }
        Ok(feed)
    }

    pub fn feed(&self, id: FeedId, user: UserId) -> Result<Feed, CoreError> {
        self.feed_for(id, user).cloned()
    }

    pub fn create_feed_from_pull(
        &mut self,
        owner: UserId,
        title: &str,
        receipt: &PullReceipt,
    ) -> Result<Feed, CoreError> {
        self.user(owner)?;
        let dir = Path::new(&receipt.study_dir);
        if !dir.is_dir() {
            return Err(CoreError::BadReceipt(format!(
                "study directory {} does not exist",
                receipt.study_dir
            )));
        }
        let root_dir = dir
            .canonicalize()
            .map_err(|e| CoreError::BadReceipt(e.to_string()))?
            .display()
            .to_string();
        for r in &receipt.metadata {
            if r.image_record_id != receipt.anon_study_uid || r.source != MetaSource::Dicom {
                return Err(CoreError::BadReceipt(
                    "metadata record does not belong to the pulled study".into(),
                ));
            }
        }
        if self
            .feeds
            .values()
            .any(|f| f.owner == owner && f.study_uid == receipt.anon_study_uid)
        {
            return Err(CoreError::DuplicateStudyFeed(receipt.anon_study_uid.clone()));
        }
        let title = if title.trim().is_empty() {
            format!("Study {}", receipt.anon_study_uid)
        } else {
            title.trim().to_string()
        };
        let feed = Feed {
            id: self.next_feed,
            owner,
            title,
            created: Utc::now(),
            tags: BTreeSet::new(),
            shared_with: BTreeSet::new(),
            comments: Vec::new(),
            bookmarked_by: BTreeSet::new(),
            root_dir,
            study_uid: receipt.anon_study_uid.clone(),
            annotations: Vec::new(),
        };
        self.next_feed += 1;
        for r in &receipt.metadata {
            let mut r = r.clone();
            r.id = 0;
            let stored = self.index.upsert(r).clone();
            self.pending.push(WalEntry::Metadata(stored));
        }
        self.feeds.insert(feed.id, feed.clone());
        self.touch_feed(feed.id);
        Ok(feed)
    }

    /// Feeds the user owns or has been shared, by id.
    pub fn list_feeds(&self, user: UserId) -> Vec<Feed> {
        self.feeds.values().filter(|f| f.can_access(user)).cloned().collect()
    }

    /// Any access holder may share; sharing is idempotent.
    pub fn share_feed(&mut self, id: FeedId, from: UserId, to: UserId) -> Result<Feed, CoreError> {
        self.feed_for(id, from)?;
        self.user(to)?;
        let feed = self.feeds.get_mut(&id).unwrap();
        if feed.owner != to && feed.shared_with.insert(to) {
            self.touch_feed(id);
        }
        Ok(self.feeds[&id].clone())
    }

    pub fn annotate_feed(&mut self, id: FeedId, user: UserId, action: AnnotateAction) -> Result<Feed, CoreError> {
        self.feed_for(id, user)?;
        let text_ok = |t: &str| !t.trim().is_empty() && t.len() <= 10_000;
        match &action {
            AnnotateAction::AddTag { text } | AnnotateAction::AddComment { text } if !text_ok(text) => {
                return Err(CoreError::BadRequest("annotation text must be non-empty".into()));
            }
            _ => {}
        }
        let now = Utc::now();
        let feed = self.feeds.get_mut(&id).unwrap();
        let at = feed.annotations.last().map_or(now, |a| a.at.max(now));
        match &action {
            AnnotateAction::AddTag { text } => {
                feed.tags.insert(text.trim().to_string());
            }
            AnnotateAction::AddComment { text } => feed.comments.push(Comment {
                author: user,
                at,
                text: text.clone(),
            }),
            AnnotateAction::Bookmark => {
                feed.bookmarked_by.insert(user);
            }
            AnnotateAction::Unbookmark => {
                feed.bookmarked_by.remove(&user);
            }
        }
        feed.annotations.push(Annotation {
            author: user,
            at,
            action,
        });
        self.touch_feed(id);
        Ok(self.feeds[&id].clone())
    }

    // ---- plugins ----

    pub fn register_plugin(&mut self, caller: UserId, d: PluginDescriptor) -> Result<PluginDescriptor, CoreError> {
        if self.user(caller)?.role != Role::Admin {
            return Err(CoreError::NotAuthorized);
        }
        validate_descriptor(&d)?;
        let key = (d.name.clone(), d.version.clone());
        if self.plugins.contains_key(&key) {
            return Err(CoreError::DuplicatePlugin(format!("{} {}", d.name, d.version)));
        }
        self.plugins.insert(key, d.clone());
        self.pending.push(WalEntry::Plugin(d.clone()));
        Ok(d)
    }

    pub fn plugins(&self) -> Vec<PluginDescriptor> {
        self.plugins.values().cloned().collect()
    }

    /// A specific version, or the most recently registered-sorting version.
    fn plugin(&self, name: &str, version: Option<&str>) -> Result<&PluginDescriptor, CoreError> {
        let found = match version {
            Some(v) => self.plugins.get(&(name.to_string(), v.to_string())),
            None => self
                .plugins
                .range((name.to_string(), String::new())..)
                .take_while(|((n, _), _)| n == name)
                .last()
                .map(|(_, d)| d),
        };
        found.ok_or_else(|| CoreError::UnknownPlugin(format!("{name} {}", version.unwrap_or("*"))))
    }

    // ---- instances ----

    fn output_dir_for(&self, feed: FeedId, inst: InstanceId) -> PathBuf {
        self.store_root
            .join("feeds")
            .join(feed.to_string())
            .join(inst.to_string())
            .join("output")
    }

    pub fn instance(&self, id: InstanceId, user: UserId) -> Result<PluginInstance, CoreError> {
        let inst = self.instances.get(&id).ok_or(CoreError::UnknownInstance(id))?;
        self.feed_for(inst.feed_id, user)?;
        Ok(inst.clone())
    }

    /// Instance lookup without an access check, for internal workers.
    pub fn instance_raw(&self, id: InstanceId) -> Option<&PluginInstance> {
        self.instances.get(&id)
    }

    pub fn create_plugin_instance(
        &mut self,
        feed_id: FeedId,
        parent: Option<InstanceId>,
        plugin: &str,
        version: Option<&str>,
        params: &BTreeMap<String, Value>,
        user: UserId,
    ) -> Result<PluginInstance, CoreError> {
        let feed = self.feed_for(feed_id, user)?;
        let (input_dir, depth) = match parent {
            None => (feed.root_dir.clone(), 1),
            Some(pid) => {
                let p = self
                    .instances
                    .get(&pid)
                    .filter(|p| p.feed_id == feed_id)
                    .ok_or(CoreError::UnknownInstance(pid))?;
                if p.status != InstanceStatus::Success {
                    return Err(CoreError::ParentNotReady(pid));
                }
                (p.output_dir.clone(), p.depth + 1)
            }
        };
        let d = self.plugin(plugin, version)?;
        let resolved = resolve_params(d, params)?;
        let command = render_command(d, &resolved);
        let id = self.next_instance;
        let now = Utc::now();
        let inst = PluginInstance {
            id,
            feed_id,
            plugin: d.name.clone(),
            version: d.version.clone(),
            parent,
            depth,
            params: resolved,
            command,
            status: InstanceStatus::Created,
            input_dir,
            output_dir: self.output_dir_for(feed_id, id).display().to_string(),
            step_id: None,
            created_by: user,
            history: vec![StatusStamp {
                status: InstanceStatus::Created,
                at: now,
            }],
            diagnostic: None,
            stderr: None,
            analysis_records: Vec::new(),
            analysis_warnings: 0,
        };
        self.next_instance += 1;
        self.instances.insert(id, inst.clone());
        self.touch_instance(id);
        Ok(inst)
    }

    /// The dispatcher request for a freshly created instance.
    pub fn step_request(&self, id: InstanceId) -> Result<StepRequest, CoreError> {
        let inst = self.instances.get(&id).ok_or(CoreError::UnknownInstance(id))?;
        let d = self.plugin(&inst.plugin, Some(&inst.version))?;
        Ok(StepRequest {
            instance_id: id.to_string(),
            input_dir: inst.input_dir.clone(),
            output_dir: inst.output_dir.clone(),
            command: inst.command.clone(),
            env: d.template.env.clone(),
            timeout_secs: d.template.timeout_secs,
            image: d.template.image.clone(),
            requirements: Requirements {
                labels: d.template.labels.clone(),
                input_bytes: 0,
            },
        })
    }

    pub fn set_step(&mut self, id: InstanceId, step_id: &str) -> Result<(), CoreError> {
        let inst = self.instances.get_mut(&id).ok_or(CoreError::UnknownInstance(id))?;
        inst.step_id = Some(step_id.to_string());
        self.touch_instance(id);
        Ok(())
    }

    /// Applies a status observed from the dispatcher. Backward or repeated
    /// statuses are ignored. Reaching SUCCESS runs structured analysis.
    pub fn update_status(
        &mut self,
        id: InstanceId,
        status: InstanceStatus,
        diagnostic: Option<String>,
        stderr: Option<String>,
    ) -> Result<StatusUpdate, CoreError> {
        let inst = self.instances.get_mut(&id).ok_or(CoreError::UnknownInstance(id))?;
        if !inst.status.can_transition(status) {
            return Ok(StatusUpdate::default());
        }
        inst.status = status;
        inst.history.push(StatusStamp { status, at: Utc::now() });
        if diagnostic.is_some() {
            inst.diagnostic = diagnostic;
        }
        if stderr.is_some() {
            inst.stderr = stderr;
        }
        let mut out = StatusUpdate {
            changed: true,
            ..Default::default()
        };
        if status == InstanceStatus::Success {
            let (records, warnings) = self.structured_analysis(id)?;
            out.analysis_records = records.len();
            out.analysis_warnings = warnings;
        }
        self.touch_instance(id);
        Ok(out)
    }

    /// Parses the instance's `results.tsv` into analysis records and
    /// registers them in one batch.
    pub fn structured_analysis(&mut self, id: InstanceId) -> Result<(Vec<MetadataRecord>, u32), CoreError> {
        let inst = self.instances.get(&id).ok_or(CoreError::UnknownInstance(id))?;
        if inst.status != InstanceStatus::Success {
            return Err(CoreError::BadRequest(format!("instance {id} has not succeeded")));
        }
        let study = self.feeds[&inst.feed_id].study_uid.clone();
        let (record, warnings) = analyze_output(Path::new(&inst.output_dir), &study, &id.to_string())
            .map_err(|e| CoreError::Io(e.to_string()))?;
        let stored: Vec<MetadataRecord> = record.into_iter().map(|r| self.index.upsert(r).clone()).collect();
        let inst = self.instances.get_mut(&id).unwrap();
        inst.analysis_records = stored.iter().map(|r| r.id).collect();
        inst.analysis_warnings = warnings;
        self.pending.extend(stored.iter().cloned().map(WalEntry::Metadata));
        self.touch_instance(id);
        Ok((stored, warnings))
    }

    /// Cancels an instance and every non-terminal descendant. Returns the
    /// dispatcher step ids that need a remote cancel.
    pub fn cancel_instance(
        &mut self,
        id: InstanceId,
        user: UserId,
    ) -> Result<Vec<(InstanceId, Option<String>)>, CoreError> {
        let inst = self.instances.get(&id).ok_or(CoreError::UnknownInstance(id))?;
        self.feed_for(inst.feed_id, user)?;
        let mut children: HashMap<InstanceId, Vec<InstanceId>> = HashMap::new();
        for i in self.instances.values().filter(|i| i.feed_id == inst.feed_id) {
            if let Some(p) = i.parent {
                children.entry(p).or_default().push(i.id);
            }
        }
        let mut stack = vec![id];
        let mut cancelled = Vec::new();
        let now = Utc::now();
        while let Some(cur) = stack.pop() {
            stack.extend(children.get(&cur).into_iter().flatten().copied());
            let i = self.instances.get_mut(&cur).unwrap();
            if i.status.can_transition(InstanceStatus::Cancelled) {
                i.status = InstanceStatus::Cancelled;
                i.history.push(StatusStamp {
                    status: InstanceStatus::Cancelled,
                    at: now,
                });
                cancelled.push((cur, i.step_id.clone()));
                self.touch_instance(cur);
            }
        }
        cancelled.sort();
        Ok(cancelled)
    }

    /// Instances not yet terminal, for the dispatch worker after a restart.
    pub fn live_instances(&self) -> Vec<PluginInstance> {
        self.instances
            .values()
            .filter(|i| !i.status.is_terminal())
            .cloned()
            .collect()
    }

    pub fn get_feed_tree(&self, feed_id: FeedId, user: UserId) -> Result<FeedTree, CoreError> {
        let feed = self.feed_for(feed_id, user)?;
        let mut children: BTreeMap<Option<InstanceId>, Vec<&PluginInstance>> = BTreeMap::new();
        for i in self.instances.values().filter(|i| i.feed_id == feed_id) {
            children.entry(i.parent).or_default().push(i);
        }
        let mut nodes = vec![TreeNode {
            id: None,
            parent: None,
            depth: 0,
            status: InstanceStatus::Success,
            plugin: None,
            version: None,
            params: BTreeMap::new(),
            output_dir: feed.root_dir.clone(),
            files: list_dir(Path::new(&feed.root_dir)),
            diagnostic: None,
            stderr: None,
        }];
        // Depth-first, children by id; the stack holds reversed siblings.
        let mut stack: Vec<&PluginInstance> = children.get(&None).into_iter().flatten().rev().copied().collect();
        while let Some(i) = stack.pop() {
            nodes.push(TreeNode {
                id: Some(i.id),
                parent: i.parent,
                depth: i.depth,
                status: i.status,
                plugin: Some(i.plugin.clone()),
                version: Some(i.version.clone()),
                params: i.params.clone(),
                output_dir: i.output_dir.clone(),
                files: list_dir(Path::new(&i.output_dir)),
                diagnostic: i.diagnostic.clone(),
                stderr: i.stderr.clone(),
            });
            stack.extend(children.get(&Some(i.id)).into_iter().flatten().rev().copied());
        }
        Ok(FeedTree { feed_id, nodes })
    }

    /// Conjunctive metadata query over the image records of feeds `user`
    /// can access.
    pub fn query_metadata(&self, user: UserId, pred: &Predicate) -> Result<Vec<MetadataRecord>, CoreError> {
        let visible: BTreeSet<&str> = self
            .feeds
            .values()
            .filter(|f| f.can_access(user))
            .map(|f| f.study_uid.as_str())
            .collect();
        Ok(self
            .index
            .query(pred, |img| visible.contains(img))?
            .into_iter()
            .cloned()
            .collect())
    }
}

/// Relative file paths under `dir`, sorted; empty if missing.
fn list_dir(dir: &Path) -> Vec<String> {
    let mut out: Vec<String> = walkdir::WalkDir::new(dir)
        .min_depth(1)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| {
            e.path()
                .strip_prefix(dir)
                .ok()
                .map(|p| p.to_string_lossy().replace('\\', "/"))
        })
        .collect();
    out.sort();
    out
}
