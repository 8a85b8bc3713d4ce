use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;

use chips_core::dicom::{MetaSource, MetaValue, MetadataRecord};
use chips_core::index::Predicate;
use chips_core::pacs::PullReceipt;
use chips_core::workflow::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    state: CoreState,
    admin: UserId,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut state = CoreState::new(root.join("store"));
    let admin = state.add_user("admin", "pw", Role::Admin).unwrap().id;
    state
        .register_plugin(
            admin,
            serde_json::from_value(json!({
                "name": "imgstats", "version": "1.0",
                "params": [{"name": "note", "type": "text"}],
                "template": {"command": ["imgstats", "{input}", "{output}"]}
            }))
            .unwrap(),
        )
        .unwrap();
    Fixture {
        _dir: dir,
        root,
        state,
        admin,
    }
}

fn receipt(f: &Fixture, study: &str, sexes: &[&str]) -> PullReceipt {
    let dir = f.root.join("pulls").join(study);
    fs::create_dir_all(dir.join("s1")).unwrap();
    fs::write(dir.join("s1/1.dcm"), b"x").unwrap();
    let metadata = sexes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut r = MetadataRecord::new(study, MetaSource::Dicom, format!("{study}.{i}"));
            r.entries.insert("PatientSex".into(), MetaValue::Text(s.to_string()));
            r
        })
        .collect();
    PullReceipt {
        anon_study_uid: study.into(),
        study_dir: dir.display().to_string(),
        instances_written: 1,
        series_count: sexes.len(),
        complete: true,
        failures: vec![],
        anonymization: vec![],
        metadata,
    }
}

#[test]
fn feed_from_pull_registers_series_records() {
    let mut f = fixture();
    let r = receipt(&f, "9.9.1", &["F", "F"]);
    let feed = f.state.create_feed_from_pull(f.admin, "t", &r).unwrap();
    let tree = f.state.get_feed_tree(feed.id, f.admin).unwrap();
    assert_eq!(tree.nodes.len(), 1);
    assert_eq!(tree.nodes[0].files, vec!["s1/1.dcm"]);
    let hits = f
        .state
        .query_metadata(f.admin, &"PatientSex = F".parse().unwrap())
        .unwrap();
    assert_eq!(hits.len(), 2);
    assert!(matches!(
        f.state.create_feed_from_pull(f.admin, "again", &r),
        Err(CoreError::DuplicateStudyFeed(_))
    ));
    let mut missing = r.clone();
    missing.study_dir = f.root.join("nope").display().to_string();
    missing.anon_study_uid = "9.9.2".into();
    missing.metadata.clear();
    assert!(matches!(
        f.state.create_feed_from_pull(f.admin, "x", &missing),
        Err(CoreError::BadReceipt(_))
    ));
}

/// Access is exactly owner-or-shared, and any holder may re-share.
#[test]
fn access_matrix_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for round in 0..20 {
        let mut f = fixture();
        let users: Vec<UserId> = (0..5)
            .map(|i| f.state.add_user(&format!("u{i}"), "pw", Role::Researcher).unwrap().id)
            .collect();
        let mut feeds = Vec::new();
        let mut expected: HashMap<FeedId, BTreeSet<UserId>> = HashMap::new();
        for k in 0..4 {
            let owner = users[rng.random_range(0..users.len())];
            let r = receipt(&f, &format!("9.9.{round}{k}"), &["M"]);
            let feed = f.state.create_feed_from_pull(owner, "t", &r).unwrap();
            expected.insert(feed.id, [owner].into());
            feeds.push(feed.id);
        }
        for _ in 0..30 {
            let feed = feeds[rng.random_range(0..feeds.len())];
            let from = users[rng.random_range(0..users.len())];
            let to = users[rng.random_range(0..users.len())];
            let allowed = expected[&feed].contains(&from);
            let res = f.state.share_feed(feed, from, to);
            assert_eq!(res.is_ok(), allowed);
            if allowed {
                expected.get_mut(&feed).unwrap().insert(to);
            } else {
                assert_eq!(res.unwrap_err(), CoreError::NotAuthorized);
            }
        }
        for &u in &users {
            let seen: BTreeSet<FeedId> = f.state.list_feeds(u).iter().map(|f| f.id).collect();
            let want: BTreeSet<FeedId> = feeds.iter().copied().filter(|id| expected[id].contains(&u)).collect();
            assert_eq!(seen, want);
            for &id in &feeds {
                assert_eq!(f.state.get_feed_tree(id, u).is_ok(), want.contains(&id));
            }
        }
    }
}

#[test]
fn annotations() {
    let mut f = fixture();
    let b = f.state.add_user("b", "pw", Role::Clinician).unwrap().id;
    let feed = f
        .state
        .create_feed_from_pull(f.admin, "t", &receipt(&f, "9.9.5", &["M"]))
        .unwrap();
    f.state.share_feed(feed.id, f.admin, b).unwrap();
    for _ in 0..2 {
        f.state
            .annotate_feed(feed.id, b, AnnotateAction::AddTag { text: "fetal".into() })
            .unwrap();
    }
    f.state
        .annotate_feed(feed.id, f.admin, AnnotateAction::AddComment { text: "one".into() })
        .unwrap();
    let out = f
        .state
        .annotate_feed(feed.id, b, AnnotateAction::AddComment { text: "two".into() })
        .unwrap();
    assert_eq!(out.tags, BTreeSet::from(["fetal".to_string()]));
    assert_eq!(out.comments.len(), 2);
    assert!(out.comments[0].at <= out.comments[1].at);
    let out = f.state.annotate_feed(feed.id, b, AnnotateAction::Bookmark).unwrap();
    assert!(out.bookmarked_by.contains(&b));
    let stranger = f.state.add_user("c", "pw", Role::Clinician).unwrap().id;
    assert_eq!(
        f.state
            .annotate_feed(feed.id, stranger, AnnotateAction::Bookmark)
            .unwrap_err(),
        CoreError::NotAuthorized
    );
}

fn run_to(state: &mut CoreState, id: InstanceId, status: InstanceStatus) {
    state.update_status(id, InstanceStatus::Dispatched, None, None).unwrap();
    state.update_status(id, InstanceStatus::Running, None, None).unwrap();
    state.update_status(id, status, None, None).unwrap();
}

#[test]
fn tree_matches_parent_pointer_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut f = fixture();
    let feed = f
        .state
        .create_feed_from_pull(f.admin, "t", &receipt(&f, "9.9.7", &["M"]))
        .unwrap();
    let mut succeeded: Vec<Option<InstanceId>> = vec![None];
    let mut all = Vec::new();
    for _ in 0..40 {
        let parent = succeeded[rng.random_range(0..succeeded.len())];
        let inst = f
            .state
            .create_plugin_instance(feed.id, parent, "imgstats", None, &BTreeMap::new(), f.admin)
            .unwrap();
        all.push(inst.id);
        match rng.random_range(0..3) {
            0 => {
                run_to(&mut f.state, inst.id, InstanceStatus::Success);
                succeeded.push(Some(inst.id));
            }
            1 => {
                f.state.cancel_instance(inst.id, f.admin).unwrap();
            }
            _ => {}
        }
    }
    let tree = f.state.get_feed_tree(feed.id, f.admin).unwrap();
    assert_eq!(tree.nodes.len(), all.len() + 1);
    // oracle: rebuild parent-before-child order from the pointer table
    let mut kids: BTreeMap<Option<InstanceId>, Vec<InstanceId>> = BTreeMap::new();
    for &id in &all {
        let i = f.state.instance(id, f.admin).unwrap();
        kids.entry(i.parent).or_default().push(id);
    }
    fn walk(
        k: &BTreeMap<Option<InstanceId>, Vec<InstanceId>>,
        at: Option<InstanceId>,
        d: u32,
        out: &mut Vec<(Option<InstanceId>, u32)>,
    ) {
        out.push((at, d));
        let mut ch = k.get(&at).cloned().unwrap_or_default();
        ch.sort();
        for c in ch {
            walk(k, Some(c), d + 1, out);
        }
    }
    let mut want = Vec::new();
    walk(&kids, None, 0, &mut want);
    let got: Vec<(Option<InstanceId>, u32)> = tree.nodes.iter().map(|n| (n.id, n.depth)).collect();
    assert_eq!(got, want);
    for n in &tree.nodes[1..] {
        let i = f.state.instance(n.id.unwrap(), f.admin).unwrap();
        let parent_out = match i.parent {
            None => feed.root_dir.clone(),
            Some(p) => f.state.instance(p, f.admin).unwrap().output_dir,
        };
        assert_eq!(i.input_dir, parent_out);
    }
    assert_eq!(f.state.get_feed_tree(feed.id, f.admin).unwrap(), tree);
}

#[test]
fn parent_must_have_succeeded() {
    let mut f = fixture();
    let feed = f
        .state
        .create_feed_from_pull(f.admin, "t", &receipt(&f, "9.9.8", &["M"]))
        .unwrap();
    let a = f
        .state
        .create_plugin_instance(feed.id, None, "imgstats", None, &BTreeMap::new(), f.admin)
        .unwrap();
    f.state
        .update_status(a.id, InstanceStatus::Running, None, None)
        .unwrap();
    assert_eq!(
        f.state
            .create_plugin_instance(feed.id, Some(a.id), "imgstats", None, &BTreeMap::new(), f.admin)
            .unwrap_err(),
        CoreError::ParentNotReady(a.id)
    );
    let bad = BTreeMap::from([("note".to_string(), json!(3))]);
    assert!(matches!(
        f.state
            .create_plugin_instance(feed.id, None, "imgstats", None, &bad, f.admin),
        Err(CoreError::ParamValidation { .. })
    ));
}

#[test]
fn cancel_cascades_and_status_is_monotone() {
    let mut f = fixture();
    let feed = f
        .state
        .create_feed_from_pull(f.admin, "t", &receipt(&f, "9.9.9", &["M"]))
        .unwrap();
    let none = BTreeMap::new();
    let a = f
        .state
        .create_plugin_instance(feed.id, None, "imgstats", None, &none, f.admin)
        .unwrap();
    run_to(&mut f.state, a.id, InstanceStatus::Success);
    let b = f
        .state
        .create_plugin_instance(feed.id, Some(a.id), "imgstats", None, &none, f.admin)
        .unwrap();
    run_to(&mut f.state, b.id, InstanceStatus::Success);
    let c = f
        .state
        .create_plugin_instance(feed.id, Some(b.id), "imgstats", None, &none, f.admin)
        .unwrap();
    f.state.set_step(c.id, "step-c").unwrap();
    f.state
        .update_status(c.id, InstanceStatus::Dispatched, None, None)
        .unwrap();
    let cancelled = f.state.cancel_instance(a.id, f.admin).unwrap();
    assert_eq!(cancelled, vec![(c.id, Some("step-c".to_string()))]);
    // terminal states stay put
    let u = f
        .state
        .update_status(c.id, InstanceStatus::Success, None, None)
        .unwrap();
    assert!(!u.changed);
    let u = f
        .state
        .update_status(a.id, InstanceStatus::Running, None, None)
        .unwrap();
    assert!(!u.changed);
    for id in [a.id, b.id, c.id] {
        let i = f.state.instance(id, f.admin).unwrap();
        for w in i.history.windows(2) {
            assert!(w[0].status.can_transition(w[1].status));
        }
    }
}

#[test]
fn structured_analysis_joins_on_study() {
    let mut f = fixture();
    let feed = f
        .state
        .create_feed_from_pull(f.admin, "t", &receipt(&f, "9.9.10", &["F"]))
        .unwrap();
    let a = f
        .state
        .create_plugin_instance(feed.id, None, "imgstats", None, &BTreeMap::new(), f.admin)
        .unwrap();
    fs::create_dir_all(&a.output_dir).unwrap();
    fs::write(
        std::path::Path::new(&a.output_dir).join("results.tsv"),
        "LeftHippocampus\t4100.5\nbad\nRightHippocampus\t4250.0\n",
    )
    .unwrap();
    run_to(&mut f.state, a.id, InstanceStatus::Success);
    let i = f.state.instance(a.id, f.admin).unwrap();
    assert_eq!(i.analysis_records.len(), 1);
    assert_eq!(i.analysis_warnings, 1);
    let pred: Predicate = "PatientSex = F AND LeftHippocampus > 4000".parse().unwrap();
    let hits = f.state.query_metadata(f.admin, &pred).unwrap();
    assert_eq!(hits.len(), 2);
    let other = f.state.add_user("o", "pw", Role::Researcher).unwrap().id;
    assert!(f.state.query_metadata(other, &pred).unwrap().is_empty());
}

#[test]
fn replay_restores_state() {
    let mut f = fixture();
    let feed = f
        .state
        .create_feed_from_pull(f.admin, "t", &receipt(&f, "9.9.11", &["F", "M"]))
        .unwrap();
    let a = f
        .state
        .create_plugin_instance(feed.id, None, "imgstats", None, &BTreeMap::new(), f.admin)
        .unwrap();
    f.state
        .annotate_feed(feed.id, f.admin, AnnotateAction::AddTag { text: "x".into() })
        .unwrap();
    let log = f.state.take_pending();
    let replayed = CoreState::replay(f.state.store_root().to_path_buf(), log);
    assert_eq!(
        replayed.feed(feed.id, f.admin).unwrap(),
        f.state.feed(feed.id, f.admin).unwrap()
    );
    assert_eq!(replayed.instance(a.id, f.admin).unwrap(), a);
    assert_eq!(replayed.index().len(), 2);
    assert_eq!(replayed.login("admin", "pw").unwrap().id, f.admin);
    assert_eq!(replayed.login("admin", "bad"), Err(CoreError::InvalidCredentials));
    assert_eq!(replayed.login("nobody", "pw"), Err(CoreError::InvalidCredentials));
    assert_eq!(replayed.plugins().len(), 1);
}
