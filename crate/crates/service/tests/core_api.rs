//! Core API against a full local deployment.

mod common;

use std::collections::BTreeMap;
use std::time::Duration;

use chips_client::wire::codes;
use chips_client::CoreClient;
use chips_core::pacs::QuerySpec;
use chips_core::workflow::{AnnotateAction, InstanceStatus, PluginDescriptor, Role};

use common::*;

fn plugin(name: &str, command: serde_json::Value, params: serde_json::Value) -> PluginDescriptor {
    serde_json::from_value(serde_json::json!({
        "name": name,
        "version": "1.0",
        "params": params,
        "template": {"command": command, "timeout_secs": 60}
    }))
    .unwrap()
}

async fn admin(cluster: &Cluster) -> CoreClient {
    let mut c = CoreClient::new(&cluster.core.url);
    c.login(ADMIN.0, ADMIN.1).await.unwrap();
    c
}

async fn wait_status(c: &CoreClient, id: u64, want: InstanceStatus) -> InstanceStatus {
    let hit = poll_until(Duration::from_secs(30), || async {
        c.instance(id).await.ok().map(|i| i.status).filter(|s| *s == want)
    })
    .await;
    match hit {
        Some(s) => s,
        None => c.instance(id).await.unwrap().status,
    }
}

#[tokio::test]
async fn login_and_roles() {
    let cluster = Cluster::start(1);
    let anon = CoreClient::new(&cluster.core.url);
    let e = anon.feeds().await.unwrap_err();
    assert!(e.is(codes::UNAUTHORIZED), "{e}");
    let mut bad = CoreClient::new(&cluster.core.url);
    let e = bad.login(ADMIN.0, "nope").await.unwrap_err();
    assert!(e.is(codes::UNAUTHORIZED), "{e}");
    let forged = CoreClient::new(&cluster.core.url).with_token("1.99999999999.00");
    assert!(forged.feeds().await.unwrap_err().is(codes::UNAUTHORIZED));

    let a = admin(&cluster).await;
    let u = a.add_user("rita", "pw", Role::Researcher).await.unwrap();
    assert_eq!(u.role, Role::Researcher);
    let e = a.add_user("rita", "pw2", Role::Clinician).await.unwrap_err();
    assert!(e.is(codes::CONFLICT), "{e}");

    let mut rita = CoreClient::new(&cluster.core.url);
    rita.login("rita", "pw").await.unwrap();
    let e = rita.add_user("eve", "pw", Role::Admin).await.unwrap_err();
    assert!(e.is(codes::FORBIDDEN), "{e}");
    let e = rita
        .register_plugin(&plugin("x", serde_json::json!(["true"]), serde_json::json!([])))
        .await
        .unwrap_err();
    assert!(e.is(codes::FORBIDDEN), "{e}");
}

#[tokio::test]
async fn feeds_are_private_until_shared() {
    let cluster = Cluster::start(1);
    let a = admin(&cluster).await;
    a.add_user("bob", "pw", Role::Clinician).await.unwrap();
    let mut bob = CoreClient::new(&cluster.core.url);
    bob.login("bob", "pw").await.unwrap();

    let uid = &cluster.corpus.studies()[0].study_uid;
    let receipt = a.pacs_pull(uid).await.unwrap();
    let e = a.pacs_pull(uid).await.unwrap_err();
    assert!(e.is(codes::DUPLICATE_PULL), "{e}");

    let e = bob.create_feed("stolen", &receipt).await.unwrap_err();
    assert!(e.is(codes::BAD_REQUEST), "{e}");
    let feed = a.create_feed("mine", &receipt).await.unwrap();
    let e = a.create_feed("again", &receipt).await.unwrap_err();
    assert!(e.is(codes::DUPLICATE_STUDY_FEED), "{e}");

    assert!(bob.feeds().await.unwrap().is_empty());
    assert!(bob.feed(feed.id).await.is_err());
    assert!(bob.query_metadata("PatientSex = F").await.unwrap().is_empty());
    assert!(
        !a.query_metadata("Modality = CT").await.unwrap().is_empty()
            || !a.query_metadata("Modality = MR").await.unwrap().is_empty()
    );

    a.share(feed.id, "bob").await.unwrap();
    assert_eq!(bob.feeds().await.unwrap().len(), 1);
    let f = bob
        .annotate(
            feed.id,
            &AnnotateAction::AddTag {
                text: "reviewed".into(),
            },
        )
        .await
        .unwrap();
    assert!(f.tags.contains("reviewed"));
    let f = bob
        .annotate(
            feed.id,
            &AnnotateAction::AddComment {
                text: "looks fine".into(),
            },
        )
        .await
        .unwrap();
    assert_eq!(f.comments.len(), 1);
    assert_eq!(a.tree(feed.id).await.unwrap().nodes.len(), 1);
}

#[tokio::test]
async fn query_errors_are_reported() {
    let cluster = Cluster::start(1);
    let a = admin(&cluster).await;
    let e = a.query_metadata("Age ~ 3").await.unwrap_err();
    assert!(e.is(codes::BAD_COMPARATOR), "{e}");
    let e = a
        .pacs_query(&QuerySpec::study().with("PatientName", "*"))
        .await
        .unwrap_err();
    assert!(e.is(codes::BAD_FILTER_KEYWORD), "{e}");
}

#[tokio::test]
async fn plugin_parameters_are_validated() {
    let cluster = Cluster::start(1);
    let a = admin(&cluster).await;
    let p = plugin(
        "thresh",
        serde_json::json!(["sh", "-c", "echo {level} > {output}/level"]),
        serde_json::json!([{"name": "level", "type": "int", "required": true}]),
    );
    a.register_plugin(&p).await.unwrap();
    let e = a.register_plugin(&p).await.unwrap_err();
    assert!(e.is(codes::DUPLICATE_PLUGIN), "{e}");
    let bad = plugin("broken", serde_json::json!([]), serde_json::json!([]));
    assert!(a.register_plugin(&bad).await.unwrap_err().is(codes::SCHEMA_INVALID));

    let receipt = a.pacs_pull(&cluster.corpus.studies()[1].study_uid).await.unwrap();
    let feed = a.create_feed("params", &receipt).await.unwrap();
    let e = a
        .create_instance(feed.id, None, "thresh", None, BTreeMap::new())
        .await
        .unwrap_err();
    assert!(e.is(codes::PARAM_VALIDATION), "{e}");
    let e = a
        .create_instance(
            feed.id,
            None,
            "thresh",
            None,
            BTreeMap::from([(s("level"), serde_json::json!("high"))]),
        )
        .await
        .unwrap_err();
    assert!(e.is(codes::PARAM_VALIDATION), "{e}");

    let ok = a
        .create_instance(
            feed.id,
            None,
            "thresh",
            None,
            BTreeMap::from([(s("level"), serde_json::json!("7"))]),
        )
        .await
        .unwrap();
    assert_eq!(
        wait_status(&a, ok.id, InstanceStatus::Success).await,
        InstanceStatus::Success
    );
    let child = a
        .create_instance(
            feed.id,
            Some(ok.id),
            "thresh",
            None,
            BTreeMap::from([(s("level"), serde_json::json!(8))]),
        )
        .await
        .unwrap();
    assert_eq!(child.depth, 2);
    assert_eq!(
        wait_status(&a, child.id, InstanceStatus::Success).await,
        InstanceStatus::Success
    );
    assert_eq!(a.tree(feed.id).await.unwrap().nodes.len(), 3);
}

#[tokio::test]
async fn cancel_stops_remote_job() {
    let cluster = Cluster::start(1);
    let a = admin(&cluster).await;
    a.register_plugin(&plugin(
        "nap",
        serde_json::json!(["sleep", "30"]),
        serde_json::json!([]),
    ))
    .await
    .unwrap();
    let receipt = a.pacs_pull(&cluster.corpus.studies()[2].study_uid).await.unwrap();
    let feed = a.create_feed("nap", &receipt).await.unwrap();
    let parent = a
        .create_instance(feed.id, None, "nap", None, BTreeMap::new())
        .await
        .unwrap();
    let e = a
        .create_instance(feed.id, Some(parent.id), "nap", None, BTreeMap::new())
        .await
        .unwrap_err();
    assert!(e.is(codes::PARENT_NOT_READY), "{e}");
    assert_eq!(
        wait_status(&a, parent.id, InstanceStatus::Running).await,
        InstanceStatus::Running
    );

    let r = a.cancel_instance(parent.id).await.unwrap();
    assert_eq!(r.cancelled, [parent.id]);
    assert_eq!(a.instance(parent.id).await.unwrap().status, InstanceStatus::Cancelled);
    let live = poll_until(Duration::from_secs(10), || async {
        let jobs = chips_client::JobClient::new(&cluster.jobmgrs[0].url)
            .list(&[
                chips_core::jobs::JobState::Scheduled,
                chips_core::jobs::JobState::Started,
            ])
            .await
            .ok()?;
        jobs.is_empty().then_some(())
    })
    .await;
    assert!(live.is_some(), "remote job still running after cancel");
}

#[tokio::test]
async fn state_survives_restart() {
    let mut cluster = Cluster::start(1);
    let a = admin(&cluster).await;
    a.add_user("carol", "pw", Role::Researcher).await.unwrap();
    a.register_plugin(&plugin("noop", serde_json::json!(["true"]), serde_json::json!([])))
        .await
        .unwrap();
    let receipt = a.pacs_pull(&cluster.corpus.studies()[0].study_uid).await.unwrap();
    let feed = a.create_feed("kept", &receipt).await.unwrap();
    a.annotate(feed.id, &AnnotateAction::Bookmark).await.unwrap();
    let inst = a
        .create_instance(feed.id, None, "noop", None, BTreeMap::new())
        .await
        .unwrap();
    assert_eq!(
        wait_status(&a, inst.id, InstanceStatus::Success).await,
        InstanceStatus::Success
    );
    let before =
        a.query_metadata("Modality = MR").await.unwrap().len() + a.query_metadata("Modality = CT").await.unwrap().len();

    cluster.restart_core();
    let old_token = a.token().unwrap().to_string();
    let a = CoreClient::new(&cluster.core.url).with_token(old_token);
    let f = a.feed(feed.id).await.unwrap();
    assert_eq!(f.title, "kept");
    assert_eq!(f.bookmarked_by.len(), 1);
    assert_eq!(a.instance(inst.id).await.unwrap().status, InstanceStatus::Success);
    assert!(a.plugins().await.unwrap().iter().any(|p| p.name == "noop"));
    let after =
        a.query_metadata("Modality = MR").await.unwrap().len() + a.query_metadata("Modality = CT").await.unwrap().len();
    assert_eq!(before, after);
    let mut carol = CoreClient::new(&cluster.core.url);
    carol.login("carol", "pw").await.unwrap();
}
