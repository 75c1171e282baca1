use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fluentcap::corpus::{parse_captions, BilingualExample, FluencyLabel, Language};
use fluentcap_annotate::eval::{EvalImage, EvalSet, SystemCaption};
use fluentcap_annotate::http::router;
use fluentcap_annotate::store::{ServiceConfig, EVENT_LOG, SNAPSHOT};
use fluentcap_annotate::{Service, ServiceError};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn items(n: usize) -> Vec<BilingualExample> {
    (0..n)
        .map(|i| BilingualExample {
            sentence_id: format!("s{i}"),
            image_id: format!("img{i}"),
            target: vec!["yi".into(), format!("t{i}")],
            target_pos: Some(vec!["M".into(), "N".into()]),
            source: Some(vec!["a".into(), format!("w{i}")]),
            source_pos: Some(vec!["DT".into(), "NN".into()]),
            label: None,
            fluency: None,
        })
        .collect()
}

fn eval_set(images: usize) -> EvalSet {
    EvalSet {
        images: (0..images)
            .map(|i| EvalImage {
                image_id: format!("img{i}"),
                description: Some(format!("picture {i}")),
                candidates: ["baseline", "weighted", "rerank"]
                    .iter()
                    .map(|s| SystemCaption {
                        system_id: s.to_string(),
                        tokens: vec![format!("c{i}"), s.chars().rev().collect()],
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn people(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn config(n: usize, dir: Option<std::path::PathBuf>) -> ServiceConfig {
    ServiceConfig {
        items: items(n),
        annotators: people("ann", 3),
        eval: eval_set(2),
        raters: people("rater", 3),
        seed: 5,
        data_dir: dir,
        snapshot_every: 4,
    }
}

fn app(n: usize) -> (Arc<Service>, Router) {
    let svc = Arc::new(Service::open(config(n, None)).unwrap());
    (svc.clone(), router(svc, None))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, "GET", uri, None).await;
    (
        s,
        if b.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&b).unwrap()
        },
    )
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = call(app, "POST", uri, Some(body)).await;
    (s, serde_json::from_str(&b).unwrap())
}

async fn grade(app: &Router, who: &str, grade: &str) -> Option<(StatusCode, Value)> {
    let (s, a) = get_json(app, &format!("/api/assignment?annotator={who}")).await;
    if s == StatusCode::NO_CONTENT {
        return None;
    }
    assert_eq!(s, StatusCode::OK);
    let sid = a["sentence_id"].as_str().unwrap().to_string();
    Some(
        post_json(
            app,
            "/api/grade",
            json!({"sentence_id": sid, "annotator": who, "grade": grade}),
        )
        .await,
    )
}

#[tokio::test]
async fn grading_round_trip_over_http() {
    let (_svc, app) = app(3);
    let (s, a) = get_json(&app, "/api/assignment?annotator=ann0").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(a["status"], "open");
    assert_eq!(a["source"], json!(["a", "w0"]));

    let body = json!({"sentence_id": "s0", "annotator": "ann0", "grade": "fluent"});
    let (s, first) = post_json(&app, "/api/grade", body.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let (s, retry) = post_json(&app, "/api/grade", body).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(first, retry);

    let (s, err) = post_json(
        &app,
        "/api/grade",
        json!({"sentence_id": "s0", "annotator": "ann0", "grade": "not_fluent"}),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(err["error"].as_str().unwrap().contains("already graded"));

    let (_, p) = get_json(&app, "/api/progress").await;
    assert_eq!(p["grading"]["grades"], 1);
}

#[tokio::test]
async fn unknown_annotator_and_bad_payloads() {
    let (_svc, app) = app(2);
    let (s, _) = get_json(&app, "/api/assignment?annotator=mallory").await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call(&app, "GET", "/api/assignment", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(
        &app,
        "POST",
        "/api/grade",
        Some(json!({"sentence_id": "s0", "annotator": "ann0", "grade": "maybe"})),
    )
    .await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn consensus_export_matches_rules() {
    let (_svc, app) = app(3);
    let plan = [
        ("ann0", "fluent"),
        ("ann0", "not_fluent"),
        ("ann0", "difficult"),
        ("ann1", "fluent"),
        ("ann1", "not_fluent"),
        ("ann1", "fluent"),
    ];
    for (who, g) in plan {
        let (s, _) = grade(&app, who, g).await.unwrap();
        assert_eq!(s, StatusCode::OK);
    }
    assert!(grade(&app, "ann2", "fluent").await.is_none());

    let (s, body) = call(&app, "GET", "/api/export/consensus", None).await;
    assert_eq!(s, StatusCode::OK);
    let recs = parse_captions(&body, "export".as_ref()).unwrap();
    let targets: Vec<_> = recs
        .iter()
        .filter(|r| r.language == Language::Target)
        .collect();
    let got: Vec<_> = targets
        .iter()
        .map(|r| (r.sentence_id.as_str(), r.label))
        .collect();
    assert_eq!(
        got,
        vec![
            ("s0", Some(FluencyLabel::Fluent)),
            ("s1", Some(FluencyLabel::NotFluent))
        ]
    );
    assert_eq!(recs.len(), 4);
    let (_, again) = call(&app, "GET", "/api/export/consensus", None).await;
    assert_eq!(body, again);
}

#[tokio::test]
async fn eval_flow_is_blind_and_reports_population_sd() {
    let (_svc, app) = app(1);
    let mut scores = [3u8, 5].into_iter();
    for (rater, image) in [("rater0", "img0"), ("rater1", "img1")] {
        let (s, item) = get_json(&app, &format!("/api/eval/item?rater={rater}")).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(item["image_id"], image);
        let text = item.to_string();
        for sys in ["baseline", "weighted", "rerank"] {
            assert!(!text.contains(sys), "{text}");
        }
        let v = scores.next().unwrap();
        let ratings: serde_json::Map<String, Value> = item["captions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| {
                (
                    c["handle"].as_str().unwrap().to_string(),
                    json!({"relevance": v, "fluency": 4}),
                )
            })
            .collect();
        let (s, ack) = post_json(
            &app,
            "/api/eval/rating",
            json!({"rater": rater, "image_id": image, "ratings": ratings}),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{ack}");
        assert_eq!(ack["rated"], 3);
    }
    let (_, item) = get_json(&app, "/api/eval/item?rater=rater2").await;
    assert_eq!(item["image_id"], "img0");

    let (s, rep) = get_json(&app, "/api/eval/report").await;
    assert_eq!(s, StatusCode::OK);
    let rep = rep.as_array().unwrap();
    assert_eq!(rep.len(), 3);
    for r in rep {
        assert_eq!(r["ratings"], 2);
        assert_eq!(r["relevance"]["mean"], 4.0);
        assert_eq!(r["relevance"]["sd"], 1.0);
        assert_eq!(r["fluency"]["sd"], 0.0);
    }
}

#[tokio::test]
async fn out_of_range_rating_is_rejected() {
    let (_svc, app) = app(1);
    let (_, item) = get_json(&app, "/api/eval/item?rater=rater0").await;
    let ratings: serde_json::Map<String, Value> = item["captions"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| {
            (
                c["handle"].as_str().unwrap().to_string(),
                json!({"relevance": 6, "fluency": 1}),
            )
        })
        .collect();
    let (s, err) = post_json(
        &app,
        "/api/eval/rating",
        json!({"rater": "rater0", "image_id": "img0", "ratings": ratings}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(err["error"].as_str().unwrap().contains("relevance 6"));
}

#[tokio::test]
async fn static_route_serves_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>grading</h1>").unwrap();
    let svc = Arc::new(Service::open(config(1, None)).unwrap());
    let app = router(svc, Some(dir.path().to_path_buf()));
    let (s, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, "<h1>grading</h1>");
    let (s, _) = get_json(&app, "/api/progress").await;
    assert_eq!(s, StatusCode::OK);
}

#[test]
fn state_survives_restart_via_log_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    let before = {
        let svc = Service::open(config(4, Some(path.clone()))).unwrap();
        for who in ["ann0", "ann1", "ann0"] {
            let a = svc.next_assignment(who).unwrap().unwrap();
            svc.submit_grade(&fluentcap_annotate::grading::GradeSubmission {
                sentence_id: a.sentence_id,
                annotator: who.into(),
                grade: fluentcap_annotate::grading::Grade::NotFluent,
            })
            .unwrap();
        }
        svc.next_eval_item("rater0").unwrap().unwrap();
        svc.next_assignment("ann2").unwrap().unwrap();
        svc.progress()
    };
    assert!(path.join(SNAPSHOT).exists());
    let log = std::fs::read_to_string(path.join(EVENT_LOG)).unwrap();
    assert_eq!(log.lines().count(), 8);

    let svc = Service::open(config(4, Some(path.clone()))).unwrap();
    assert_eq!(svc.progress(), before);
    let open = svc.next_assignment("ann2").unwrap().unwrap();
    assert_eq!(
        open.status,
        fluentcap_annotate::grading::AssignmentStatus::Open
    );
    assert_eq!(svc.progress(), before);
}

#[test]
fn torn_final_log_line_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    {
        let svc = Service::open(config(2, Some(path.clone()))).unwrap();
        svc.next_assignment("ann0").unwrap().unwrap();
    }
    let log = path.join(EVENT_LOG);
    let mut text = std::fs::read_to_string(&log).unwrap();
    text.push_str("{\"seq\":2,\"at\":1,\"ev");
    std::fs::write(&log, text).unwrap();
    let svc = Service::open(config(2, Some(path.clone()))).unwrap();
    assert_eq!(svc.progress().grading.assigned, 1);
    svc.next_assignment("ann1").unwrap().unwrap();
    let again = Service::open(config(2, Some(path))).unwrap();
    assert_eq!(again.progress().grading.assigned, 2);
}

#[test]
fn corrupt_log_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(EVENT_LOG), "not json\n").unwrap();
    let err = Service::open(config(1, Some(dir.path().to_path_buf())))
        .err()
        .unwrap();
    assert!(
        matches!(err, ServiceError::Corrupt { line: 1, .. }),
        "{err}"
    );
}

#[test]
fn concurrent_annotators_never_exceed_two_grades() {
    let n = 40;
    let svc = Arc::new(
        Service::open(ServiceConfig {
            annotators: people("ann", 8),
            ..config(n, None)
        })
        .unwrap(),
    );
    std::thread::scope(|s| {
        for k in 0..8 {
            let svc = svc.clone();
            s.spawn(move || {
                let who = format!("ann{k}");
                while let Some(a) = svc.next_assignment(&who).unwrap() {
                    svc.submit_grade(&fluentcap_annotate::grading::GradeSubmission {
                        sentence_id: a.sentence_id,
                        annotator: who.clone(),
                        grade: fluentcap_annotate::grading::Grade::Fluent,
                    })
                    .unwrap();
                }
            });
        }
    });
    let snap = svc.snapshot();
    assert_eq!(snap.grading.max_grades_per_sentence(), 2);
    let p = svc.progress();
    assert_eq!(p.grading.graded_twice, n);
    assert_eq!(p.grading.consensus, n);
}
