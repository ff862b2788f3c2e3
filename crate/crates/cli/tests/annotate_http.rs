use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use minchange::annotate::{AnnotationItem, AnnotationSession};
use minchange::model::{AttributeCategory, Feasibility};
use minchange_cli::server::{router, NextReply, Progress, ServerConfig, TOKEN_HEADER};
use serde_json::{json, Value};
use tower::ServiceExt;

fn items(n: usize) -> Vec<AnnotationItem> {
    (0..n)
        .map(|i| AnnotationItem {
            image_id: format!("img{i:02}"),
            prompt: format!("a photo of a cat, prompt {i}"),
            category: AttributeCategory::ALL[i % 3],
            feasibility: Feasibility::ALL[i % 2],
        })
        .collect()
}

fn app(n: usize) -> Router {
    app_with(n, None, BTreeMap::new(), None)
}

fn app_with(n: usize, persist: Option<PathBuf>, images: BTreeMap<String, PathBuf>, token: Option<&str>) -> Router {
    let session = AnnotationSession::new(items(n), 3).unwrap();
    router(ServerConfig { session, persist, images, token: token.map(String::from) })
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn next(app: &Router, annotator: &str) -> NextReply {
    let (s, body) = call(app, Request::get(format!("/items/next?annotator={annotator}")).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

fn rating(annotator: &str, image: &str, correct: bool, nat: i64) -> Request<Body> {
    let body = json!({ "annotator_id": annotator, "image_id": image, "feasibility_correct": correct, "naturalness": nat, "timestamp": 7 });
    Request::post("/ratings").header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

async fn export(app: &Router) -> String {
    let (s, body) = call(app, Request::get("/export").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    String::from_utf8(body).unwrap()
}

#[tokio::test]
async fn ten_items_round_trip_per_annotator() {
    let app = app(10);
    for annotator in ["ann", "bob"] {
        let mut seen = BTreeSet::new();
        for k in 0..10 {
            let r = next(&app, annotator).await;
            assert!(!r.done);
            assert_eq!(r.progress, Progress { rated: k, total: 10 });
            let id = r.item.unwrap().image_id;
            assert!(seen.insert(id.clone()), "{id} served twice");
            let (s, _) = call(&app, rating(annotator, &id, k % 2 == 0, (k % 5 + 1) as i64)).await;
            assert_eq!(s, StatusCode::OK);
        }
        let done = next(&app, annotator).await;
        assert!(done.done && done.item.is_none());
        assert_eq!(seen.len(), 10);
    }
    let csv = export(&app).await;
    assert_eq!(csv.lines().count(), 21);
    assert!(csv.starts_with("annotator_id,image_id,category,feasibility,feasibility_correct,naturalness,timestamp"));
}

#[tokio::test]
async fn annotators_get_stable_but_different_orders() {
    let app = app(10);
    let a1 = next(&app, "ann").await.item.unwrap();
    let a2 = next(&app, "ann").await.item.unwrap();
    assert_eq!(a1, a2);
    let mut firsts = BTreeSet::new();
    for who in ["a", "b", "c", "d", "e", "f"] {
        firsts.insert(next(&app, who).await.item.unwrap().image_id);
    }
    assert!(firsts.len() > 1);
}

#[tokio::test]
async fn invalid_naturalness_is_rejected() {
    let app = app(3);
    for nat in [0, 6, -1, 300] {
        let (s, body) = call(&app, rating("ann", "img00", true, nat)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "naturalness {nat}");
        let v: Value = serde_json::from_slice(&body).unwrap();
        assert!(v["error"].as_str().unwrap().contains("naturalness"));
    }
    assert_eq!(export(&app).await.lines().count(), 1);
}

#[tokio::test]
async fn unknown_item_and_bad_requests() {
    let app = app(3);
    let (s, _) = call(&app, rating("ann", "nope", true, 3)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Request::get("/items/next").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Request::get("/items/next?annotator=%20").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let bad = Request::post("/ratings").header("content-type", "application/json").body(Body::from("{\"annotator_id\":\"a\"}")).unwrap();
    assert_eq!(call(&app, bad).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn second_submission_overwrites_first() {
    let app = app(3);
    assert_eq!(call(&app, rating("ann", "img01", true, 2)).await.0, StatusCode::OK);
    assert_eq!(call(&app, rating("ann", "img01", false, 5)).await.0, StatusCode::OK);
    let csv = export(&app).await;
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows, vec!["ann,img01,color,infeasible,false,5,7"]);
    assert_eq!(next(&app, "ann").await.progress.rated, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_annotators_lose_nothing() {
    let app = app(6);
    let mut handles = Vec::new();
    for a in 0..8 {
        let app = app.clone();
        handles.push(tokio::spawn(async move {
            for i in 0..6 {
                let (s, _) = call(&app, rating(&format!("a{a}"), &format!("img{i:02}"), true, 4)).await;
                assert_eq!(s, StatusCode::OK);
            }
        }));
    }
    for h in handles {
        h.await.unwrap();
    }
    let csv = export(&app).await;
    let rows: BTreeSet<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 48);
    let (s, body) = call(&app, Request::get("/summary").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let summary: Vec<Value> = serde_json::from_slice(&body).unwrap();
    assert!(summary.iter().all(|r| r["correctness"] == 100.0 && r["naturalness"] == 4.0));
}

#[tokio::test]
async fn images_are_served_only_for_session_items() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("img00.png");
    std::fs::write(&png, b"\x89PNG fake").unwrap();
    let other = dir.path().join("secret.png");
    std::fs::write(&other, b"x").unwrap();
    let images = BTreeMap::from([("img00".to_string(), png), ("secret".to_string(), other)]);
    let app = app_with(2, None, images, None);
    let (s, body) = call(&app, Request::get("/images/img00.png").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"\x89PNG fake");
    assert_eq!(call(&app, Request::get("/images/secret").body(Body::empty()).unwrap()).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Request::get("/images/img01").body(Body::empty()).unwrap()).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn token_is_required_when_configured() {
    let app = app_with(2, None, BTreeMap::new(), Some("s3cret"));
    assert_eq!(call(&app, Request::get("/export").body(Body::empty()).unwrap()).await.0, StatusCode::UNAUTHORIZED);
    let wrong = Request::get("/export").header(TOKEN_HEADER, "nope").body(Body::empty()).unwrap();
    assert_eq!(call(&app, wrong).await.0, StatusCode::UNAUTHORIZED);
    let ok = Request::get("/export").header(TOKEN_HEADER, "s3cret").body(Body::empty()).unwrap();
    assert_eq!(call(&app, ok).await.0, StatusCode::OK);
}

#[tokio::test]
async fn accepted_ratings_are_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.json");
    let app = app_with(3, Some(path.clone()), BTreeMap::new(), None);
    assert_eq!(call(&app, rating("ann", "img02", true, 3)).await.0, StatusCode::OK);
    assert_eq!(call(&app, rating("ann", "img00", true, 9)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let saved = AnnotationSession::load(&path).unwrap();
    assert_eq!(saved.ratings().len(), 1);
    assert_eq!(saved.export_csv().unwrap(), export(&app).await);
}
