//! HTTP endpoints for rating synthetic images.
//!
//! All session state lives in one task; handlers talk to it over a channel, so concurrent
//! annotators never race on the ratings store.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use minchange::annotate::{aggregate_ratings, AggregateRow, AnnotationItem, AnnotationSession, Rating};
use minchange::Error;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, oneshot};

pub const TOKEN_HEADER: &str = "x-annotator-token";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub rated: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextReply {
    pub done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item: Option<AnnotationItem>,
    pub progress: Progress,
}

/// Body of `POST /ratings`. Naturalness is taken as a plain integer so out-of-range values
/// get a validation error instead of a decode error.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct RatingIn {
    pub annotator_id: String,
    pub image_id: String,
    pub feasibility_correct: bool,
    pub naturalness: i64,
    #[serde(default)]
    pub timestamp: Option<u64>,
}

enum Cmd {
    Next { annotator: String, reply: oneshot::Sender<NextReply> },
    Submit { rating: Rating, reply: oneshot::Sender<Result<Progress, Error>> },
    Export { reply: oneshot::Sender<Result<String, Error>> },
    Summary { reply: oneshot::Sender<Result<Vec<AggregateRow>, Error>> },
}

fn progress(s: &AnnotationSession, annotator: &str) -> Progress {
    Progress { rated: s.rated_count(annotator), total: s.items.len() }
}

fn writer_task(mut session: AnnotationSession, persist: Option<PathBuf>) -> mpsc::Sender<Cmd> {
    let (tx, mut rx) = mpsc::channel::<Cmd>(64);
    tokio::spawn(async move {
        while let Some(cmd) = rx.recv().await {
            match cmd {
                Cmd::Next { annotator, reply } => {
                    let item = session.next_for(&annotator).cloned();
                    let _ = reply.send(NextReply { done: item.is_none(), item, progress: progress(&session, &annotator) });
                }
                Cmd::Submit { rating, reply } => {
                    let annotator = rating.annotator_id.clone();
                    let mut out = session.submit(rating);
                    if out.is_ok() {
                        if let Some(p) = &persist {
                            out = session.save(p);
                        }
                    }
                    let _ = reply.send(out.map(|_| progress(&session, &annotator)));
                }
                Cmd::Export { reply } => {
                    let _ = reply.send(session.export_csv());
                }
                Cmd::Summary { reply } => {
                    let ratings = session.ratings();
                    let rows = if ratings.is_empty() { Ok(Vec::new()) } else { aggregate_ratings(&session.items, &ratings) };
                    let _ = reply.send(rows);
                }
            }
        }
    });
    tx
}

#[derive(Clone)]
struct AppState {
    tx: mpsc::Sender<Cmd>,
    images: Arc<BTreeMap<String, PathBuf>>,
    token: Option<Arc<str>>,
}

pub struct ServerConfig {
    pub session: AnnotationSession,
    /// Where to save the session after every accepted rating.
    pub persist: Option<PathBuf>,
    /// Image files by id; only ids that are session items are served.
    pub images: BTreeMap<String, PathBuf>,
    pub token: Option<String>,
}

/// Build the router and start the session task. Must be called inside a tokio runtime.
pub fn router(cfg: ServerConfig) -> Router {
    let images = cfg.images.into_iter().filter(|(id, _)| cfg.session.item(id).is_some()).collect();
    let state = AppState { tx: writer_task(cfg.session, cfg.persist), images: Arc::new(images), token: cfg.token.map(Into::into) };
    Router::new()
        .route("/items/next", get(next_item))
        .route("/ratings", post(submit_rating))
        .route("/export", get(export))
        .route("/summary", get(summary))
        .route("/images/{id}", get(image))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidRating(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::UnknownItem(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

fn gone() -> ApiError {
    ApiError(StatusCode::SERVICE_UNAVAILABLE, "session task stopped".into())
}

async fn ask<T>(tx: &mpsc::Sender<Cmd>, make: impl FnOnce(oneshot::Sender<T>) -> Cmd) -> Result<T, ApiError> {
    let (reply, rx) = oneshot::channel();
    tx.send(make(reply)).await.map_err(|_| gone())?;
    rx.await.map_err(|_| gone())
}

async fn require_token(State(s): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(want) = &s.token {
        let got = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if got != Some(want.as_ref()) {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or wrong annotator token".into()).into_response();
        }
    }
    next.run(req).await
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

async fn next_item(State(s): State<AppState>, Query(q): Query<NextQuery>) -> Result<Json<NextReply>, ApiError> {
    if q.annotator.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "empty annotator".into()));
    }
    Ok(Json(ask(&s.tx, |reply| Cmd::Next { annotator: q.annotator, reply }).await?))
}

async fn submit_rating(State(s): State<AppState>, Json(r): Json<RatingIn>) -> Result<Json<Progress>, ApiError> {
    if !(1..=5).contains(&r.naturalness) {
        return Err(Error::InvalidRating(format!("naturalness {} outside 1..=5", r.naturalness)).into());
    }
    let timestamp = r.timestamp.unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()));
    let rating = Rating {
        annotator_id: r.annotator_id,
        image_id: r.image_id,
        feasibility_correct: r.feasibility_correct,
        naturalness: r.naturalness as u8,
        timestamp,
    };
    Ok(Json(ask(&s.tx, |reply| Cmd::Submit { rating, reply }).await??))
}

async fn export(State(s): State<AppState>) -> Result<Response, ApiError> {
    let csv = ask(&s.tx, |reply| Cmd::Export { reply }).await??;
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}

async fn summary(State(s): State<AppState>) -> Result<Json<Vec<AggregateRow>>, ApiError> {
    Ok(Json(ask(&s.tx, |reply| Cmd::Summary { reply }).await??))
}

async fn image(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id = id.strip_suffix(".png").unwrap_or(&id);
    let path = s.images.get(id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no image `{id}`")))?;
    let bytes = tokio::fs::read(path).await.map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes() {
        assert_eq!(ApiError::from(Error::InvalidRating("x".into())).0, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(ApiError::from(Error::UnknownItem("x".into())).0, StatusCode::NOT_FOUND);
        assert_eq!(ApiError::from(Error::EmptyInput("ratings")).0, StatusCode::INTERNAL_SERVER_ERROR);
    }
}
