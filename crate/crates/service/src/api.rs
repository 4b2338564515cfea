use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pairtune_core::oracle::ExpertAnswer;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::oneshot;

use crate::error::ServiceError;
use crate::store::{LabelAck, LabelQuery, Phase, SessionHandle, SessionStore, SessionView};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::Invalid { .. } => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = match &self {
            ServiceError::Invalid { field, message } => json!({ "error": message, "field": field }),
            other => json!({ "error": other.to_string() }),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/queries", get(get_queries))
        .route("/sessions/{id}/labels", post(submit_label))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/model", get(export_model))
        .with_state(store)
}

/// Serves until `shutdown` resolves, sweeping label timeouts in the background.
pub async fn serve(
    store: Arc<SessionStore>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    if let Some(timeout) = store.config().label_timeout {
        let s = store.clone();
        let period = (timeout / 4).max(Duration::from_millis(50));
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let s = s.clone();
                let _ = tokio::task::spawn_blocking(move || s.sweep_timeouts()).await;
            }
        });
    }
    axum::serve(listener, router(store)).with_graceful_shutdown(shutdown).await
}

async fn create_session(State(store): State<Arc<SessionStore>>, body: String) -> ApiResult<Response> {
    let handle = blocking(move || store.create(&body)).await?;
    Ok((StatusCode::CREATED, Json(handle.view())).into_response())
}

async fn list_sessions(State(store): State<Arc<SessionStore>>) -> Json<Vec<String>> {
    Json(store.ids())
}

async fn get_session(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Json<Arc<SessionView>>> {
    Ok(Json(store.get(&id)?.view()))
}

#[derive(Serialize)]
struct QueriesBody {
    session_id: String,
    phase: Phase,
    pending: Vec<LabelQuery>,
}

async fn get_queries(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Json<QueriesBody>> {
    let v = store.get(&id)?.view();
    Ok(Json(QueriesBody {
        session_id: v.session_id.clone(),
        phase: v.phase,
        pending: v.pending.clone(),
    }))
}

#[derive(Deserialize)]
struct LabelBody {
    query_id: String,
    answer: ExpertAnswer,
}

#[derive(Deserialize, Default)]
struct WaitParam {
    #[serde(default)]
    wait: bool,
}

#[derive(Serialize)]
struct LabelResponse {
    ack: LabelAck,
    session: Arc<SessionView>,
}

async fn submit_label(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    Query(params): Query<WaitParam>,
    body: String,
) -> ApiResult<Json<LabelResponse>> {
    let LabelBody { query_id, answer } = serde_json::from_str(&body).map_err(|e| ServiceError::Invalid {
        field: None,
        message: format!("label body: {e}"),
    })?;
    let handle = store.get(&id)?;
    let (tx, rx) = oneshot::channel();
    let h = handle.clone();
    // The retrain that a batch-closing answer triggers runs after the ack is sent.
    let task = tokio::task::spawn_blocking(move || {
        let res = h.submit(&query_id, answer);
        let complete = matches!(res, Ok((_, true)));
        let _ = tx.send(res.map(|(ack, _)| ack));
        if complete {
            if let Err(e) = h.complete_batch() {
                tracing::error!(session = %h.id(), "advance failed: {e}");
                return Err(e);
            }
        }
        Ok(())
    });
    let ack = rx
        .await
        .map_err(|_| ServiceError::Internal("label worker dropped".into()))??;
    if params.wait {
        task.await.map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))??;
    }
    Ok(Json(LabelResponse {
        ack,
        session: handle.view(),
    }))
}

#[derive(Deserialize)]
struct AdvanceBody {
    #[serde(default = "one")]
    batches: usize,
}

fn one() -> usize {
    1
}

async fn advance(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    body: String,
) -> ApiResult<Json<Arc<SessionView>>> {
    let AdvanceBody { batches } = if body.trim().is_empty() {
        AdvanceBody { batches: 1 }
    } else {
        serde_json::from_str(&body).map_err(|e| ServiceError::Invalid {
            field: Some("batches".into()),
            message: format!("advance body: {e}"),
        })?
    };
    let handle: Arc<SessionHandle> = store.get(&id)?;
    let h = handle.clone();
    blocking(move || h.auto_advance(batches)).await?;
    Ok(Json(handle.view()))
}

async fn export_model(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Response> {
    let model = store.get(&id)?.model()?;
    let text = model.to_json()?;
    Ok(([(axum::http::header::CONTENT_TYPE, "application/json")], text).into_response())
}
