//! Admin HTTP API. Every policy edit goes through `Broker::apply_policy`,
//! the same sequence point the transport path uses.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use pinpoint_core::admin::{AssignRequest, BindingView, GroupView, PolicyView, ServiceView, VersionReply, GLOBAL_GROUP};
use pinpoint_core::policy::{Diagnostic, PolicyError, PolicyRule, PolicyUpdate};
use pinpoint_core::transport::{BrokerEvent, ClientInfo};
use pinpoint_core::Broker;
use serde_json::json;
use tokio::sync::{broadcast, watch};

#[derive(Clone)]
struct AppState {
    broker: Arc<Broker>,
    token: Option<Arc<str>>,
    shutdown: watch::Receiver<bool>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<PolicyError> for ApiError {
    fn from(e: PolicyError) -> Self {
        let status = match e {
            PolicyError::NoSuchGroup(_) => StatusCode::NOT_FOUND,
            PolicyError::Persist(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

/// Event streams end once `shutdown` turns true, so graceful shutdown is
/// not held open by subscribers.
pub fn admin_router(broker: Arc<Broker>, token: Option<String>, shutdown: watch::Receiver<bool>) -> Router {
    let state = AppState { broker, token: token.map(Arc::from), shutdown };
    Router::new()
        .route("/v1/services", get(services))
        .route("/v1/clients", get(clients))
        .route("/v1/policy", get(policy))
        .route("/v1/policy/rules", put(set_rule))
        .route("/v1/policy/rules/{uid}/{service}", delete(remove_rule))
        .route("/v1/policy/assign", post(assign))
        .route("/v1/groups", get(groups))
        .route("/v1/events", get(events))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(expected.as_ref()) {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or invalid admin token".into()).into_response();
        }
    }
    next.run(req).await
}

async fn services(State(s): State<AppState>) -> Json<Vec<ServiceView>> {
    let list = s
        .broker
        .hypovisor()
        .registry_snapshot()
        .into_iter()
        .map(|(name, namespace)| ServiceView { name, namespace })
        .collect();
    Json(list)
}

async fn clients(State(s): State<AppState>) -> Json<Vec<ClientInfo>> {
    Json(s.broker.clients())
}

fn policy_view(broker: &Broker) -> PolicyView {
    let set = broker.policy();
    let registry = broker.hypovisor().registry_snapshot();
    PolicyView {
        version: set.version(),
        rules: set.rules().to_vec(),
        text: set.serialize(),
        diagnostics: set
            .validate(&registry, broker.groups())
            .iter()
            .map(Diagnostic::to_string)
            .collect(),
    }
}

async fn policy(State(s): State<AppState>) -> Json<PolicyView> {
    Json(policy_view(&s.broker))
}

fn apply(broker: &Broker, update: PolicyUpdate) -> Result<Json<VersionReply>, ApiError> {
    let next = broker.apply_policy(&update)?;
    Ok(Json(VersionReply { version: next.version() }))
}

async fn set_rule(State(s): State<AppState>, Json(rule): Json<PolicyRule>) -> Result<Json<VersionReply>, ApiError> {
    if rule.service_name.is_empty() || rule.service_name.chars().any(char::is_whitespace) {
        return Err(ApiError(StatusCode::BAD_REQUEST, "service name must be a single non-empty token".into()));
    }
    apply(&s.broker, PolicyUpdate::SetRule(rule))
}

async fn remove_rule(
    State(s): State<AppState>,
    Path((uid, service)): Path<(u32, String)>,
) -> Result<Json<VersionReply>, ApiError> {
    apply(&s.broker, PolicyUpdate::RemoveRule { uid, service_name: service })
}

async fn assign(State(s): State<AppState>, Json(req): Json<AssignRequest>) -> Result<Json<VersionReply>, ApiError> {
    let update = if req.group == GLOBAL_GROUP && s.broker.groups().get(GLOBAL_GROUP).is_none() {
        PolicyUpdate::ClearUid { uid: req.uid }
    } else {
        PolicyUpdate::AssignGroup { uid: req.uid, group: req.group }
    };
    apply(&s.broker, update)
}

async fn groups(State(s): State<AppState>) -> Json<Vec<GroupView>> {
    let list = s
        .broker
        .groups()
        .iter()
        .map(|g| GroupView {
            name: g.name.clone(),
            bindings: g
                .bindings
                .iter()
                .map(|(service, namespace)| BindingView { service: service.clone(), namespace: *namespace })
                .collect(),
        })
        .collect();
    Json(list)
}

fn sse_event(ev: &BrokerEvent) -> Event {
    let name = match ev {
        BrokerEvent::PolicyVersion { .. } => "policy_version",
        BrokerEvent::Lookup { .. } => "lookup",
    };
    Event::default()
        .event(name)
        .data(serde_json::to_string(ev).expect("event serializes"))
}

/// Server-sent events: the current policy version first, then every policy
/// change and lookup as it happens.
async fn events(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = s.broker.subscribe();
    let first = BrokerEvent::PolicyVersion { version: s.broker.policy().version() };
    let live = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => return Some((Ok(sse_event(&ev)), rx)),
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let mut stop = s.shutdown.clone();
    let stream = stream::once(async move { Ok(sse_event(&first)) })
        .chain(live)
        .take_until(async move {
            let _ = stop.wait_for(|stop| *stop).await;
        });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
