//! Session host: one actor task per session, a websocket per client and a
//! read-only state endpoint for polling clients.
//!
//! Routes:
//! - `GET /sessions/{id}/ws` upgrades to the message stream and creates the
//!   session on first contact.
//! - `GET /sessions/{id}/state` returns the current state record.
//! - `GET /sessions` lists session ids.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use evassist_core::config::Config;
use evassist_core::session::{
    encode, parse_inbound, ClientMessage, ServerBody, ServerMessage, Session, SessionErrorCode, SessionView,
    PROTOCOL_VERSION,
};
use evassist_core::workspace::Scene;
use tokio::sync::{broadcast, mpsc};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub config: Config,
    /// Scene every new session starts from.
    pub scene: Scene,
    /// Frame clock; `None` leaves ticking to clients.
    pub tick: Option<Duration>,
}

impl ServerConfig {
    pub fn new(config: Config, scene: Scene) -> Self {
        let tick = Some(Duration::from_secs_f64(config.monitor.frame_interval()));
        ServerConfig { config, scene, tick }
    }
}

#[derive(Clone)]
struct SessionHandle {
    commands: mpsc::Sender<ClientMessage>,
    events: broadcast::Sender<ServerMessage>,
    view: Arc<Mutex<SessionView>>,
}

#[derive(Clone)]
pub struct AppState {
    settings: Arc<ServerConfig>,
    sessions: Arc<Mutex<HashMap<String, SessionHandle>>>,
}

impl AppState {
    pub fn new(settings: ServerConfig) -> Self {
        AppState { settings: Arc::new(settings), sessions: Arc::new(Mutex::new(HashMap::new())) }
    }

    fn session(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.lock().expect("session table").get(id).cloned()
    }

    fn open(&self, id: &str) -> SessionHandle {
        let mut table = self.sessions.lock().expect("session table");
        if let Some(h) = table.get(id) {
            return h.clone();
        }
        let handle = spawn_session(id, &self.settings);
        table.insert(id.to_string(), handle.clone());
        handle
    }
}

fn spawn_session(id: &str, settings: &ServerConfig) -> SessionHandle {
    let mut session = Session::new(id, settings.scene.clone(), settings.config.clone());
    let (commands, mut inbox) = mpsc::channel::<ClientMessage>(256);
    let (events, _) = broadcast::channel(1024);
    let view = Arc::new(Mutex::new(session.view()));
    let handle = SessionHandle { commands: commands.clone(), events: events.clone(), view: view.clone() };
    let loopback = commands.clone();
    tokio::spawn(async move {
        while let Some(message) = inbox.recv().await {
            let handled = session.handle_message(message);
            *view.lock().expect("view") = session.view();
            for m in handled.messages {
                let _ = events.send(m);
            }
            if let Some(job) = handled.job {
                let back = loopback.clone();
                tokio::spawn(async move {
                    if let Ok(done) = tokio::task::spawn_blocking(move || job.run()).await {
                        let _ = back.send(done).await;
                    }
                });
            }
        }
    });
    if let Some(period) = settings.tick {
        let ticker = commands;
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            loop {
                interval.tick().await;
                if ticker.send(ClientMessage::Tick).await.is_err() {
                    break;
                }
            }
        });
    }
    handle
}

fn error_record(session: &str, code: SessionErrorCode, message: String) -> ServerMessage {
    ServerMessage { v: PROTOCOL_VERSION.to_string(), session: session.to_string(), version: 0, body: ServerBody::Error { code, message } }
}

async fn state(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    match app.session(&id) {
        Some(h) => Json(h.view.lock().expect("view").clone()).into_response(),
        None => (StatusCode::NOT_FOUND, Json(error_record(&id, SessionErrorCode::UnknownSession, format!("no session {id:?}"))))
            .into_response(),
    }
}

async fn list(State(app): State<AppState>) -> Json<Vec<String>> {
    let mut ids: Vec<String> = app.sessions.lock().expect("session table").keys().cloned().collect();
    ids.sort();
    Json(ids)
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<AppState>, Path(id): Path<String>) -> Response {
    let handle = app.open(&id);
    ws.on_upgrade(move |socket| client(socket, id, handle))
}

async fn client(mut socket: WebSocket, id: String, handle: SessionHandle) {
    let mut events = handle.events.subscribe();
    loop {
        tokio::select! {
            incoming = socket.recv() => {
                let Some(Ok(frame)) = incoming else { break };
                let text = match frame {
                    Message::Text(t) => t.to_string(),
                    Message::Close(_) => break,
                    _ => continue,
                };
                match parse_inbound(&text) {
                    Ok(ClientMessage::PhaseFinished { .. }) => {
                        let e = error_record(&id, SessionErrorCode::MalformedMessage, "phase_finished is internal".into());
                        if socket.send(Message::Text(encode(&e).into())).await.is_err() { break; }
                    }
                    Ok(message) => {
                        if handle.commands.send(message).await.is_err() { break; }
                    }
                    Err(detail) => {
                        let e = error_record(&id, SessionErrorCode::MalformedMessage, detail);
                        if socket.send(Message::Text(encode(&e).into())).await.is_err() { break; }
                    }
                }
            }
            outgoing = events.recv() => {
                match outgoing {
                    Ok(m) => {
                        if socket.send(Message::Text(encode(&m).into())).await.is_err() { break; }
                    }
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                }
            }
        }
    }
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/sessions", get(list))
        .route("/sessions/{id}/state", get(state))
        .route("/sessions/{id}/ws", get(upgrade))
        .with_state(app)
}

/// Binds `addr` and serves until the process exits. Returns the bound
/// address through `bound` before serving.
pub async fn serve(addr: SocketAddr, settings: ServerConfig, bound: Option<tokio::sync::oneshot::Sender<SocketAddr>>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    if let Some(tx) = bound {
        let _ = tx.send(listener.local_addr()?);
    }
    axum::serve(listener, router(AppState::new(settings))).await
}

/// Encodes a session state record as JSON.
pub fn state_json(view: &SessionView) -> String {
    serde_json::to_string(view).expect("state serialises")
}
