//! Websocket transport for [`softgrasp::service`] sessions.
//!
//! Each connection owns one session. Computations run on the blocking pool
//! under a per-session [`Coalescer`]; incoming messages are drained before
//! finished results, so a burst of updates collapses into the newest one.

use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use softgrasp::service::{codes, Coalescer, Engine, Job, ServerMsg, Session};
use softgrasp::{DisplacementField, Result};
use tokio::net::TcpListener;
use tokio::sync::mpsc;

/// Largest accepted client frame.
const MAX_CLIENT_FRAME: usize = 1 << 20;

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/ws", get(upgrade))
        .route("/health", get(|| async { "ok" }))
        .with_state(engine)
}

pub async fn serve(listener: TcpListener, engine: Engine) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(engine))).await
}

async fn upgrade(ws: WebSocketUpgrade, State(engine): State<Arc<Engine>>) -> impl IntoResponse {
    ws.max_message_size(MAX_CLIENT_FRAME)
        .on_upgrade(move |socket| run_session(socket, engine))
}

enum Event {
    Progress(ServerMsg),
    Done(Job, Result<DisplacementField>, f64),
}

fn start(engine: &Arc<Engine>, job: Job, tx: mpsc::UnboundedSender<Event>) {
    let engine = Arc::clone(engine);
    tokio::task::spawn_blocking(move || {
        let (r, ms) = engine.run(&job, |p| {
            let _ = tx.send(Event::Progress(p));
        });
        let _ = tx.send(Event::Done(job, r, ms));
    });
}

async fn send(socket: &mut WebSocket, msg: &ServerMsg) -> bool {
    match serde_json::to_string(msg) {
        Ok(text) => socket.send(Message::Text(text.into())).await.is_ok(),
        Err(_) => false,
    }
}

async fn run_session(mut socket: WebSocket, engine: Arc<Engine>) {
    let mut session = Session::new(&engine);
    let mut coalescer = Coalescer::default();
    let (tx, mut rx) = mpsc::unbounded_channel();
    loop {
        tokio::select! {
            biased;
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let e = ServerMsg::Err { code: codes::MALFORMED, msg: "binary frames are not accepted".into() };
                        send(&mut socket, &e).await;
                        break;
                    }
                    Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
                    _ => break,
                };
                let out = session.handle_text(&engine, text.as_str());
                for r in &out.replies {
                    if !send(&mut socket, r).await {
                        return;
                    }
                }
                if out.close {
                    break;
                }
                if let Some(job) = out.job.and_then(|j| coalescer.submit(j)) {
                    start(&engine, job, tx.clone());
                }
            }
            Some(event) = rx.recv() => match event {
                Event::Progress(p) => {
                    let current = matches!(&p, ServerMsg::Progress { seq, .. } if session.is_current(*seq));
                    if current && !send(&mut socket, &p).await {
                        return;
                    }
                }
                Event::Done(job, result, ms) => {
                    if let Some(reply) = session.complete(&engine, &job, result, ms) {
                        if !send(&mut socket, &reply).await {
                            return;
                        }
                    }
                    if let Some(next) = coalescer.finish() {
                        start(&engine, next, tx.clone());
                    }
                }
            }
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}
