use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use futures::{SinkExt, StreamExt};
use tokio::sync::mpsc;
use woundseg::infer::{spawn_stream_worker, FramePacket, LatestWins, MaskPacket};

use crate::{AppState, ErrorReply};

pub(crate) async fn stream(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| run(socket, state))
}

fn error_message(error: impl std::fmt::Display, sequence: Option<u64>) -> Message {
    let body = serde_json::to_string(&ErrorReply { error: error.to_string(), sequence })
        .unwrap_or_else(|_| r#"{"error":"unserializable error"}"#.into());
    Message::Text(body.into())
}

/// Frames go into a one-slot mailbox drained by a dedicated inference
/// thread. A frame that arrives while another waits replaces it.
async fn run(socket: WebSocket, state: Arc<AppState>) {
    let (mut sink, mut source) = socket.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let mailbox = Arc::new(LatestWins::<FramePacket>::new());

    let worker_tx = tx.clone();
    let worker = spawn_stream_worker(mailbox.clone(), move |frame: FramePacket| {
        let seg = state.segmenter();
        let reply = seg
            .segment_encoded(&frame.frame)
            .and_then(|s| MaskPacket::new(frame.sequence, s.inference_ms, &s.mask))
            .map(|p| Message::Binary(p.encode().into()))
            .unwrap_or_else(|e| error_message(e, Some(frame.sequence)));
        let _ = worker_tx.send(reply);
    });

    let forward = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            if sink.send(msg).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let mut last_sequence: Option<u64> = None;
    while let Some(Ok(msg)) = source.next().await {
        match msg {
            Message::Binary(bytes) => match FramePacket::decode(&bytes) {
                Ok(p) if last_sequence.is_some_and(|l| p.sequence <= l) => {
                    let _ = tx.send(error_message(
                        format!("sequence {} does not follow {}", p.sequence, last_sequence.unwrap_or(0)),
                        Some(p.sequence),
                    ));
                }
                Ok(p) => {
                    last_sequence = Some(p.sequence);
                    if let Some(old) = mailbox.put(p) {
                        log::debug!("dropped frame {}", old.sequence);
                    }
                }
                Err(e) => {
                    let _ = tx.send(error_message(e, None));
                }
            },
            Message::Text(_) => {
                let _ = tx.send(error_message("frames must be sent as binary messages", None));
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    mailbox.close();
    drop(tx);
    let _ = tokio::task::spawn_blocking(move || worker.join()).await;
    let _ = forward.await;
}
