use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use futures::{SinkExt, StreamExt};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;
use woundseg::infer::{FramePacket, MaskPacket, CROP};
use woundseg::models::ModelVariant;
use woundseg_serve::{bind, router, AppState, ConfigView, ErrorReply, ModelEntry, ModelsView, ServeError, ServiceConfig};

fn config() -> ServiceConfig {
    ServiceConfig {
        models: [ModelVariant::UNeXtS, ModelVariant::ENet]
            .into_iter()
            .map(|variant| ModelEntry { variant, weights: None, seed: 1 })
            .collect(),
        ..ServiceConfig::default()
    }
}

fn app() -> axum::Router {
    router(Arc::new(AppState::new(&config()).unwrap()))
}

fn frame_png(width: u32, height: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(width, height, |x, y| {
        let d = ((x as f32 - width as f32 / 2.0).powi(2) + (y as f32 - height as f32 / 2.0).powi(2)).sqrt();
        if d < 60.0 {
            image::Rgb([200, 40, 50])
        } else {
            image::Rgb([(x % 256) as u8, (y % 256) as u8, 120])
        }
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

async fn body_bytes(resp: axum::response::Response) -> Vec<u8> {
    axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec()
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let (status, headers) = (resp.status(), resp.headers().clone());
    (status, headers, body_bytes(resp).await)
}

fn put_config(body: &str) -> Request<Body> {
    Request::put("/config").header("content-type", "application/json").body(Body::from(body.to_owned())).unwrap()
}

fn segment(bytes: Vec<u8>) -> Request<Body> {
    Request::post("/segment").body(Body::from(bytes)).unwrap()
}

fn decode_mask(png: &[u8]) -> Vec<u8> {
    let img = image::load_from_memory(png).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (CROP as u32, CROP as u32));
    img.into_raw()
}

#[tokio::test]
async fn models_lists_the_configured_variants() {
    let (status, _, body) = call(&app(), Request::get("/models").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let view: ModelsView = serde_json::from_slice(&body).unwrap();
    assert_eq!(view.active, ModelVariant::UNeXtS);
    assert_eq!(view.threshold, 0.75);
    let names: Vec<_> = view.models.iter().map(|m| m.variant).collect();
    assert_eq!(names, vec![ModelVariant::ENet, ModelVariant::UNeXtS]);
    assert!(view.models.iter().all(|m| m.parameters > 100_000 && m.weights.is_none()));
    assert_eq!(view.models.iter().filter(|m| m.active).count(), 1);
}

#[tokio::test]
async fn config_updates_are_validated_and_applied() {
    let app = app();
    let (status, _, body) = call(&app, put_config(r#"{"threshold":0.6,"variant":"ENet"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let view: ConfigView = serde_json::from_slice(&body).unwrap();
    assert_eq!(view, ConfigView { variant: ModelVariant::ENet, threshold: 0.6 });

    for bad in [r#"{"threshold":1.5}"#, r#"{"variant":"UNet"}"#, r#"{"colour":1}"#, "not json"] {
        let (status, _, body) = call(&app, put_config(bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
        let err: ErrorReply = serde_json::from_slice(&body).unwrap();
        assert!(!err.error.is_empty());
    }
    let (_, _, body) = call(&app, Request::get("/config").body(Body::empty()).unwrap()).await;
    let view: ConfigView = serde_json::from_slice(&body).unwrap();
    assert_eq!(view, ConfigView { variant: ModelVariant::ENet, threshold: 0.6 });
}

#[tokio::test]
async fn segment_returns_a_binary_png_with_metadata() {
    let (status, headers, body) = call(&app(), segment(frame_png(640, 480))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    assert_eq!(headers["x-crop-origin"], "208,128");
    assert_eq!(headers["x-variant"], "UNeXt-S");
    assert_eq!(headers["x-threshold"], "0.75");
    assert!(headers["x-inference-ms"].to_str().unwrap().parse::<f64>().unwrap() >= 0.0);
    assert!(decode_mask(&body).iter().all(|&v| v == 0 || v == 255));
}

#[tokio::test]
async fn segment_rejects_bad_input() {
    let (status, _, body) = call(&app(), segment(b"definitely not an image".to_vec())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    serde_json::from_slice::<ErrorReply>(&body).unwrap();
}

#[tokio::test]
async fn small_frames_are_upscaled_before_cropping() {
    let (status, headers, body) = call(&app(), segment(frame_png(200, 300))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["x-crop-origin"], "0,56");
    decode_mask(&body);
}

#[tokio::test]
async fn raising_the_threshold_shrinks_the_mask() {
    let app = app();
    let frame = frame_png(320, 240);
    let mut previous: Option<Vec<u8>> = None;
    for t in ["0.05", "0.3", "0.5", "0.75", "0.9", "0.99"] {
        let (status, _, _) = call(&app, put_config(&format!(r#"{{"threshold":{t}}}"#))).await;
        assert_eq!(status, StatusCode::OK);
        let (_, headers, body) = call(&app, segment(frame.clone())).await;
        assert_eq!(headers["x-threshold"], t);
        let mask = decode_mask(&body);
        if let Some(prev) = &previous {
            assert!(mask.iter().zip(prev).all(|(&m, &p)| m <= p), "mask at {t} is not a subset");
        }
        previous = Some(mask);
    }
}

async fn spawn_server() -> std::net::SocketAddr {
    let listener = bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app()).await.unwrap() });
    addr
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn connect(addr: std::net::SocketAddr) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/stream")).await.unwrap().0
}

async fn next_reply(ws: &mut Ws) -> Message {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(60), ws.next()).await.expect("reply timed out");
        match msg.expect("stream ended").unwrap() {
            Message::Ping(_) | Message::Pong(_) => continue,
            m => return m,
        }
    }
}

fn frame(sequence: u64, png: &[u8]) -> Message {
    Message::Binary(FramePacket { sequence, timestamp_ms: sequence * 33, frame: png.to_vec() }.encode().into())
}

#[tokio::test]
async fn stream_reports_errors_and_keeps_going() {
    let mut ws = connect(spawn_server().await).await;
    let png = frame_png(640, 480);

    ws.send(Message::Binary(vec![1, 2, 3].into())).await.unwrap();
    let Message::Text(t) = next_reply(&mut ws).await else { panic!("expected a text error") };
    assert!(serde_json::from_str::<ErrorReply>(&t).unwrap().sequence.is_none());

    ws.send(Message::Text("hello".into())).await.unwrap();
    assert!(matches!(next_reply(&mut ws).await, Message::Text(_)));

    ws.send(frame(1, b"garbage payload")).await.unwrap();
    let Message::Text(t) = next_reply(&mut ws).await else { panic!("expected a text error") };
    assert_eq!(serde_json::from_str::<ErrorReply>(&t).unwrap().sequence, Some(1));

    ws.send(frame(2, &png)).await.unwrap();
    let Message::Binary(b) = next_reply(&mut ws).await else { panic!("expected a mask packet") };
    let packet = MaskPacket::decode(&b).unwrap();
    assert_eq!(packet.sequence, 2);
    assert_eq!(packet.runs.iter().map(|&r| r as usize).sum::<usize>(), CROP * CROP);

    ws.send(frame(2, &png)).await.unwrap();
    let Message::Text(t) = next_reply(&mut ws).await else { panic!("expected a text error") };
    assert_eq!(serde_json::from_str::<ErrorReply>(&t).unwrap().sequence, Some(2));
}

#[tokio::test]
async fn stream_burst_ends_with_the_final_frame() {
    let mut ws = connect(spawn_server().await).await;
    let png = frame_png(640, 480);
    const N: u64 = 15;
    for s in 1..=N {
        ws.send(frame(s, &png)).await.unwrap();
    }
    let mut seen = Vec::new();
    while seen.last() != Some(&N) {
        let Message::Binary(b) = next_reply(&mut ws).await else { panic!("unexpected text reply") };
        seen.push(MaskPacket::decode(&b).unwrap().sequence);
    }
    assert!(seen.windows(2).all(|w| w[0] < w[1]), "replies out of order: {seen:?}");
    assert!(seen.len() as u64 <= N);
    ws.close(None).await.unwrap();
}

#[tokio::test]
async fn busy_port_is_reported() {
    let first = bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = first.local_addr().unwrap();
    match bind(addr).await {
        Err(ServeError::PortBusy { addr: a }) => assert_eq!(a, addr),
        other => panic!("expected PortBusy, got {other:?}"),
    }
}

#[test]
fn unknown_weights_fail_at_startup() {
    let mut cfg = config();
    cfg.models[0].weights = Some("/nonexistent/weights.wts".into());
    assert!(AppState::new(&cfg).is_err());
}
