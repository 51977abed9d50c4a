use std::net::SocketAddr;

use evassist_core::config::Config;
use evassist_core::workspace::parse_scene_fixture;
use evassist_server::{serve, ServerConfig};
use futures_util::{SinkExt, StreamExt};
use tokio_tungstenite::tungstenite::Message;

const SCENE: &str = "\
1 2 200 300 0 expression_row
2 + 250 300 0 expression_row
3 3 120 550 0 candidate_tray
4 = 190 550 0 candidate_tray
5 5 100 470 0 candidate_tray
";

async fn start() -> SocketAddr {
    let mut settings = ServerConfig::new(Config::default(), parse_scene_fixture(SCENE).unwrap());
    settings.tick = None;
    let (tx, rx) = tokio::sync::oneshot::channel();
    tokio::spawn(serve("127.0.0.1:0".parse().unwrap(), settings, Some(tx)));
    rx.await.unwrap()
}

fn http_get(addr: SocketAddr, path: &str) -> (u16, String) {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).unwrap();
    let status = buf[9..12].parse().unwrap();
    let body = buf.split("\r\n\r\n").nth(1).unwrap_or("").to_string();
    (status, body)
}

async fn next_json(
    ws: &mut (impl StreamExt<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin),
) -> serde_json::Value {
    loop {
        let msg = tokio::time::timeout(std::time::Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn websocket_round_trip_and_state_endpoint() {
    let addr = start().await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/demo/ws")).await.unwrap();

    ws.send(Message::Text(r#"{"v":"evassist.session/1","type":"join"}"#.into())).await.unwrap();
    let joined = next_json(&mut ws).await;
    assert_eq!(joined["type"], "state");
    assert_eq!(joined["session"], "demo");
    assert_eq!(joined["state"]["turn"], "human_turn");

    ws.send(Message::Text(r#"{"v":"evassist.session/1","type":"move_block","id":5,"x":600,"y":470}"#.into())).await.unwrap();
    let moved = next_json(&mut ws).await;
    ws.send(Message::Text(r#"{"v":"evassist.session/1","type":"release"}"#.into())).await.unwrap();
    let released = next_json(&mut ws).await;
    assert!(released["version"].as_u64() > moved["version"].as_u64());
    assert!(moved["version"].as_u64() > joined["version"].as_u64());

    ws.send(Message::Text("not json".into())).await.unwrap();
    let err = next_json(&mut ws).await;
    assert_eq!(err["type"], "error");
    assert_eq!(err["code"], "malformed_message");

    let (status, body) = tokio::task::spawn_blocking(move || http_get(addr, "/sessions/demo/state")).await.unwrap();
    assert_eq!(status, 200);
    let state: serde_json::Value = serde_json::from_str(&body).unwrap();
    let five = state["blocks"].as_array().unwrap().iter().find(|b| b["id"] == 5).unwrap().clone();
    assert_eq!(five["x"], 600.0);
    assert_eq!(five["zone"], "candidate_tray");

    let (status, body) = tokio::task::spawn_blocking(move || http_get(addr, "/sessions/ghost/state")).await.unwrap();
    assert_eq!(status, 404);
    assert!(body.contains("unknown_session"));
}
