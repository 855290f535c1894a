use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::time::Duration;

use base64::Engine as _;
use groundeval::adapter::{query_model, AdapterConfig, HttpTransport, ModelRequest, Transport, TransportFailure};
use groundeval::{Convention, Regime};

struct Seen {
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves the scripted (status, body) replies in order, one per connection.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Seen>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/extract", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            let mut auth = None;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                let (k, v) = line.split_once(':').unwrap_or((line, ""));
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            tx.send(Seen {
                auth,
                body: serde_json::from_slice(&buf).unwrap(),
            })
            .unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

fn request<'a>(image: &'a [u8]) -> ModelRequest<'a> {
    ModelRequest {
        doc_id: "f01",
        image,
        prompt: "extract the fields",
    }
}

#[test]
fn posts_image_and_prompt_with_bearer_token() {
    let (url, rx) = serve(vec![(200, r#"{"text": "{\"a\": 1}"}"#.into())]);
    let t = HttpTransport::new(&url, Some("s3cret".into()), Duration::from_secs(5)).unwrap();
    let image = [0x89u8, 0x50, 0x4e, 0x47];
    assert_eq!(t.send(&request(&image)).unwrap(), r#"{"a": 1}"#);
    let seen = rx.recv().unwrap();
    assert_eq!(seen.auth.as_deref(), Some("Bearer s3cret"));
    assert_eq!(seen.body["prompt"], "extract the fields");
    let sent = base64::engine::general_purpose::STANDARD
        .decode(seen.body["image"].as_str().unwrap())
        .unwrap();
    assert_eq!(sent, image);
}

#[test]
fn status_codes_map_to_failure_kinds() {
    let (url, _rx) = serve(vec![
        (503, "{}".into()),
        (429, "{}".into()),
        (400, "{}".into()),
        (200, r#"{"answer": "no text key"}"#.into()),
    ]);
    let t = HttpTransport::new(&url, None, Duration::from_secs(5)).unwrap();
    let image = [1u8];
    assert!(matches!(t.send(&request(&image)), Err(TransportFailure::Transient(_))));
    assert!(matches!(t.send(&request(&image)), Err(TransportFailure::Transient(_))));
    assert!(matches!(t.send(&request(&image)), Err(TransportFailure::Permanent(_))));
    assert!(matches!(t.send(&request(&image)), Err(TransportFailure::Permanent(_))));
}

#[test]
fn retries_server_errors_until_success() {
    let (url, _rx) = serve(vec![
        (502, "{}".into()),
        (500, "{}".into()),
        (200, r#"{"text": "ok"}"#.into()),
    ]);
    let cfg = AdapterConfig {
        model_id: "remote".into(),
        regime: Regime::ZeroShot,
        endpoint_url: url.clone(),
        coord_convention: Convention::Thousandths,
        max_retries: 3,
        backoff_base_ms: 1,
        max_parallel: 1,
        timeout_ms: 5000,
        auth_token_env: None,
    };
    let t = HttpTransport::new(&url, None, cfg.timeout()).unwrap();
    let out = query_model(&cfg, &t, &request(&[1])).unwrap();
    assert_eq!(out.text, "ok");
    assert_eq!(out.retry_count, 2);
}

#[test]
fn unreachable_endpoint_is_transient() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let t = HttpTransport::new(&format!("http://127.0.0.1:{port}/"), None, Duration::from_secs(2)).unwrap();
    assert!(matches!(t.send(&request(&[1])), Err(TransportFailure::Transient(_))));
}
