//! A tiny scripted HTTP server standing in for a chat-completion service.
//!
//! Each incoming request consumes the next script step; when the script runs
//! out, the final step repeats. Requests are captured for assertions.
//!
//! Shared across test binaries; not every binary uses every helper.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

/// One scripted response.
#[derive(Debug, Clone)]
pub enum Step {
    /// 200 OK whose assistant message content is this string.
    Content(String),
    /// Arbitrary status code with a plain-text body.
    Status(u16, String),
    /// Sleep before answering 200 (drives client-timeout paths).
    Slow(Duration, String),
    /// 200 OK echoing the last user message back as the content.
    EchoUser,
}

#[derive(Debug, Clone)]
pub struct CapturedRequest {
    pub body: serde_json::Value,
    pub authorization: Option<String>,
}

pub struct MockChatServer {
    endpoint: String,
    addr: std::net::SocketAddr,
    requests: Arc<Mutex<Vec<CapturedRequest>>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl MockChatServer {
    pub fn start(script: Vec<Step>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = listener.local_addr().expect("local addr");
        let requests: Arc<Mutex<Vec<CapturedRequest>>> = Arc::default();
        let stop = Arc::new(AtomicBool::new(false));

        let thread_requests = Arc::clone(&requests);
        let thread_stop = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            let mut script: VecDeque<Step> = script.into();
            let fallback = script.back().cloned().unwrap_or(Step::EchoUser);
            for stream in listener.incoming() {
                if thread_stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { break };
                let step = script.pop_front().unwrap_or_else(|| fallback.clone());
                serve_one(stream, step, &thread_requests);
            }
        });

        MockChatServer {
            endpoint: format!("http://{addr}/v1/chat/completions"),
            addr,
            requests,
            stop,
            handle: Some(handle),
        }
    }

    pub fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    pub fn requests(&self) -> Vec<CapturedRequest> {
        self.requests.lock().unwrap().clone()
    }

    pub fn hits(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

impl Drop for MockChatServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop so the thread can observe the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_one(mut stream: TcpStream, step: Step, requests: &Mutex<Vec<CapturedRequest>>) {
    let Some(request) = read_request(&mut stream) else { return };
    requests.lock().unwrap().push(request.clone());

    let (status, reason, body) = match step {
        Step::Content(content) => (200, "OK", completion_body(&content)),
        Step::Status(code, body) => (code, "Scripted", body),
        Step::Slow(delay, content) => {
            std::thread::sleep(delay);
            (200, "OK", completion_body(&content))
        }
        Step::EchoUser => {
            let last_user = request.body["messages"]
                .as_array()
                .and_then(|msgs| {
                    msgs.iter()
                        .rev()
                        .find(|m| m["role"] == "user")
                        .and_then(|m| m["content"].as_str())
                })
                .unwrap_or("")
                .to_string();
            (200, "OK", completion_body(&last_user))
        }
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.flush();
}

fn completion_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{ "message": { "role": "assistant", "content": content } }]
    })
    .to_string()
}

/// Minimal HTTP/1.1 request reader: headers up to the blank line, then a
/// Content-Length-delimited body.
fn read_request(stream: &mut TcpStream) -> Option<CapturedRequest> {
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    let mut raw = Vec::new();
    let mut buf = [0u8; 1024];
    let header_end = loop {
        match stream.read(&mut buf) {
            Ok(0) => return None,
            Ok(n) => raw.extend_from_slice(&buf[..n]),
            Err(_) => return None,
        }
        if let Some(pos) = find_blank_line(&raw) {
            break pos;
        }
        if raw.len() > 1 << 20 {
            return None;
        }
    };

    let head = String::from_utf8_lossy(&raw[..header_end]).to_string();
    let mut content_length = 0usize;
    let mut authorization = None;
    for line in head.lines().skip(1) {
        let Some((name, value)) = line.split_once(':') else { continue };
        match name.trim().to_ascii_lowercase().as_str() {
            "content-length" => content_length = value.trim().parse().unwrap_or(0),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }

    let mut body = raw[header_end + 4..].to_vec();
    while body.len() < content_length {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => body.extend_from_slice(&buf[..n]),
            Err(_) => return None,
        }
    }
    let body = serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    Some(CapturedRequest { body, authorization })
}

fn find_blank_line(raw: &[u8]) -> Option<usize> {
    raw.windows(4).position(|w| w == b"\r\n\r\n")
}
