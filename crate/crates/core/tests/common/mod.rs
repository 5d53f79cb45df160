//! Shared test support: a minimal canned-response HTTP server and toy data
//! builders.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use exsel_core::corpus::{compose_pool, LangCode, Origin, ParallelPair, Pool};

pub type Handler =
    dyn Fn(&str, &serde_json::Value) -> (u16, serde_json::Value) + Send + Sync + 'static;

/// A single-threaded HTTP/1.1 stub: parses `POST` bodies as JSON, hands them
/// to the closure, and replies with `Connection: close`.
pub struct StubServer {
    addr: std::net::SocketAddr,
    requests: Arc<AtomicUsize>,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&str, &serde_json::Value) -> (u16, serde_json::Value) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(AtomicUsize::new(0));
        let shutdown = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let thread_requests = requests.clone();
        let thread_shutdown = shutdown.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if thread_shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let handler = handler.clone();
                let requests = thread_requests.clone();
                // handle concurrently so bounded in-flight clients make progress
                std::thread::spawn(move || {
                    let _ = serve_one(stream, &handler, &requests);
                });
            }
        });
        StubServer { addr, requests, shutdown, handle: Some(handle) }
    }

    pub fn url(&self) -> String {
        format!("http://{}/", self.addr)
    }

    pub fn url_path(&self, path: &str) -> String {
        format!("http://{}/{}", self.addr, path.trim_start_matches('/'))
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_one(
    stream: TcpStream,
    handler: &Arc<Handler>,
    requests: &Arc<AtomicUsize>,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    if request_line.trim().is_empty() {
        return Ok(());
    }
    let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(value) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;
    requests.fetch_add(1, Ordering::SeqCst);
    let parsed: serde_json::Value =
        serde_json::from_slice(&body).unwrap_or(serde_json::Value::Null);
    let (status, response) = handler(&path, &parsed);
    let body = response.to_string();
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Status",
    };
    let mut stream = stream;
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

pub fn lang(code: &str) -> LangCode {
    LangCode::new(code).unwrap()
}

pub fn make_pairs(origin: Origin, n: usize, src_lang: &str, tgt_lang: &str) -> Vec<ParallelPair> {
    (0..n)
        .map(|i| ParallelPair {
            id: format!("{}-{}", origin.tag(), i),
            source_text: format!("source sentence number {i}"),
            target_text: format!("phrase cible numéro {i}"),
            source_lang: lang(src_lang),
            target_lang: lang(tgt_lang),
            origin,
        })
        .collect()
}

pub fn flores_pool(n: usize) -> Pool {
    let pairs = make_pairs(Origin::FloresDev, n, "eng", "fra");
    compose_pool(&pairs, &[], n, 0).unwrap()
}
