//! Single-port server. A connection whose first byte is `{` (or that stays
//! silent briefly) is a raw newline-delimited JSON session; anything else is
//! HTTP, upgraded to a WebSocket session or answered from the static directory.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use mrnav_core::mission::Mission;
use mrnav_core::runlog::MissionLog;
use mrnav_core::scenario::Scenario;
use tungstenite::Message as WsMessage;

use crate::codec::{self, ErrorReply, Payload};
use crate::outbox::Outbox;
use crate::service::{serve_run_id, LoopConfig, LoopInput, MissionService, SessionId};

/// Machine-readable description of every telemetry message.
pub const SCHEMA: &str = include_str!("../schema/telemetry.schema.json");

/// How long a silent client may wait before it is treated as a raw session.
const SNIFF_TIMEOUT: Duration = Duration::from_millis(200);
const MAX_HEAD: usize = 16 * 1024;
const PLACEHOLDER_INDEX: &str = "<!doctype html><title>mrnav</title><p>No operator UI bundle configured. \
The telemetry socket is at <code>/ws</code>; the schema is at <code>/schema.json</code>.</p>\n";

#[derive(Debug, Clone, Default)]
pub struct GatewayConfig {
    pub static_dir: Option<PathBuf>,
    pub loop_config: LoopConfig,
}

struct Shared {
    input: Sender<LoopInput>,
    next_session: AtomicU64,
    /// Active session id and a handle to tear its socket down on replacement.
    current: Mutex<Option<(SessionId, TcpStream)>>,
    static_dir: Option<PathBuf>,
    stop: AtomicBool,
}

pub struct Gateway {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
    service: Option<MissionService>,
}

impl Gateway {
    /// Binds `addr` and starts the mission loop for `scenario`.
    pub fn start(scenario: Scenario, addr: &str, config: GatewayConfig) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let run_id = serve_run_id(&scenario);
        let service = MissionService::spawn(Mission::new(scenario, run_id), config.loop_config);
        let shared = Arc::new(Shared {
            input: service.sender(),
            next_session: AtomicU64::new(1),
            current: Mutex::new(None),
            static_dir: config.static_dir,
            stop: AtomicBool::new(false),
        });
        let sh = shared.clone();
        let acceptor = thread::Builder::new().name("acceptor".into()).spawn(move || accept_loop(listener, sh))?;
        Ok(Self { addr, shared, acceptor: Some(acceptor), service: Some(service) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Closes the listener and the active session, stops the mission loop and
    /// returns its log.
    pub fn shutdown(mut self) -> MissionLog {
        self.stop_network();
        self.service.take().expect("service present until shutdown").stop()
    }

    fn stop_network(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some((_, stream)) = self.shared.current.lock().expect("session lock").take() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop_network();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let sh = shared.clone();
                let _ = thread::Builder::new().name("connection".into()).spawn(move || {
                    let _ = handle_connection(stream, sh);
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(_) => thread::sleep(Duration::from_millis(5)),
        }
    }
}

fn handle_connection(stream: TcpStream, shared: Arc<Shared>) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(SNIFF_TIMEOUT))?;
    let mut first = [0u8; 1];
    let raw = match stream.peek(&mut first) {
        Ok(0) => return Ok(()),
        Ok(_) => first[0] == b'{',
        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => true,
        Err(e) => return Err(e),
    };
    stream.set_read_timeout(None)?;
    if raw {
        return raw_session(stream, &shared);
    }
    let head = peek_head(&stream)?;
    let request = parse_head(&head);
    if request.upgrade_websocket {
        return websocket_session(stream, &shared);
    }
    let mut stream = stream;
    let mut consumed = vec![0u8; head.len()];
    stream.read_exact(&mut consumed)?;
    serve_static(&mut stream, &request, shared.static_dir.as_deref())
}

fn peek_head(stream: &TcpStream) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; MAX_HEAD];
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut last = 0;
    loop {
        let n = stream.peek(&mut buf)?;
        if let Some(end) = buf[..n].windows(4).position(|w| w == b"\r\n\r\n") {
            stream.set_read_timeout(None)?;
            return Ok(buf[..end + 4].to_vec());
        }
        if n == MAX_HEAD || (n == last && n > 0 && n == 0) {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "request head too large"));
        }
        if n == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"));
        }
        last = n;
        thread::sleep(Duration::from_millis(1));
    }
}

#[derive(Debug, Default, PartialEq)]
pub struct RequestHead {
    pub method: String,
    pub path: String,
    pub upgrade_websocket: bool,
}

pub fn parse_head(head: &[u8]) -> RequestHead {
    let text = String::from_utf8_lossy(head);
    let mut lines = text.split("\r\n");
    let mut parts = lines.next().unwrap_or_default().split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or("/").to_string();
    let upgrade_websocket = lines.any(|l| {
        l.split_once(':')
            .is_some_and(|(k, v)| k.trim().eq_ignore_ascii_case("upgrade") && v.trim().eq_ignore_ascii_case("websocket"))
    });
    RequestHead { method, path, upgrade_websocket }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or_default() {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "wasm" => "application/wasm",
        _ => "application/octet-stream",
    }
}

/// Maps a request path into `root`, refusing anything that escapes it.
pub fn resolve_static(root: &Path, url_path: &str) -> Option<PathBuf> {
    let path = url_path.split(['?', '#']).next().unwrap_or_default();
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let mut full = root.join(rel);
    if path.ends_with('/') || path.is_empty() {
        full = full.join("index.html");
    }
    Some(full)
}

fn respond(stream: &mut TcpStream, status: &str, ctype: &str, body: &[u8]) -> io::Result<()> {
    write!(stream, "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len())?;
    stream.write_all(body)?;
    stream.flush()
}

fn serve_static(stream: &mut TcpStream, req: &RequestHead, root: Option<&Path>) -> io::Result<()> {
    if req.method != "GET" && req.method != "HEAD" {
        return respond(stream, "405 Method Not Allowed", "text/plain", b"method not allowed\n");
    }
    let path = req.path.split(['?', '#']).next().unwrap_or_default();
    if path == "/schema.json" {
        return respond(stream, "200 OK", "application/json", SCHEMA.as_bytes());
    }
    let Some(root) = root else {
        return if path == "/" || path == "/index.html" {
            respond(stream, "200 OK", "text/html; charset=utf-8", PLACEHOLDER_INDEX.as_bytes())
        } else {
            respond(stream, "404 Not Found", "text/plain", b"not found\n")
        };
    };
    match resolve_static(root, &req.path).map(|p| (std::fs::read(&p), p)) {
        Some((Ok(body), p)) => {
            let body = if req.method == "HEAD" { Vec::new() } else { body };
            respond(stream, "200 OK", content_type(&p), &body)
        }
        Some((Err(_), _)) => respond(stream, "404 Not Found", "text/plain", b"not found\n"),
        None => respond(stream, "403 Forbidden", "text/plain", b"forbidden\n"),
    }
}

/// Registers a new session, replacing (and disconnecting) any previous one.
fn open_session(shared: &Shared, stream: &TcpStream) -> io::Result<(SessionId, Arc<Outbox>)> {
    let id = shared.next_session.fetch_add(1, Ordering::SeqCst);
    let outbox = Arc::new(Outbox::new());
    let old = shared.current.lock().expect("session lock").replace((id, stream.try_clone()?));
    if let Some((_, old_stream)) = old {
        let _ = old_stream.shutdown(Shutdown::Both);
    }
    let _ = shared.input.send(LoopInput::Attach { session: id, outbox: outbox.clone() });
    Ok((id, outbox))
}

fn close_session(shared: &Shared, id: SessionId, outbox: &Outbox) {
    outbox.close();
    let mut cur = shared.current.lock().expect("session lock");
    if cur.as_ref().is_some_and(|(cid, _)| *cid == id) {
        *cur = None;
    }
    drop(cur);
    let _ = shared.input.send(LoopInput::Detach { session: id });
}

fn forward(shared: &Shared, session: SessionId, frame: &[u8]) {
    let input = match codec::decode(frame) {
        Ok(message) => LoopInput::Inbound { session, message },
        Err(e) => LoopInput::Reply {
            session,
            payload: Payload::Error(ErrorReply { ack: e.seq(), code: e.code(), message: e.to_string() }),
        },
    };
    let _ = shared.input.send(input);
}

fn raw_session(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    let (id, outbox) = open_session(shared, &stream)?;
    let mut writer = stream.try_clone()?;
    let out = outbox.clone();
    let writer_thread = thread::Builder::new().name("session-writer".into()).spawn(move || {
        loop {
            match out.pop(Duration::from_millis(100)) {
                Some(m) => {
                    if writer.write_all(&codec::encode(&m)).is_err() {
                        break;
                    }
                }
                None if out.is_closed() => break,
                None => {}
            }
        }
        let _ = writer.shutdown(Shutdown::Write);
    })?;
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    loop {
        line.clear();
        match reader.read_until(b'\n', &mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) => {
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                forward(shared, id, &line);
            }
        }
    }
    close_session(shared, id, &outbox);
    let _ = writer_thread.join();
    Ok(())
}

fn websocket_session(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    let handle = stream.try_clone()?;
    let mut ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
    let (id, outbox) = open_session(shared, &handle)?;
    handle.set_read_timeout(Some(Duration::from_millis(2)))?;
    'session: loop {
        while let Some(m) = outbox.pop(Duration::ZERO) {
            if ws.send(WsMessage::text(codec::encode_str(&m))).is_err() {
                break 'session;
            }
        }
        if outbox.is_closed() {
            break;
        }
        match ws.read() {
            Ok(WsMessage::Text(t)) => forward(shared, id, t.as_bytes()),
            Ok(WsMessage::Binary(b)) => forward(shared, id, &b),
            Ok(WsMessage::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
    }
    close_session(shared, id, &outbox);
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}
