use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde_json::Value;

use super::protocol::{encode, error_code, Hello, ScoreRequest, ScoreResponse};
use super::{OracleRequest, ScoreOracle};

/// Loopback server exposing any [`ScoreOracle`] over the wire protocol.
/// One thread per connection.
pub struct ReferenceServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

/// Computes the response line for one request line.
pub fn respond(oracle: &dyn ScoreOracle, line: &str) -> String {
    let value: Value = match serde_json::from_str(line.trim_end()) {
        Ok(v) => v,
        Err(e) => return encode(&ScoreResponse::error(None, "malformed_frame", e.to_string())),
    };
    let id = value.get("id").and_then(Value::as_u64);
    match value.get("op").and_then(Value::as_str) {
        Some("hello") => encode(&Hello::server(oracle.dim(), oracle.steps())),
        Some("score") => match serde_json::from_value::<ScoreRequest>(value) {
            Ok(req) => match oracle.evaluate(&OracleRequest::new(&req.prompt, &req.y, req.t)) {
                Ok(eps) if eps.iter().all(|v| v.is_finite()) => encode(&ScoreResponse::ok(req.id, eps)),
                Ok(_) => encode(&ScoreResponse::error(id, "non_finite", "prediction is not finite")),
                Err(e) => encode(&ScoreResponse::error(id, error_code(&e), e.to_string())),
            },
            Err(e) => encode(&ScoreResponse::error(id, "malformed_frame", e.to_string())),
        },
        Some(op) => encode(&ScoreResponse::error(id, "unsupported_op", format!("unsupported op `{op}`"))),
        None => encode(&ScoreResponse::error(id, "malformed_frame", "missing op")),
    }
}

fn serve_connection(oracle: Arc<dyn ScoreOracle>, stream: TcpStream) {
    let Ok(mut writer) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        let out = respond(oracle.as_ref(), &line);
        if writer.write_all(out.as_bytes()).is_err() {
            return;
        }
    }
}

impl ReferenceServer {
    /// Binds `addr` (use port 0 for an ephemeral port) and serves in the background.
    pub fn spawn(oracle: Arc<dyn ScoreOracle>, addr: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                if let Ok(stream) = stream {
                    let _ = stream.set_nodelay(true);
                    let oracle = oracle.clone();
                    std::thread::spawn(move || serve_connection(oracle, stream));
                }
            }
        });
        Ok(Self { addr, stop, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits (i.e. forever unless stopped).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ReferenceServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
