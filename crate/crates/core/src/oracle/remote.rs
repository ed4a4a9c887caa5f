use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Mutex;
use std::time::Duration;

use super::protocol::{encode, Hello, ScoreRequest, ScoreResponse, PROTOCOL_VERSION};
use super::{OracleRequest, ScoreOracle};
use crate::error::OracleError;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
    broken: Option<String>,
}

/// Client side of the wire protocol. One request is in flight per
/// connection; open several clients for parallel evaluation.
pub struct RemoteOracle {
    conn: Mutex<Connection>,
    m: usize,
    steps: usize,
}

fn transport(e: std::io::Error) -> OracleError {
    match e.kind() {
        std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => OracleError::Timeout,
        _ => OracleError::Transport(e.to_string()),
    }
}

fn read_frame(reader: &mut BufReader<TcpStream>) -> Result<String, OracleError> {
    let mut buf = String::new();
    match reader.read_line(&mut buf).map_err(transport)? {
        0 => Err(OracleError::Transport("connection closed by server".into())),
        _ if !buf.ends_with('\n') => Err(OracleError::Transport("connection closed mid-frame".into())),
        _ => Ok(buf),
    }
}

impl RemoteOracle {
    pub fn connect(addr: &str) -> Result<Self, OracleError> {
        Self::connect_with_timeout(addr, DEFAULT_TIMEOUT)
    }

    pub fn connect_with_timeout(addr: &str, timeout: Duration) -> Result<Self, OracleError> {
        let stream = TcpStream::connect(addr).map_err(transport)?;
        stream.set_read_timeout(Some(timeout)).map_err(transport)?;
        stream.set_nodelay(true).map_err(transport)?;
        let mut writer = stream.try_clone().map_err(transport)?;
        let mut reader = BufReader::new(stream);
        writer.write_all(encode(&Hello::client()).as_bytes()).map_err(transport)?;
        let line = read_frame(&mut reader)?;
        let hello: Hello = serde_json::from_str(line.trim_end())
            .map_err(|e| OracleError::MalformedFrame(format!("hello: {e}")))?;
        if hello.op != "hello" {
            return Err(OracleError::MalformedFrame(format!("expected hello, got op `{}`", hello.op)));
        }
        if hello.version != PROTOCOL_VERSION {
            return Err(OracleError::VersionMismatch { expected: PROTOCOL_VERSION, got: hello.version });
        }
        let (Some(m), Some(steps)) = (hello.m, hello.steps) else {
            return Err(OracleError::MalformedFrame("hello lacks m or T".into()));
        };
        Ok(Self {
            conn: Mutex::new(Connection { reader, writer, next_id: 1, broken: None }),
            m,
            steps,
        })
    }

    /// Aborts unless the server advertises exactly `(m, steps)`.
    pub fn expect_shape(self, m: usize, steps: usize) -> Result<Self, OracleError> {
        if self.m != m {
            return Err(OracleError::DimensionMismatch { expected: m, got: self.m });
        }
        if self.steps != steps {
            return Err(OracleError::MalformedFrame(format!(
                "server runs T={}, expected T={steps}",
                self.steps
            )));
        }
        Ok(self)
    }
}

impl ScoreOracle for RemoteOracle {
    fn dim(&self) -> usize {
        self.m
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn evaluate(&self, req: &OracleRequest<'_>) -> Result<Vec<f64>, OracleError> {
        if req.y.len() != self.m {
            return Err(OracleError::DimensionMismatch { expected: self.m, got: req.y.len() });
        }
        let mut conn = self.conn.lock().expect("connection lock");
        if let Some(why) = &conn.broken {
            return Err(OracleError::Transport(format!("connection unusable: {why}")));
        }
        let id = conn.next_id;
        conn.next_id += 1;
        let frame = encode(&ScoreRequest::new(id, req.prompt, req.t, req.y));
        let result = conn
            .writer
            .write_all(frame.as_bytes())
            .map_err(transport)
            .and_then(|_| read_frame(&mut conn.reader));
        let line = match result {
            Ok(l) => l,
            Err(e) => {
                // The stream position is unknown after a failed read.
                conn.broken = Some(e.to_string());
                return Err(e);
            }
        };
        let resp: ScoreResponse = match serde_json::from_str(line.trim_end()) {
            Ok(r) => r,
            Err(e) => return Err(OracleError::MalformedFrame(e.to_string())),
        };
        if resp.id != Some(id) {
            conn.broken = Some("response id out of sequence".into());
            return Err(OracleError::MalformedFrame(format!("response id {:?} does not match {id}", resp.id)));
        }
        match (resp.eps, resp.error) {
            (Some(eps), None) => {
                if eps.len() != self.m {
                    return Err(OracleError::DimensionMismatch { expected: self.m, got: eps.len() });
                }
                Ok(eps)
            }
            (None, Some(err)) => Err(match err.code.as_str() {
                "unknown_prompt" => OracleError::UnknownPrompt(req.prompt.to_string()),
                _ => OracleError::Remote { code: err.code, msg: err.msg },
            }),
            _ => Err(OracleError::MalformedFrame("response must carry exactly one of eps or error".into())),
        }
    }
}
