//! Newline-delimited JSON wire protocol for remote score oracles.
//!
//! Every frame is one UTF-8 JSON object followed by `\n`. Numbers use
//! shortest round-trip formatting, so vectors survive the wire bit-for-bit.
//!
//! ```text
//! client: {"op":"hello","version":1}
//! server: {"op":"hello","version":1,"m":3,"T":1000}
//! client: {"id":1,"op":"score","prompt":"a man","t":500,"y":[0.1,-0.2,0.3]}
//! server: {"id":1,"eps":[0.01,0.02,-0.03]}
//!     or: {"id":1,"error":{"code":"unknown_prompt","msg":"..."}}
//! ```

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::OracleError;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub op: String,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, rename = "T", skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

impl Hello {
    pub fn client() -> Self {
        Self { op: "hello".into(), version: PROTOCOL_VERSION, m: None, steps: None }
    }

    pub fn server(m: usize, steps: usize) -> Self {
        Self { op: "hello".into(), version: PROTOCOL_VERSION, m: Some(m), steps: Some(steps) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: u64,
    pub op: String,
    pub prompt: String,
    pub t: usize,
    pub y: Vec<f64>,
}

impl ScoreRequest {
    pub fn new(id: u64, prompt: &str, t: usize, y: &[f64]) -> Self {
        Self { id, op: "score".into(), prompt: prompt.into(), t, y: y.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl ScoreResponse {
    pub fn ok(id: u64, eps: Vec<f64>) -> Self {
        Self { id: Some(id), eps: Some(eps), error: None }
    }

    pub fn error(id: Option<u64>, code: &str, msg: impl Into<String>) -> Self {
        Self { id, eps: None, error: Some(ErrorBody { code: code.into(), msg: msg.into() }) }
    }
}

/// Serializes a frame with its terminating newline.
pub fn encode<T: Serialize>(frame: &T) -> String {
    let mut s = serde_json::to_string(frame).expect("frames serialize");
    s.push('\n');
    s
}

/// Stable error code for an oracle error.
pub fn error_code(e: &OracleError) -> &'static str {
    match e {
        OracleError::UnknownPrompt(_) => "unknown_prompt",
        OracleError::DimensionMismatch { .. } => "dimension_mismatch",
        OracleError::TimestepOutOfRange { .. } => "timestep_out_of_range",
        OracleError::Timeout => "timeout",
        OracleError::MalformedFrame(_) => "malformed_frame",
        OracleError::VersionMismatch { .. } => "version_mismatch",
        OracleError::Transport(_) => "transport",
        OracleError::Remote { .. } => "remote",
    }
}

/// Checks that a line is a single well-formed server frame.
pub fn validate_server_frame(line: &str, m: usize) -> Result<ScoreResponse, String> {
    let body = line.strip_suffix('\n').ok_or("frame is not newline-terminated")?;
    if body.contains('\n') {
        return Err("frame spans several lines".into());
    }
    let resp: ScoreResponse = serde_json::from_str(body).map_err(|e| format!("unparseable frame: {e}"))?;
    match (&resp.eps, &resp.error) {
        (Some(eps), None) => {
            if eps.len() != m {
                return Err(format!("eps has {} entries, expected {m}", eps.len()));
            }
            if resp.id.is_none() {
                return Err("success frame without id".into());
            }
        }
        (None, Some(_)) => {}
        _ => return Err("frame must carry exactly one of eps or error".into()),
    }
    Ok(resp)
}

/// One recorded exchange: the raw request line and the expected raw response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub send: String,
    pub expect: String,
}

struct Session {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Session {
    fn open(addr: &str, timeout: Duration) -> Result<Self, OracleError> {
        let stream = TcpStream::connect(addr).map_err(|e| OracleError::Transport(e.to_string()))?;
        stream
            .set_read_timeout(Some(timeout))
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let writer = stream.try_clone().map_err(|e| OracleError::Transport(e.to_string()))?;
        Ok(Self { reader: BufReader::new(stream), writer })
    }

    fn exchange(&mut self, line: &str) -> Result<String, OracleError> {
        self.writer
            .write_all(line.as_bytes())
            .map_err(|e| OracleError::Transport(e.to_string()))?;
        let mut buf = String::new();
        match self.reader.read_line(&mut buf) {
            Ok(0) => Err(OracleError::Transport("connection closed".into())),
            Ok(_) => Ok(buf),
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                Err(OracleError::Timeout)
            }
            Err(e) => Err(OracleError::Transport(e.to_string())),
        }
    }
}

/// Request lines for a conformance run against a server advertising `(m, T)`:
/// the hello frame, ten score requests (one repeated verbatim), a malformed
/// frame and an unsupported operation.
pub fn canned_requests(m: usize, steps: usize) -> Vec<String> {
    let mut lines = vec![encode(&Hello::client())];
    for k in 0..10u64 {
        let src = if k == 9 { 0 } else { k };
        let y: Vec<f64> = (0..m).map(|i| ((src as f64 + 1.0) * 0.37 + i as f64 * 0.91).sin()).collect();
        let t = 1 + (src as usize * 97) % steps.max(1);
        let mut req = ScoreRequest::new(src + 1, "", t, &y);
        if k == 9 {
            req.id = 10;
        }
        lines.push(encode(&req));
    }
    lines.push("{\"id\":11,\"op\":\"score\",\"y\":\n".to_string());
    lines.push(encode(&serde_json::json!({"id": 12, "op": "train"})));
    lines
}

/// Records the server's responses to [`canned_requests`].
pub fn record_transcript(addr: &str, timeout: Duration) -> Result<Vec<TranscriptEntry>, OracleError> {
    let mut session = Session::open(addr, timeout)?;
    let hello_line = session.exchange(&encode(&Hello::client()))?;
    let hello: Hello = serde_json::from_str(hello_line.trim_end())
        .map_err(|e| OracleError::MalformedFrame(e.to_string()))?;
    let (m, steps) = (hello.m.unwrap_or(0), hello.steps.unwrap_or(1));
    let mut out = vec![TranscriptEntry { send: encode(&Hello::client()), expect: hello_line }];
    for line in canned_requests(m, steps).into_iter().skip(1) {
        let resp = session.exchange(&line)?;
        out.push(TranscriptEntry { send: line, expect: resp });
    }
    Ok(out)
}

pub fn write_transcript(path: &Path, entries: &[TranscriptEntry]) -> std::io::Result<()> {
    let body: String = entries.iter().map(encode).collect();
    std::fs::write(path, body)
}

pub fn read_transcript(path: &Path) -> std::io::Result<Vec<TranscriptEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolReport {
    pub addr: String,
    pub m: Option<usize>,
    pub steps: Option<usize>,
    pub checks: Vec<CheckOutcome>,
}

impl ProtocolReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the conformance checks against a live server. With a transcript,
/// every recorded request is replayed and responses must match byte-for-byte.
pub fn protocol_check(addr: &str, transcript: Option<&[TranscriptEntry]>, timeout: Duration) -> ProtocolReport {
    let mut report = ProtocolReport { addr: addr.into(), m: None, steps: None, checks: Vec::new() };
    let checks = run_checks(addr, transcript, timeout, &mut report.m, &mut report.steps);
    report.checks = checks;
    report
}

fn run_checks(
    addr: &str,
    transcript: Option<&[TranscriptEntry]>,
    timeout: Duration,
    shape_m: &mut Option<usize>,
    shape_steps: &mut Option<usize>,
) -> Vec<CheckOutcome> {
    let mut checks = Vec::new();
    let mut check = |name: &str, result: Result<String, String>| {
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        checks.push(CheckOutcome { name: name.into(), passed, detail });
    };
    let mut session = match Session::open(addr, timeout) {
        Ok(s) => s,
        Err(e) => {
            check("connect", Err(e.to_string()));
            return checks;
        }
    };
    if let Some(entries) = transcript {
        for (i, e) in entries.iter().enumerate() {
            let got = session.exchange(&e.send);
            let res = match got {
                Ok(line) if line == e.expect => Ok("identical".into()),
                Ok(line) => Err(format!("expected {:?}, got {:?}", e.expect, line)),
                Err(err) => Err(err.to_string()),
            };
            check(&format!("transcript[{i}]"), res);
        }
        return checks;
    }
    let hello_line = match session.exchange(&encode(&Hello::client())) {
        Ok(l) => l,
        Err(e) => {
            check("hello", Err(e.to_string()));
            return checks;
        }
    };
    let hello = serde_json::from_str::<Hello>(hello_line.trim_end());
    let (m, steps) = match hello {
        Ok(h) if h.op == "hello" && h.version == PROTOCOL_VERSION && h.m.is_some() && h.steps.is_some() => {
            check("hello", Ok(format!("version {} m={:?} T={:?}", h.version, h.m, h.steps)));
            (h.m.unwrap(), h.steps.unwrap())
        }
        Ok(h) => {
            check("hello", Err(format!("unexpected hello {h:?}")));
            return checks;
        }
        Err(e) => {
            check("hello", Err(format!("unparseable hello: {e}")));
            return checks;
        }
    };
    *shape_m = Some(m);
    *shape_steps = Some(steps);
    let requests = canned_requests(m, steps);
    let mut responses = Vec::new();
    for (k, line) in requests.iter().enumerate().skip(1).take(10) {
        let res = session.exchange(line).map_err(|e| e.to_string()).and_then(|resp| {
            let frame = validate_server_frame(&resp, m)?;
            if frame.id != Some(k as u64) {
                return Err(format!("id {:?} does not echo {k}", frame.id));
            }
            if frame.error.is_some() {
                return Err(format!("error frame {resp:?}"));
            }
            responses.push(resp);
            Ok("ok".to_string())
        });
        check(&format!("score[{k}]"), res);
    }
    if responses.len() == 10 {
        let a = &responses[0][responses[0].find(",\"eps\"").unwrap_or(0)..];
        let b = &responses[9][responses[9].find(",\"eps\"").unwrap_or(0)..];
        let res = if a == b { Ok("repeated request answered identically".into()) } else { Err("responses differ".into()) };
        check("determinism", res);
    }
    for (name, line) in [("malformed", &requests[11]), ("unsupported-op", &requests[12])] {
        let res = session.exchange(line).map_err(|e| e.to_string()).and_then(|resp| {
            let frame = validate_server_frame(&resp, m)?;
            if frame.error.is_some() {
                Ok("error frame".to_string())
            } else {
                Err("expected an error frame".to_string())
            }
        });
        check(name, res);
    }
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_frame_layout() {
        let line = encode(&ScoreRequest::new(3, "a man", 7, &[0.1, -2.0]));
        assert_eq!(line, "{\"id\":3,\"op\":\"score\",\"prompt\":\"a man\",\"t\":7,\"y\":[0.1,-2.0]}\n");
        let hello = encode(&Hello::server(3, 1000));
        assert_eq!(hello, "{\"op\":\"hello\",\"version\":1,\"m\":3,\"T\":1000}\n");
    }

    #[test]
    fn error_frame_layout() {
        let line = encode(&ScoreResponse::error(Some(4), "unknown_prompt", "no such prompt"));
        assert_eq!(line, "{\"id\":4,\"error\":{\"code\":\"unknown_prompt\",\"msg\":\"no such prompt\"}}\n");
    }

    #[test]
    fn validation_catches_bad_frames() {
        assert!(validate_server_frame("{\"id\":1,\"eps\":[1.0]}\n", 1).is_ok());
        assert!(validate_server_frame("{\"id\":1,\"eps\":[1.0]}", 1).is_err());
        assert!(validate_server_frame("{\"id\":1,\"eps\":[1.0,2.0]}\n", 1).is_err());
        assert!(validate_server_frame("{\"id\":1}\n", 1).is_err());
        assert!(validate_server_frame("not json\n", 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn vectors_survive_the_wire(y in proptest::collection::vec(-1e300f64..1e300, 1..16), id in 0u64..u64::MAX) {
            let line = encode(&ScoreResponse::ok(id, y.clone()));
            let back = validate_server_frame(&line, y.len()).unwrap();
            proptest::prop_assert_eq!(back.eps.unwrap(), y);
            proptest::prop_assert_eq!(back.id, Some(id));
        }
    }
}
