mod common;

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use conceptlab::oracle::protocol::{
    protocol_check, read_transcript, validate_server_frame, PROTOCOL_VERSION,
};
use conceptlab::oracle::server::respond;
use conceptlab::oracle::{OracleRequest, ReferenceServer, RemoteOracle, ScoreOracle};
use conceptlab::OracleError;

fn serve(name: &str) -> (ReferenceServer, Arc<conceptlab::oracle::AnalyticOracle>) {
    let oracle = Arc::new(common::oracle(name));
    let server = ReferenceServer::spawn(oracle.clone(), "127.0.0.1:0").unwrap();
    (server, oracle)
}

/// A one-connection fake server; `script` gets the reader and writer after accept.
fn fake<F>(script: F) -> String
where
    F: FnOnce(&mut BufReader<TcpStream>, &mut TcpStream) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut w = stream.try_clone().unwrap();
        let mut r = BufReader::new(stream);
        script(&mut r, &mut w);
    });
    addr
}

fn read_line(r: &mut BufReader<TcpStream>) -> String {
    let mut s = String::new();
    r.read_line(&mut s).unwrap();
    s
}

#[test]
fn loopback_matches_analytic() {
    let (server, oracle) = serve("fixture-a.json");
    let remote = RemoteOracle::connect(&server.addr().to_string()).unwrap().expect_shape(3, 1000).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let prompts = ["", "a man", "a woman", "a crowd", "female", "a male nurse"];
    for _ in 0..50 {
        let y: Vec<f64> = (0..3).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t = rng.random_range(0..=1000);
        let p = prompts[rng.random_range(0..prompts.len())];
        let req = OracleRequest::new(p, &y, t);
        let a = oracle.evaluate(&req).unwrap();
        let b = remote.evaluate(&req).unwrap();
        for (x, v) in a.iter().zip(&b) {
            assert!((x - v).abs() <= 1e-6 * x.abs().max(1.0));
        }
        // Shortest round-trip formatting is exact.
        assert_eq!(a, b);
    }
}

#[test]
fn golden_transcript_replays() {
    let (server, _) = serve("fixture-a.json");
    let transcript = read_transcript(&common::crate_dir().join("tests/data/fixture-a-transcript.jsonl")).unwrap();
    let report = protocol_check(&server.addr().to_string(), Some(&transcript), Duration::from_secs(10));
    assert!(report.passed(), "{report:?}");
    let structural = protocol_check(&server.addr().to_string(), None, Duration::from_secs(10));
    assert!(structural.passed(), "{structural:?}");
}

#[test]
fn protocol_check_flags_a_wrong_server() {
    let (server, _) = serve("interaction-failure.json");
    let transcript = read_transcript(&common::crate_dir().join("tests/data/fixture-a-transcript.jsonl")).unwrap();
    let report = protocol_check(&server.addr().to_string(), Some(&transcript), Duration::from_secs(10));
    assert!(!report.passed());
}

fn garbage(rng: &mut ChaCha20Rng) -> String {
    let pieces = [
        "{", "}", "[", "]", "\"id\"", "\"op\"", "\"score\"", "\"hello\"", "\"y\"", "\"eps\"", ":", ",", "1", "-0.5",
        "1e999", "null", "true", "\"prompt\"", "\"a man\"", "\"t\"", "NaN", "\u{fffd}", " ", "\"error\"", "{\"code\":\"x\"}",
    ];
    let n = rng.random_range(0..12);
    let mut s: String = (0..n).map(|_| pieces[rng.random_range(0..pieces.len())]).collect();
    if rng.random_bool(0.2) {
        s = format!("{{\"id\":{},\"op\":\"score\",\"prompt\":\"a man\",\"t\":{},\"y\":[{}]}}", rng.random::<u32>(), rng.random_range(0..2000), s);
    }
    s.replace('\n', " ")
}

#[test]
fn server_answers_ten_thousand_malformed_frames() {
    let oracle = common::oracle("fixture-a.json");
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    for _ in 0..10_000 {
        let line = garbage(&mut rng);
        let out = respond(&oracle, &line);
        assert!(out.ends_with('\n') && out.matches('\n').count() == 1, "{line:?} -> {out:?}");
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        if v.get("op").is_none() {
            validate_server_frame(&out, 3).unwrap();
        }
    }
}

#[test]
fn server_survives_malformed_frames_on_one_connection() {
    let (server, oracle) = serve("fixture-a.json");
    let stream = TcpStream::connect(server.addr()).unwrap();
    let mut w = stream.try_clone().unwrap();
    let mut r = BufReader::new(stream);
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    for _ in 0..500 {
        w.write_all((garbage(&mut rng) + "\n").as_bytes()).unwrap();
        let line = read_line(&mut r);
        assert!(line.ends_with('\n'));
    }
    w.write_all(b"{\"id\":7,\"op\":\"score\",\"prompt\":\"a man\",\"t\":10,\"y\":[0.5,0.25,-1.0]}\n").unwrap();
    let resp = validate_server_frame(&read_line(&mut r), 3).unwrap();
    let want = oracle.evaluate(&OracleRequest::new("a man", &[0.5, 0.25, -1.0], 10)).unwrap();
    assert_eq!(resp.eps.unwrap(), want);
}

#[test]
fn client_rejects_malformed_responses_without_panicking() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let replies: Vec<String> = (0..2000).map(|_| garbage(&mut rng)).collect();
    let n = replies.len();
    let addr = fake(move |r, w| {
        w.write_all(b"{\"op\":\"hello\",\"version\":1,\"m\":3,\"T\":1000}\n").ok();
        read_line(r);
        for reply in replies {
            if read_line(r).is_empty() {
                return;
            }
            if w.write_all((reply + "\n").as_bytes()).is_err() {
                return;
            }
        }
    });
    let client = RemoteOracle::connect(&addr).unwrap();
    let mut errors = 0;
    for _ in 0..n {
        match client.evaluate(&OracleRequest::new("a man", &[0.0; 3], 5)) {
            Ok(eps) => assert_eq!(eps.len(), 3),
            Err(e) => {
                errors += 1;
                if matches!(e, OracleError::Transport(_)) {
                    break;
                }
            }
        }
    }
    assert!(errors > 0);
}

#[test]
fn request_errors_map_to_typed_errors() {
    let (server, _) = serve("fixture-a.json");
    let remote = RemoteOracle::connect(&server.addr().to_string()).unwrap();
    let e = remote.evaluate(&OracleRequest::new("a unicorn", &[0.0; 3], 5)).unwrap_err();
    assert_eq!(e, OracleError::UnknownPrompt("a unicorn".into()));
    assert!(!e.is_transport());
    let e = remote.evaluate(&OracleRequest::new("a man", &[0.0; 3], 5000)).unwrap_err();
    assert!(matches!(&e, OracleError::Remote { code, .. } if code == "timestep_out_of_range"), "{e:?}");
    let e = remote.evaluate(&OracleRequest::new("a man", &[0.0; 2], 5)).unwrap_err();
    assert_eq!(e, OracleError::DimensionMismatch { expected: 3, got: 2 });
    // The connection is still usable.
    assert!(remote.evaluate(&OracleRequest::new("a man", &[0.0; 3], 5)).is_ok());
}

#[test]
fn version_and_shape_mismatch() {
    let addr = fake(|r, w| {
        read_line(r);
        w.write_all(format!("{{\"op\":\"hello\",\"version\":{},\"m\":3,\"T\":1000}}\n", PROTOCOL_VERSION + 1).as_bytes()).ok();
    });
    match RemoteOracle::connect(&addr) {
        Err(OracleError::VersionMismatch { expected, got }) => assert_eq!((expected, got), (PROTOCOL_VERSION, PROTOCOL_VERSION + 1)),
        Err(e) => panic!("unexpected {e:?}"),
        Ok(_) => panic!("connected across versions"),
    }
    let (server, _) = serve("fixture-a.json");
    let addr = server.addr().to_string();
    assert!(matches!(
        RemoteOracle::connect(&addr).unwrap().expect_shape(4, 1000),
        Err(OracleError::DimensionMismatch { expected: 4, got: 3 })
    ));
    assert!(RemoteOracle::connect(&addr).unwrap().expect_shape(3, 500).is_err());
}

#[test]
fn server_closing_mid_request_is_a_transport_error() {
    let addr = fake(|r, w| {
        w.write_all(b"{\"op\":\"hello\",\"version\":1,\"m\":3,\"T\":1000}\n").ok();
        read_line(r);
        read_line(r);
        w.write_all(b"{\"id\":1,\"eps\":[0.1,").ok();
    });
    let client = RemoteOracle::connect(&addr).unwrap();
    let e = client.evaluate(&OracleRequest::new("a man", &[0.0; 3], 5)).unwrap_err();
    assert!(e.is_transport(), "{e:?}");
    let again = client.evaluate(&OracleRequest::new("a man", &[0.0; 3], 5)).unwrap_err();
    assert!(matches!(again, OracleError::Transport(_)));
}

#[test]
fn silent_server_times_out() {
    let addr = fake(|r, w| {
        w.write_all(b"{\"op\":\"hello\",\"version\":1,\"m\":3,\"T\":1000}\n").ok();
        read_line(r);
        read_line(r);
        thread::sleep(Duration::from_secs(2));
    });
    let client = RemoteOracle::connect_with_timeout(&addr, Duration::from_millis(200)).unwrap();
    let e = client.evaluate(&OracleRequest::new("a man", &[0.0; 3], 5)).unwrap_err();
    assert_eq!(e, OracleError::Timeout);
}
