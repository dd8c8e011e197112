#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use gradeflow::corpus::Corpus;
use gradeflow::pipeline::load_corpus;
use num::{BigInt, BigRational, Float, One, Signed, ToPrimitive, Zero};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn synthetic() -> Corpus {
    load_corpus(fixture("synthetic.json"), gradeflow::corpus::DatasetTag::Synthetic).unwrap()
}

/// A request as seen by the stub server.
#[derive(Debug, Clone)]
pub struct Seen {
    pub request_line: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Seen {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

/// Minimal HTTP/1.1 server answering each connection with the next canned
/// `(status, body)`; the last one repeats once the list runs out.
pub struct StubServer {
    pub url: String,
    pub seen: Arc<Mutex<Vec<Seen>>>,
}

impl StubServer {
    pub fn start(replies: Vec<(u16, String)>) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&seen);
        std::thread::spawn(move || {
            for (i, stream) in listener.incoming().enumerate() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                let mut headers = Vec::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        headers.push((k.trim().to_string(), v.trim().to_string()));
                    }
                }
                let len: usize = headers
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
                    .and_then(|(_, v)| v.parse().ok())
                    .unwrap_or(0);
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Seen {
                    request_line: request_line.trim_end().to_string(),
                    headers,
                    body: String::from_utf8_lossy(&body).into_owned(),
                });
                let (status, text) = replies[i.min(replies.len() - 1)].clone();
                let response = format!(
                    "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        StubServer { url, seen }
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

pub fn completion(content: &str) -> String {
    serde_json::json!({
        "model": "stub-model",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 5},
    })
    .to_string()
}

/// Exact-arithmetic reference metrics. Every input is scaled by a common
/// power of two to an integer, all sums are exact, and each metric is
/// rounded to `f64` once before its final square root.
pub struct Reference {
    pub mae: f64,
    pub rmse: f64,
    pub nrmse: f64,
    pub pearson: Option<f64>,
}

fn ratio(num: BigInt, den: BigInt) -> f64 {
    BigRational::new(num, den).to_f64().expect("representable")
}

pub fn reference(human: &[f64], predicted: &[f64], full: f64) -> Reference {
    let parts: Vec<(u64, i16)> = human
        .iter()
        .chain(predicted)
        .map(|&x| {
            assert!(x >= 0.0, "scores are non-negative");
            let (m, e, _) = x.integer_decode();
            (m, e)
        })
        .collect();
    let low = parts.iter().filter(|(m, _)| *m != 0).map(|&(_, e)| e).min().unwrap_or(0);
    let ints: Vec<BigInt> = parts.iter().map(|&(m, e)| if m == 0 { BigInt::zero() } else { BigInt::from(m) << (e - low) as usize }).collect();
    let (h, p) = ints.split_at(human.len());
    let n = BigInt::from(human.len());
    let scale = BigInt::one() << (-low).max(0) as usize;
    let up = BigInt::one() << low.max(0) as usize;

    let mut abs = BigInt::zero();
    let mut sq = BigInt::zero();
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (BigInt::zero(), BigInt::zero(), BigInt::zero(), BigInt::zero(), BigInt::zero());
    for (a, b) in h.iter().zip(p) {
        let d = a - b;
        abs += d.abs();
        sq += &d * &d;
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    let mae = ratio(abs * &up, &n * &scale);
    let rmse = ratio(sq * &up * &up, &n * &scale * &scale).sqrt();
    let cov = &n * &sxy - &sx * &sy;
    let vx = &n * &sxx - &sx * &sx;
    let vy = &n * &syy - &sy * &sy;
    let pearson = if human.len() < 2 || vx.is_zero() || vy.is_zero() {
        None
    } else {
        let r2 = ratio(&cov * &cov, vx * vy);
        Some(r2.sqrt().copysign(if cov.is_negative() { -1.0 } else { 1.0 }))
    };
    Reference { mae, rmse, nrmse: rmse / full, pearson }
}
