//! Guidance providers running in another process, spoken to with
//! newline-delimited JSON over a child's stdio or a Unix socket.
//!
//! Request: `{"id", "images": [base64 PFM], "t", "cameras": [[4x4 row-major]]
//! | null, "prompt": {"positive", "negative"}, "cfg_weight"}`.
//! Response: `{"id", "eps_hat": [base64 PFM], "eps_hat_neg"?: [base64 PFM]}` or
//! `{"id", "error"}`. With `eps_hat_neg` present the core applies guidance
//! itself; without it `eps_hat` is taken as already guided.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use hoi_core::guidance::{Capability, GuidanceProvider, GuidanceRequest, NoisePrediction};
use hoi_core::image::Image;
use serde::{Deserialize, Serialize};

use crate::image_io::{decode_pfm, encode_pfm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WirePrompt {
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub images: Vec<String>,
    pub t: f64,
    pub cameras: Option<Vec<[[f64; 4]; 4]>>,
    pub prompt: WirePrompt,
    #[serde(default)]
    pub cfg_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_hat: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_hat_neg: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn encode_image(image: &Image) -> crate::Result<String> {
    Ok(STANDARD.encode(encode_pfm(image)?))
}

pub fn decode_image(text: &str) -> crate::Result<Image> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| crate::error::format_error(format!("bad base64 image: {e}")))?;
    decode_pfm(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Endpoint {
    /// Program and arguments; the provider speaks on its stdin/stdout.
    Command(Vec<String>),
    #[cfg(unix)]
    Socket(PathBuf),
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    child: Option<Child>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn spawn_reader<R: BufRead + Send + 'static>(reader: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in reader.lines() {
            let stop = line.is_err();
            if tx.send(line).is_err() || stop {
                break;
            }
        }
    });
    rx
}

impl Connection {
    fn open(endpoint: &Endpoint) -> std::io::Result<Self> {
        match endpoint {
            Endpoint::Command(argv) => {
                let (program, args) = argv
                    .split_first()
                    .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty provider command"))?;
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped");
                let stdout = child.stdout.take().expect("piped");
                Ok(Self {
                    writer: Box::new(stdin),
                    lines: spawn_reader(BufReader::new(stdout)),
                    child: Some(child),
                })
            }
            #[cfg(unix)]
            Endpoint::Socket(path) => {
                let stream = std::os::unix::net::UnixStream::connect(path)?;
                let reader = stream.try_clone()?;
                Ok(Self {
                    writer: Box::new(stream),
                    lines: spawn_reader(BufReader::new(reader)),
                    child: None,
                })
            }
        }
    }
}

enum Failure {
    Timeout,
    Transport(String),
    Remote(String),
}

/// A provider behind the wire protocol. Timeouts and transport failures are
/// retried `retries` times; error responses are returned at once.
pub struct RemoteProvider {
    endpoint: Option<Endpoint>,
    connection: Option<Connection>,
    capability: Capability,
    timeout: Duration,
    retries: usize,
    next_id: u64,
}

impl RemoteProvider {
    pub fn new(endpoint: Endpoint, capability: Capability, timeout: Duration, retries: usize) -> Self {
        Self {
            endpoint: Some(endpoint),
            connection: None,
            capability,
            timeout,
            retries,
            next_id: 1,
        }
    }

    /// Talks over already-open streams; no reconnection is possible.
    pub fn from_streams<R, W>(reader: R, writer: W, capability: Capability, timeout: Duration, retries: usize) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        Self {
            endpoint: None,
            connection: Some(Connection {
                writer: Box::new(writer),
                lines: spawn_reader(reader),
                child: None,
            }),
            capability,
            timeout,
            retries,
            next_id: 1,
        }
    }

    fn connection(&mut self) -> Result<&mut Connection, Failure> {
        if self.connection.is_none() {
            let endpoint = self
                .endpoint
                .as_ref()
                .ok_or_else(|| Failure::Transport("connection closed".into()))?;
            let c = Connection::open(endpoint).map_err(|e| Failure::Transport(format!("cannot reach provider: {e}")))?;
            self.connection = Some(c);
        }
        Ok(self.connection.as_mut().expect("just opened"))
    }

    fn exchange(&mut self, line: &str, id: u64) -> Result<WireResponse, Failure> {
        let timeout = self.timeout;
        let conn = self.connection()?;
        let sent = conn
            .writer
            .write_all(line.as_bytes())
            .and_then(|_| conn.writer.write_all(b"\n"))
            .and_then(|_| conn.writer.flush());
        if let Err(e) = sent {
            self.connection = None;
            return Err(Failure::Transport(format!("write failed: {e}")));
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let conn = self.connection.as_mut().expect("open");
            match conn.lines.recv_timeout(left) {
                Ok(Ok(text)) => {
                    let Ok(resp) = serde_json::from_str::<WireResponse>(&text) else {
                        return Err(Failure::Remote(format!("malformed response: {}", truncate(&text))));
                    };
                    // answers to requests that already timed out
                    if resp.id.is_some_and(|r| r != id) {
                        continue;
                    }
                    return Ok(resp);
                }
                Ok(Err(e)) => {
                    self.connection = None;
                    return Err(Failure::Transport(format!("read failed: {e}")));
                }
                Err(RecvTimeoutError::Timeout) => return Err(Failure::Timeout),
                Err(RecvTimeoutError::Disconnected) => {
                    self.connection = None;
                    return Err(Failure::Transport("provider closed the connection".into()));
                }
            }
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(120).collect()
}

fn provider_error(message: String, timed_out: bool) -> hoi_core::Error {
    hoi_core::Error::Provider {
        channel: String::new(),
        message,
        timed_out,
    }
}

fn decode_all(list: &[String]) -> hoi_core::Result<Vec<Image>> {
    list.iter()
        .map(|s| decode_image(s).map_err(|e| provider_error(e.to_string(), false)))
        .collect()
}

impl GuidanceProvider for RemoteProvider {
    fn capability(&self) -> Capability {
        self.capability
    }

    fn predict(&mut self, request: &GuidanceRequest<'_>) -> hoi_core::Result<NoisePrediction> {
        let images = request
            .images
            .iter()
            .map(encode_image)
            .collect::<crate::Result<Vec<_>>>()
            .map_err(|e| provider_error(e.to_string(), false))?;
        let mut wire = WireRequest {
            id: 0,
            images,
            t: request.t,
            cameras: request.cameras.map(|cs| cs.iter().map(|c| c.pose_matrix()).collect()),
            prompt: WirePrompt {
                positive: request.prompt.positive.clone(),
                negative: request.prompt.negative.clone(),
            },
            cfg_weight: Some(request.cfg_weight),
        };
        let mut last = String::new();
        let mut timed_out = false;
        for _ in 0..=self.retries {
            wire.id = self.next_id;
            self.next_id += 1;
            let line = serde_json::to_string(&wire).expect("plain data");
            match self.exchange(&line, wire.id) {
                Ok(resp) => {
                    if let Some(e) = resp.error {
                        return Err(provider_error(e, false));
                    }
                    let positive = resp
                        .eps_hat
                        .ok_or_else(|| provider_error("response has neither eps_hat nor error".into(), false))?;
                    let positive = decode_all(&positive)?;
                    let negative = resp.eps_hat_neg.as_deref().map(decode_all).transpose()?;
                    return Ok(NoisePrediction { positive, negative });
                }
                Err(Failure::Remote(m)) => return Err(provider_error(m, false)),
                Err(Failure::Timeout) => {
                    timed_out = true;
                    last = format!("no response within {:?}", self.timeout);
                }
                Err(Failure::Transport(m)) => {
                    timed_out = false;
                    last = m;
                }
            }
        }
        Err(provider_error(last, timed_out))
    }
}

/// Answers every request with its own images as the noise estimate.
/// Malformed requests get an error response; the loop ends at end of input.
pub fn serve_echo<R: BufRead, W: Write>(reader: R, mut writer: W) -> std::io::Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<WireRequest>(&line) {
            Ok(req) => match req.images.iter().map(|s| decode_image(s)).collect::<crate::Result<Vec<_>>>() {
                Ok(_) => WireResponse {
                    id: Some(req.id),
                    eps_hat: Some(req.images),
                    ..Default::default()
                },
                Err(e) => WireResponse {
                    id: Some(req.id),
                    error: Some(e.to_string()),
                    ..Default::default()
                },
            },
            Err(e) => WireResponse {
                id: serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64())),
                error: Some(format!("malformed request: {e}")),
                ..Default::default()
            },
        };
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
