//! Adapter for externally hosted models speaking a small JSON protocol, either
//! over a subprocess's stdin/stdout (one object per line) or HTTP
//! `POST /logprobs`.
//!
//! Request:  `{"version":1,"id":7,"context":[..],"allowed":[..]|null}`
//! Response: `{"version":1,"id":7,"logprobs":[[token,lp],..],"tail_logmass":lp|null}`
//!
//! A response may list only some tokens; `tail_logmass` is then the log of the
//! probability mass spread evenly over the unlisted ones.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{logsumexp, LanguageModel, LmError};
use crate::tokenization::TokenId;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub context: Vec<TokenId>,
    #[serde(default)]
    pub allowed: Option<Vec<TokenId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmResponse {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub logprobs: Vec<(TokenId, f64)>,
    #[serde(default)]
    pub tail_logmass: Option<f64>,
}

/// Expands a sparse response into a full log-probability vector and
/// renormalizes it to sum to one.
pub fn densify(vocab_size: usize, resp: &LmResponse) -> Result<Vec<f64>, LmError> {
    if resp.version != PROTOCOL_VERSION {
        return Err(LmError::Shape(format!("unsupported protocol version {}", resp.version)));
    }
    let mut out = vec![f64::NAN; vocab_size];
    for &(t, lp) in &resp.logprobs {
        let slot = out
            .get_mut(t as usize)
            .ok_or_else(|| LmError::Shape(format!("token {t} outside vocabulary of {vocab_size}")))?;
        if !slot.is_nan() {
            return Err(LmError::Shape(format!("token {t} listed twice")));
        }
        if lp.is_nan() || lp == f64::INFINITY {
            return Err(LmError::Shape(format!("invalid log-prob {lp} for token {t}")));
        }
        *slot = lp;
    }
    let missing = vocab_size - resp.logprobs.len();
    let tail = resp.tail_logmass.unwrap_or(f64::NEG_INFINITY);
    if tail.is_nan() || tail > 1e-9 {
        return Err(LmError::Shape(format!("invalid tail_logmass {tail}")));
    }
    if missing > 0 {
        let each = tail - (missing as f64).ln();
        for slot in out.iter_mut().filter(|x| x.is_nan()) {
            *slot = each;
        }
    }
    let norm = logsumexp(&out);
    if !norm.is_finite() {
        return Err(LmError::Shape("response carries no probability mass".into()));
    }
    for x in &mut out {
        *x -= norm;
    }
    Ok(out)
}

enum Transport {
    Subprocess(Mutex<Subprocess>),
    Http { agent: ureq::Agent, url: String },
}

struct Subprocess {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Drop for Subprocess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ExternalLm {
    vocab_size: usize,
    transport: Transport,
    timeout: Duration,
    max_retries: usize,
    descriptor: String,
    next_id: AtomicU64,
}

impl std::fmt::Debug for ExternalLm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalLm")
            .field("descriptor", &self.descriptor)
            .field("vocab_size", &self.vocab_size)
            .finish()
    }
}

impl ExternalLm {
    /// Spawns `command` through `sh -c` and talks to it line by line.
    pub fn subprocess(command: &str, vocab_size: usize, timeout: Duration) -> Result<Self, LmError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| LmError::Transport(format!("spawn {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(ExternalLm {
            vocab_size,
            transport: Transport::Subprocess(Mutex::new(Subprocess {
                child,
                stdin,
                lines: rx,
            })),
            timeout,
            max_retries: 2,
            descriptor: format!("cmd:{command}"),
            next_id: AtomicU64::new(0),
        })
    }

    /// Talks to `url`; `/logprobs` is appended unless already present.
    pub fn http(url: &str, vocab_size: usize, timeout: Duration) -> Self {
        let url = if url.trim_end_matches('/').ends_with("/logprobs") {
            url.to_string()
        } else {
            format!("{}/logprobs", url.trim_end_matches('/'))
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        ExternalLm {
            vocab_size,
            descriptor: url.clone(),
            transport: Transport::Http { agent, url },
            timeout,
            max_retries: 2,
            next_id: AtomicU64::new(0),
        }
    }

    pub fn with_max_retries(mut self, retries: usize) -> Self {
        self.max_retries = retries;
        self
    }

    fn request(&self, context: &[TokenId], allowed: Option<&[TokenId]>) -> Result<Vec<f64>, LmError> {
        if let Some(&bad) = context.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(LmError::BadContext(bad));
        }
        let mut attempt = 0;
        loop {
            let req = LmRequest {
                version: PROTOCOL_VERSION,
                id: Some(self.next_id.fetch_add(1, Ordering::Relaxed)),
                context: context.to_vec(),
                allowed: allowed.map(<[TokenId]>::to_vec),
            };
            match self.exchange(&req).and_then(|resp| densify(self.vocab_size, &resp)) {
                Err(e) if e.is_retriable() && attempt < self.max_retries => attempt += 1,
                other => return other,
            }
        }
    }

    fn exchange(&self, req: &LmRequest) -> Result<LmResponse, LmError> {
        match &self.transport {
            Transport::Http { agent, url } => {
                let mut resp = agent.post(url).send_json(req).map_err(|e| match e {
                    ureq::Error::Timeout(_) => LmError::Timeout(self.timeout),
                    other => LmError::Transport(other.to_string()),
                })?;
                resp.body_mut()
                    .read_json::<LmResponse>()
                    .map_err(|e| LmError::Shape(e.to_string()))
            }
            Transport::Subprocess(proc) => {
                let mut proc = proc.lock().unwrap_or_else(|p| p.into_inner());
                let line = serde_json::to_string(req).expect("request serializes");
                writeln!(proc.stdin, "{line}")
                    .and_then(|_| proc.stdin.flush())
                    .map_err(|e| LmError::Transport(e.to_string()))?;
                let deadline = Instant::now() + self.timeout;
                loop {
                    let left = deadline.saturating_duration_since(Instant::now());
                    let line = match proc.lines.recv_timeout(left) {
                        Ok(line) => line,
                        Err(RecvTimeoutError::Timeout) => return Err(LmError::Timeout(self.timeout)),
                        Err(RecvTimeoutError::Disconnected) => {
                            return Err(LmError::Transport("model process exited".into()))
                        }
                    };
                    let resp: LmResponse =
                        serde_json::from_str(&line).map_err(|e| LmError::Shape(e.to_string()))?;
                    // Late answers to requests that already timed out are skipped.
                    if resp.id.is_none() || resp.id == req.id {
                        return Ok(resp);
                    }
                }
            }
        }
    }
}

impl LanguageModel for ExternalLm {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        self.request(context, None)
    }

    fn token_logprobs(&self, context: &[TokenId], tokens: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let all = self.request(context, Some(tokens))?;
        tokens
            .iter()
            .map(|&t| {
                all.get(t as usize)
                    .copied()
                    .ok_or_else(|| LmError::Shape(format!("token {t} outside vocabulary")))
            })
            .collect()
    }

    fn descriptor(&self) -> String {
        self.descriptor.clone()
    }
}
