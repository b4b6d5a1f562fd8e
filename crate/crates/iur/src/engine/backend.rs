//! Generation backends: the processes or services that turn prompts into
//! text. A backend is described by a [`BackendSpec`] and driven through
//! [`Backend::generate`], which always returns one result per prompt;
//! transport problems become per-sample errors rather than aborting the
//! batch.
//!
//! Wire protocols:
//!
//! * `command`: the program is spawned once via `sh -c`; it reads
//!   `{"id":…,"prompt":…}` lines on stdin and writes `{"id":…,"output":…}`
//!   lines on stdout, in any order.
//! * `http`: one POST per prompt with body `{"prompt":…}`, expecting a 200
//!   response with body `{"output":…}`; non-200 and transport errors are
//!   retried with exponential backoff.
//! * `gold` / `identity`: fixed per-id outputs supplied at construction
//!   (the gold target or the incomplete utterance), used as oracles.
//! * `empty`: every prompt yields the empty string.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Command,
    Http,
    Gold,
    Identity,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    /// Shell command line (`command`) or URL (`http`); unused otherwise.
    pub endpoint: String,
    /// Per-request timeout for `http`; for `command`, the longest silence
    /// tolerated while awaiting the next reply line.
    pub timeout_ms: u64,
    /// Additional attempts per prompt for `http` backends.
    pub retries: u32,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec {
            kind: BackendKind::Identity,
            endpoint: String::new(),
            timeout_ms: 30_000,
            retries: 2,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BackendSpecError {
    #[error("{kind:?} backend requires a non-empty endpoint")]
    MissingEndpoint { kind: BackendKind },
    #[error("timeout must be positive")]
    ZeroTimeout,
}

impl BackendSpec {
    pub fn command(endpoint: impl Into<String>) -> Self {
        BackendSpec {
            kind: BackendKind::Command,
            endpoint: endpoint.into(),
            ..BackendSpec::default()
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        BackendSpec {
            kind: BackendKind::Http,
            endpoint: endpoint.into(),
            ..BackendSpec::default()
        }
    }

    pub fn gold() -> Self {
        BackendSpec {
            kind: BackendKind::Gold,
            ..BackendSpec::default()
        }
    }

    pub fn identity() -> Self {
        BackendSpec::default()
    }

    pub fn empty() -> Self {
        BackendSpec {
            kind: BackendKind::Empty,
            ..BackendSpec::default()
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    pub fn validate(&self) -> Result<(), BackendSpecError> {
        if matches!(self.kind, BackendKind::Command | BackendKind::Http)
            && self.endpoint.trim().is_empty()
        {
            return Err(BackendSpecError::MissingEndpoint { kind: self.kind });
        }
        if self.timeout_ms == 0 {
            return Err(BackendSpecError::ZeroTimeout);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Invalid(#[from] BackendSpecError),
    #[error("{kind:?} backend needs per-id outputs supplied at construction")]
    MissingFixed { kind: BackendKind },
    #[error("failed to start backend command {command:?}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-sample outcome: the generated text or an error description.
pub type SampleResult = Result<String, String>;

/// A validated backend ready to serve prompts.
#[derive(Debug)]
pub struct Backend<'a> {
    spec: &'a BackendSpec,
    fixed: Option<BTreeMap<String, String>>,
    concurrency: usize,
}

#[derive(Serialize)]
struct CommandRequest<'a> {
    id: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CommandResponse {
    id: String,
    output: String,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    output: String,
}

impl<'a> Backend<'a> {
    /// Validates the spec; `gold` and `identity` kinds additionally need
    /// their fixed per-id outputs.
    pub fn new(
        spec: &'a BackendSpec,
        fixed: Option<BTreeMap<String, String>>,
        concurrency: usize,
    ) -> Result<Backend<'a>, BackendError> {
        spec.validate()?;
        if matches!(spec.kind, BackendKind::Gold | BackendKind::Identity) && fixed.is_none() {
            return Err(BackendError::MissingFixed { kind: spec.kind });
        }
        Ok(Backend {
            spec,
            fixed,
            concurrency: concurrency.max(1),
        })
    }

    /// Generates one output per prompt, keyed by id. The only hard errors
    /// are failures to start a `command` backend; everything else is
    /// recorded per sample.
    pub fn generate(
        &self,
        prompts: &[(String, String)],
    ) -> Result<BTreeMap<String, SampleResult>, BackendError> {
        if prompts.is_empty() {
            return Ok(BTreeMap::new());
        }
        match self.spec.kind {
            BackendKind::Command => self.run_command(prompts),
            BackendKind::Http => Ok(self.run_http(prompts)),
            BackendKind::Gold | BackendKind::Identity => {
                let fixed = self.fixed.as_ref().expect("checked at construction");
                Ok(prompts
                    .iter()
                    .map(|(id, _)| {
                        let out = fixed
                            .get(id)
                            .cloned()
                            .ok_or_else(|| format!("no fixed output for sample {id:?}"));
                        (id.clone(), out)
                    })
                    .collect())
            }
            BackendKind::Empty => Ok(prompts
                .iter()
                .map(|(id, _)| (id.clone(), Ok(String::new())))
                .collect()),
        }
    }

    fn run_command(
        &self,
        prompts: &[(String, String)],
    ) -> Result<BTreeMap<String, SampleResult>, BackendError> {
        let timeout = self.spec.timeout();
        let mut command = Command::new("sh");
        command
            .arg("-c")
            .arg(&self.spec.endpoint)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        #[cfg(unix)]
        {
            // Own process group, so a stalled pipeline can be torn down
            // wholesale; killing just the shell would leave forked
            // children holding the stdout pipe open.
            use std::os::unix::process::CommandExt;
            command.process_group(0);
        }
        let mut child = command.spawn().map_err(|source| BackendError::Spawn {
            command: self.spec.endpoint.clone(),
            source,
        })?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");

        let (mut outputs, note) = thread::scope(|scope| {
            scope.spawn(move || {
                for (id, prompt) in prompts {
                    let request = CommandRequest {
                        id: id.as_str(),
                        prompt: prompt.as_str(),
                    };
                    let line = serde_json::to_string(&request)
                        .expect("request serialization is infallible");
                    if writeln!(stdin, "{line}").is_err() {
                        return;
                    }
                }
                let _ = stdin.flush();
                // Dropping stdin closes the pipe so line-oriented backends
                // see end of input once every prompt is written.
            });
            let (tx, rx) = mpsc::channel();
            scope.spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let stop = line.is_err();
                    if tx.send(line).is_err() || stop {
                        break;
                    }
                }
            });
            let result = collect_replies(prompts, &rx, timeout);
            // Unblocks the reader thread if the backend is still running.
            terminate(&mut child);
            result
        });
        let _ = child.wait();

        for (id, _) in prompts {
            outputs.entry(id.clone()).or_insert_with(|| {
                Err(note
                    .clone()
                    .unwrap_or_else(|| "backend sent no reply for this sample".to_string()))
            });
        }
        Ok(outputs)
    }

    fn run_http(&self, prompts: &[(String, String)]) -> BTreeMap<String, SampleResult> {
        let client = match reqwest::blocking::Client::builder()
            .timeout(self.spec.timeout())
            .build()
        {
            Ok(client) => client,
            Err(e) => {
                let err = format!("failed to build http client: {e}");
                return prompts
                    .iter()
                    .map(|(id, _)| (id.clone(), Err(err.clone())))
                    .collect();
            }
        };
        let slots: Vec<Mutex<Option<SampleResult>>> =
            prompts.iter().map(|_| Mutex::new(None)).collect();
        let cursor = AtomicUsize::new(0);
        let workers = self.concurrency.min(prompts.len());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let idx = cursor.fetch_add(1, Ordering::Relaxed);
                    let Some((_, prompt)) = prompts.get(idx) else {
                        break;
                    };
                    let result =
                        http_request(&client, &self.spec.endpoint, prompt, self.spec.retries);
                    *slots[idx].lock().expect("no panics while holding the slot") = Some(result);
                });
            }
        });
        prompts
            .iter()
            .zip(slots)
            .map(|((id, _), slot)| {
                let result = slot
                    .into_inner()
                    .expect("workers finished")
                    .expect("every index was visited");
                (id.clone(), result)
            })
            .collect()
    }
}

/// Kills the backend and everything it forked.
fn terminate(child: &mut std::process::Child) {
    #[cfg(unix)]
    {
        let pid = child.id() as i32;
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
    }
    let _ = child.kill();
}

/// Reads reply lines until every prompt is answered or the backend stalls:
/// no usable reply for a whole timeout window ends the batch, as does end
/// of output. Returns whatever arrived plus a note describing the stall.
fn collect_replies(
    prompts: &[(String, String)],
    rx: &mpsc::Receiver<std::io::Result<String>>,
    timeout: Duration,
) -> (BTreeMap<String, SampleResult>, Option<String>) {
    let expected: BTreeSet<&str> = prompts.iter().map(|(id, _)| id.as_str()).collect();
    let mut outputs: BTreeMap<String, SampleResult> = BTreeMap::new();
    let mut note = None;
    let mut last_progress = Instant::now();
    while outputs.len() < expected.len() {
        let Some(remaining) = timeout.checked_sub(last_progress.elapsed()) else {
            note = Some(format!(
                "backend made no progress for {}ms",
                timeout.as_millis()
            ));
            break;
        };
        match rx.recv_timeout(remaining) {
            Ok(Ok(line)) => {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CommandResponse>(&line) {
                    Ok(rep) if expected.contains(rep.id.as_str()) => {
                        if !outputs.contains_key(&rep.id) {
                            outputs.insert(rep.id, Ok(rep.output));
                            last_progress = Instant::now();
                        }
                    }
                    Ok(rep) => {
                        note.get_or_insert(format!("backend replied for unknown id {:?}", rep.id));
                    }
                    Err(e) => {
                        note.get_or_insert(format!("malformed backend reply: {e}"));
                    }
                }
            }
            Ok(Err(e)) => {
                note = Some(format!("backend read failed: {e}"));
                break;
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                note = Some(format!(
                    "backend made no progress for {}ms",
                    timeout.as_millis()
                ));
                break;
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                note = Some("backend closed its output".to_string());
                break;
            }
        }
    }
    (outputs, note)
}

fn http_request(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    prompt: &str,
    retries: u32,
) -> SampleResult {
    let mut last = String::new();
    for attempt in 0..=retries {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(50u64 << (attempt - 1).min(6)));
        }
        match client.post(endpoint).json(&HttpRequest { prompt }).send() {
            Ok(resp) if resp.status() == reqwest::StatusCode::OK => {
                match resp.json::<HttpResponse>() {
                    Ok(body) => return Ok(body.output),
                    Err(e) => last = format!("malformed response body: {e}"),
                }
            }
            Ok(resp) => last = format!("http status {}", resp.status()),
            Err(e) => last = e.to_string(),
        }
    }
    Err(last)
}
