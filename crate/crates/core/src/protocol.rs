//! Line-delimited JSON protocol for out-of-process content models.
//!
//! Each request is one JSON object on one line; the provider answers with
//! one line. Requests:
//!
//! ```text
//! {"op":"dim"}                                   -> {"dim":64}
//! {"op":"embed","text":"..."}                    -> {"hidden":[[...],...]}
//! {"op":"next_token","prompt":"...","tokens":["0","1"]} -> {"probs":{"0":0.2,"1":0.7}}
//! ```
//!
//! Any request may instead be answered with `{"error":"..."}`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::embed::{Concurrency, EmbeddingProvider, HiddenStates, ModelInput};
use crate::error::{Error, Result};
use crate::riskalign::NextTokenDistributionProvider;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Dim,
    Embed { text: String },
    NextToken { prompt: String, tokens: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Dim { dim: usize },
    Hidden { hidden: HiddenStates },
    Probs { probs: BTreeMap<String, f64> },
    Error { error: String },
}

/// Answers requests from `input` until end of stream. Requests for a
/// capability that is not configured get an error response.
pub fn serve(
    input: impl BufRead,
    mut output: impl Write,
    embedder: Option<&dyn EmbeddingProvider>,
    aligned: Option<&dyn NextTokenDistributionProvider>,
) -> Result<()> {
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Err(e) => Response::Error {
                error: format!("bad request: {e}"),
            },
            Ok(req) => answer(req, embedder, aligned).unwrap_or_else(|e| Response::Error { error: e.to_string() }),
        };
        let text = serde_json::to_string(&response)? + "\n";
        output
            .write_all(text.as_bytes())
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn answer(
    req: Request,
    embedder: Option<&dyn EmbeddingProvider>,
    aligned: Option<&dyn NextTokenDistributionProvider>,
) -> Result<Response> {
    let no = |what: &str| Error::Provider(format!("this provider does not serve {what}"));
    match req {
        Request::Dim => Ok(Response::Dim {
            dim: embedder.ok_or_else(|| no("embeddings"))?.dim()?,
        }),
        Request::Embed { text } => Ok(Response::Hidden {
            hidden: embedder.ok_or_else(|| no("embeddings"))?.embed(&ModelInput::new(text))?,
        }),
        Request::NextToken { prompt, tokens } => {
            let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
            Ok(Response::Probs {
                probs: aligned
                    .ok_or_else(|| no("next-token distributions"))?
                    .next_token_probs(&prompt, &refs)?,
            })
        }
    }
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Client for a provider subprocess speaking the protocol on stdin/stdout.
/// Calls are serialised.
pub struct ExternalProvider {
    pipe: Mutex<Pipe>,
    dim: Mutex<Option<usize>>,
}

impl ExternalProvider {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Provider(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ExternalProvider {
            pipe: Mutex::new(Pipe { child, stdin, stdout }),
            dim: Mutex::new(None),
        })
    }

    pub fn request(&self, req: &Request) -> Result<Response> {
        let mut pipe = self.pipe.lock().map_err(|_| Error::Provider("provider lock poisoned".into()))?;
        let line = serde_json::to_string(req)? + "\n";
        pipe.stdin
            .write_all(line.as_bytes())
            .and_then(|_| pipe.stdin.flush())
            .map_err(|e| Error::Provider(format!("write to provider: {e}")))?;
        let mut reply = String::new();
        let n = pipe
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Provider(format!("read from provider: {e}")))?;
        if n == 0 {
            return Err(Error::Provider("provider closed its output".into()));
        }
        match serde_json::from_str(&reply) {
            Ok(Response::Error { error }) => Err(Error::Provider(error)),
            Ok(r) => Ok(r),
            Err(e) => Err(Error::Provider(format!("malformed response: {e}"))),
        }
    }
}

impl Drop for ExternalProvider {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            let _ = pipe.child.kill();
            let _ = pipe.child.wait();
        }
    }
}

fn unexpected(r: Response) -> Error {
    Error::Provider(format!("unexpected response {r:?}"))
}

impl EmbeddingProvider for ExternalProvider {
    fn embed(&self, input: &ModelInput) -> Result<HiddenStates> {
        match self.request(&Request::Embed {
            text: input.text.clone(),
        })? {
            Response::Hidden { hidden } => Ok(hidden),
            other => Err(unexpected(other)),
        }
    }

    fn dim(&self) -> Result<usize> {
        let mut cached = self.dim.lock().map_err(|_| Error::Provider("provider lock poisoned".into()))?;
        if let Some(d) = *cached {
            return Ok(d);
        }
        match self.request(&Request::Dim)? {
            Response::Dim { dim } => {
                *cached = Some(dim);
                Ok(dim)
            }
            other => Err(unexpected(other)),
        }
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Serial
    }
}

impl NextTokenDistributionProvider for ExternalProvider {
    fn next_token_probs(&self, prompt: &str, tokens: &[&str]) -> Result<BTreeMap<String, f64>> {
        match self.request(&Request::NextToken {
            prompt: prompt.to_string(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
        })? {
            Response::Probs { probs } => Ok(probs),
            other => Err(unexpected(other)),
        }
    }

    fn concurrency(&self) -> Concurrency {
        Concurrency::Serial
    }
}
