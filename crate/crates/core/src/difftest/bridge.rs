//! Out-of-process backends over a framed stdio protocol.
//!
//! Each message is a header line `LFB/1 <len>\n` followed by `<len>` bytes
//! of JSON. Requests carry an `op` (`hello`, `build`, `execute`,
//! `shutdown`); responses carry a `status` (`ok`, `build_failure`,
//! `run_failure`, `error`). Models travel as model-exchange documents and
//! tensors as binary sidecar files, both referenced by path.

use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::graph::sidecar::{self, SidecarKey};
use crate::graph::{load_model, materialize_weights, save_model, ModelGraph};
use crate::registry::Registry;
use crate::tensor::ValueTensor;

use super::{Backend, Execution, Failure, Handle};

pub const FRAME_TAG: &str = "LFB/1";
pub const PROTOCOL_VERSION: u32 = 1;
/// Frames above this size are rejected as corrupt.
pub const MAX_FRAME: usize = 64 << 20;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("malformed frame header `{0}`")]
    Header(String),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("frame body is not utf-8")]
    Encoding,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_frame<W: Write>(w: &mut W, body: &str) -> io::Result<()> {
    write!(w, "{FRAME_TAG} {}\n", body.len())?;
    w.write_all(body.as_bytes())?;
    w.flush()
}

/// Reads one frame body. `Ok(None)` on a clean end of stream.
pub fn read_frame<R: BufRead>(r: &mut R) -> Result<Option<String>, FrameError> {
    let mut header = String::new();
    if r.read_line(&mut header)? == 0 {
        return Ok(None);
    }
    let line = header.trim_end_matches(['\n', '\r']);
    let len = line
        .strip_prefix(FRAME_TAG)
        .and_then(|rest| rest.strip_prefix(' '))
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| FrameError::Header(line.chars().take(64).collect()))?;
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    String::from_utf8(body).map(Some).map_err(|_| FrameError::Encoding)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello { version: u32 },
    Build { model_path: PathBuf },
    Execute { handle: u64, inputs_path: PathBuf, outputs_path: PathBuf },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub handle: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

impl Response {
    fn ok() -> Self {
        Response {
            status: "ok".into(),
            ..Default::default()
        }
    }

    fn with_trace(status: &str, trace: impl Into<String>) -> Self {
        Response {
            status: status.into(),
            trace: Some(trace.into()),
            ..Default::default()
        }
    }
}

fn send<W: Write>(w: &mut W, resp: &Response) -> io::Result<()> {
    write_frame(w, &serde_json::to_string(resp).expect("response serializes"))
}

fn read_tensors(path: &Path) -> Result<Vec<(SidecarKey, ValueTensor)>, String> {
    sidecar::read_file(path).map_err(|e| e.to_string())
}

/// Serves `backend` over the protocol until `shutdown` or end of input.
/// Unknown ops and corrupt frames get an `error` response and the loop
/// continues.
pub fn serve<R: BufRead, W: Write>(
    backend: &mut dyn Backend,
    registry: &Registry,
    mut reader: R,
    mut writer: W,
) -> io::Result<()> {
    loop {
        let body = match read_frame(&mut reader) {
            Ok(Some(b)) => b,
            Ok(None) => return Ok(()),
            Err(FrameError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(FrameError::Io(e)) => return Err(e),
            Err(e) => {
                send(&mut writer, &Response::with_trace("error", e.to_string()))?;
                continue;
            }
        };
        let req: Request = match serde_json::from_str(&body) {
            Ok(r) => r,
            Err(e) => {
                send(&mut writer, &Response::with_trace("error", format!("bad request: {e}")))?;
                continue;
            }
        };
        let resp = match req {
            Request::Hello { version } if version != PROTOCOL_VERSION => {
                Response::with_trace("error", format!("unsupported protocol version {version}"))
            }
            Request::Hello { .. } => Response {
                version: Some(PROTOCOL_VERSION),
                backend: Some(backend.id()),
                ..Response::ok()
            },
            Request::Build { model_path } => match load_model(&model_path, registry) {
                Err(e) => Response::with_trace("build_failure", format!("model load: {e}")),
                Ok(g) => match backend.build(&g) {
                    Ok(h) => Response {
                        handle: Some(h.0),
                        ..Response::ok()
                    },
                    Err(f) => Response::with_trace("build_failure", f.trace),
                },
            },
            Request::Execute {
                handle,
                inputs_path,
                outputs_path,
            } => match read_tensors(&inputs_path) {
                Err(e) => Response::with_trace("run_failure", format!("inputs: {e}")),
                Ok(entries) => {
                    let mut inputs: Vec<(usize, ValueTensor)> = entries
                        .into_iter()
                        .filter_map(|(k, t)| match k {
                            SidecarKey::Input(i) => Some((i, t)),
                            _ => None,
                        })
                        .collect();
                    inputs.sort_by_key(|(i, _)| *i);
                    let inputs: Vec<ValueTensor> = inputs.into_iter().map(|(_, t)| t).collect();
                    match backend.execute(Handle(handle), &inputs) {
                        Err(f) => Response::with_trace("run_failure", f.trace),
                        Ok(exec) => {
                            let entries: Vec<_> = exec
                                .outputs
                                .into_iter()
                                .enumerate()
                                .map(|(i, t)| (SidecarKey::Output(i), t))
                                .collect();
                            match sidecar::write_file(&outputs_path, &entries) {
                                Ok(()) => Response {
                                    behavior: Some(Vec::new()),
                                    ..Response::ok()
                                },
                                Err(e) => Response::with_trace("run_failure", format!("outputs: {e}")),
                            }
                        }
                    }
                }
            },
            Request::Shutdown => {
                send(&mut writer, &Response::ok())?;
                return Ok(());
            }
        };
        send(&mut writer, &resp)?;
    }
}

/// Client side: a backend living in a child process.
pub struct BridgeBackend {
    id: String,
    registry: Registry,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    dir: tempfile::TempDir,
    counter: u64,
    program: PathBuf,
    args: Vec<String>,
    /// Set when the child stopped answering; the next build respawns it.
    lost: bool,
}

impl BridgeBackend {
    /// Spawns `program args...` and performs the `hello` handshake.
    pub fn spawn(id: &str, program: &Path, args: &[String], registry: Registry) -> Result<Self, Failure> {
        let (child, stdin, stdout) = launch(program, args)?;
        let dir = tempfile::tempdir().map_err(|e| Failure::build(format!("bridge: tempdir: {e}")))?;
        let mut b = BridgeBackend {
            id: id.to_string(),
            registry,
            child,
            stdin,
            stdout,
            dir,
            counter: 0,
            program: program.to_path_buf(),
            args: args.to_vec(),
            lost: false,
        };
        b.handshake()?;
        Ok(b)
    }

    fn handshake(&mut self) -> Result<(), Failure> {
        let resp = self.call(&Request::Hello {
            version: PROTOCOL_VERSION,
        })?;
        if resp.status != "ok" {
            return Err(Failure::build(format!("bridge: handshake refused: {:?}", resp.trace)));
        }
        Ok(())
    }

    /// Replaces a dead child with a fresh one.
    fn respawn(&mut self) -> Result<(), Failure> {
        let _ = self.child.kill();
        let _ = self.child.wait();
        let (child, stdin, stdout) = launch(&self.program, &self.args)?;
        self.child = child;
        self.stdin = stdin;
        self.stdout = stdout;
        self.lost = false;
        self.handshake()
    }

    /// Sends a raw request body and returns the raw response body.
    pub fn call_raw(&mut self, body: &str) -> Result<String, Failure> {
        let r = self.exchange(body);
        if r.is_err() {
            self.lost = true;
        }
        r
    }

    fn exchange(&mut self, body: &str) -> Result<String, Failure> {
        let lost = |e: &dyn std::fmt::Display| Failure::run(format!("bridge: backend process lost: {e}"));
        write_frame(&mut self.stdin, body).map_err(|e| lost(&e))?;
        match read_frame(&mut self.stdout) {
            Ok(Some(b)) => Ok(b),
            Ok(None) => Err(Failure::run("bridge: backend process exited")),
            Err(e) => Err(lost(&e)),
        }
    }

    fn call(&mut self, req: &Request) -> Result<Response, Failure> {
        let body = self.call_raw(&serde_json::to_string(req).expect("request serializes"))?;
        serde_json::from_str(&body).map_err(|e| Failure::run(format!("bridge: bad response: {e}")))
    }

    fn scratch(&mut self, stem: &str, ext: &str) -> PathBuf {
        self.counter += 1;
        self.dir.path().join(format!("{stem}-{}.{ext}", self.counter))
    }
}

impl Backend for BridgeBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn build(&mut self, graph: &ModelGraph) -> Result<Handle, Failure> {
        if self.lost {
            self.respawn()?;
        }
        // Ship our weights so every backend computes the same function.
        let mut g = graph.clone();
        for id in g.nodes.keys().copied().collect::<Vec<_>>() {
            for (slot, t) in materialize_weights(graph, id).into_iter().enumerate() {
                g.explicit_weights.insert((id, slot), t);
            }
        }
        let path = self.scratch("model", "json");
        save_model(&g, &self.registry, &path).map_err(|e| Failure::build(format!("bridge: save model: {e}")))?;
        let resp = self.call(&Request::Build { model_path: path })?;
        match (resp.status.as_str(), resp.handle) {
            ("ok", Some(h)) => Ok(Handle(h)),
            _ => Err(Failure::build(resp.trace.unwrap_or_else(|| resp.status.clone()))),
        }
    }

    fn execute(&mut self, handle: Handle, inputs: &[ValueTensor]) -> Result<Execution, Failure> {
        let inputs_path = self.scratch("inputs", "lfts");
        let outputs_path = self.scratch("outputs", "lfts");
        let entries: Vec<_> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| (SidecarKey::Input(i), t.clone()))
            .collect();
        sidecar::write_file(&inputs_path, &entries).map_err(|e| Failure::run(format!("bridge: write inputs: {e}")))?;
        let resp = self.call(&Request::Execute {
            handle: handle.0,
            inputs_path,
            outputs_path: outputs_path.clone(),
        })?;
        if resp.status != "ok" {
            return Err(Failure::run(resp.trace.unwrap_or(resp.status)));
        }
        let mut outs: Vec<(usize, ValueTensor)> = read_tensors(&outputs_path)
            .map_err(|e| Failure::run(format!("bridge: read outputs: {e}")))?
            .into_iter()
            .filter_map(|(k, t)| match k {
                SidecarKey::Output(i) => Some((i, t)),
                _ => None,
            })
            .collect();
        outs.sort_by_key(|(i, _)| *i);
        Ok(Execution {
            outputs: outs.into_iter().map(|(_, t)| t).collect(),
            behavior: Default::default(),
            work: 0,
        })
    }
}

impl Drop for BridgeBackend {
    fn drop(&mut self) {
        if self.lost {
            let _ = self.child.kill();
        } else {
            let _ = self.call(&Request::Shutdown);
        }
        let _ = self.child.wait();
    }
}

fn launch(program: &Path, args: &[String]) -> Result<(Child, ChildStdin, BufReader<ChildStdout>), Failure> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| Failure::build(format!("bridge: spawn {}: {e}", program.display())))?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
    Ok((child, stdin, stdout))
}
