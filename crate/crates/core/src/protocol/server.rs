use std::fs;
use std::io::{self, BufRead, Write};
use std::net::TcpListener;
use std::thread;

use base64::Engine as _;
use serde::Serialize;
use serde_json::Value;

use super::{body_from_error, DistOk, EmbedOk, HandshakeOk, RegisterOk, Reply, Request, ScoresOk, TopkOk, Transport};
use crate::backend::{CandidateText, ScorerBackend, PROTOCOL_VERSION};
use crate::control::ControlTask;
use crate::error::ScorerError;
use crate::json;
use crate::synthetic::SyntheticBackend;
use crate::vocab::TokenId;

/// Reference protocol server hosting a [`SyntheticBackend`].
#[derive(Debug, Clone)]
pub struct SyntheticServer {
    backend: SyntheticBackend,
}

fn bad(msg: impl Into<String>) -> ScorerError {
    ScorerError::Protocol(msg.into())
}

fn ok_value<T: Serialize>(v: T) -> Result<Value, ScorerError> {
    serde_json::to_value(v).map_err(|e| ScorerError::Remote {
        code: "internal".into(),
        message: e.to_string(),
    })
}

impl SyntheticServer {
    pub fn new(backend: SyntheticBackend) -> Self {
        SyntheticServer { backend }
    }

    pub fn backend(&self) -> &SyntheticBackend {
        &self.backend
    }

    /// Answers one request line. Malformed input yields an error reply,
    /// never a panic.
    pub fn handle_line(&mut self, line: &str) -> String {
        let raw: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return self.reply(None, Err(bad(format!("invalid JSON: {e}")))),
        };
        let id = raw.get("id").and_then(Value::as_u64);
        let op = raw.get("op").and_then(Value::as_str).map(str::to_string);
        let result = match serde_json::from_value::<Request>(raw) {
            Ok(req) => self.dispatch(req),
            Err(e) => match op.as_deref() {
                Some(
                    "handshake" | "register_image" | "mlm_topk" | "mlm_dist" | "match" | "control" | "embed",
                ) => Err(bad(format!("malformed request: {e}"))),
                Some(other) => Err(ScorerError::Remote {
                    code: "unknown_op".into(),
                    message: format!("unknown op {other:?}"),
                }),
                None => Err(bad("request has no op")),
            },
        };
        self.reply(id, result)
    }

    fn reply(&self, id: Option<u64>, result: Result<Value, ScorerError>) -> String {
        let reply = match result {
            Ok(v) => Reply {
                id,
                ok: Some(v),
                error: None,
            },
            Err(e) => Reply {
                id,
                ok: None,
                error: Some(body_from_error(&e)),
            },
        };
        json::to_line(&reply).unwrap_or_else(|_| r#"{"error":{"code":"internal","message":"encoding failed"},"id":null}"#.into())
    }

    fn texts(&self, texts: Vec<String>, ids: Vec<Vec<TokenId>>) -> Result<Vec<CandidateText>, ScorerError> {
        if texts.len() != ids.len() {
            return Err(bad("texts and token_ids differ in length"));
        }
        let v = self.backend.vocabulary().size();
        if ids.iter().flatten().any(|&t| t as usize >= v) {
            return Err(bad("token id outside the vocabulary"));
        }
        Ok(texts
            .into_iter()
            .zip(ids)
            .map(|(text, token_ids)| CandidateText { token_ids, text })
            .collect())
    }

    fn check_tokens(&self, tokens: &[TokenId], mask_pos: usize) -> Result<(), ScorerError> {
        let v = self.backend.vocabulary().size();
        if tokens.iter().any(|&t| t as usize >= v) {
            return Err(bad("token id outside the vocabulary"));
        }
        if mask_pos >= tokens.len() {
            return Err(bad(format!("mask_pos {mask_pos} outside {} tokens", tokens.len())));
        }
        Ok(())
    }

    fn dispatch(&mut self, req: Request) -> Result<Value, ScorerError> {
        match req {
            Request::Handshake { protocol_version, .. } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(ScorerError::Remote {
                        code: "version_mismatch".into(),
                        message: format!("server protocol version {PROTOCOL_VERSION}"),
                    });
                }
                ok_value(HandshakeOk {
                    manifest: self.backend.manifest(),
                    vocabulary: self.backend.vocabulary().clone(),
                })
            }
            Request::RegisterImage { bytes_b64, path, .. } => {
                let bytes = match (bytes_b64, path) {
                    (Some(b), None) => base64::engine::general_purpose::STANDARD
                        .decode(b)
                        .map_err(|e| ScorerError::ImageDecode(e.to_string()))?,
                    (None, Some(p)) => fs::read(&p).map_err(|e| ScorerError::ImageDecode(format!("{p}: {e}")))?,
                    _ => return Err(bad("register_image needs exactly one of bytes_b64 and path")),
                };
                let handle = self.backend.register_image(&bytes)?;
                ok_value(RegisterOk { handle })
            }
            Request::MlmTopk { tokens, mask_pos, k, .. } => {
                self.check_tokens(&tokens, mask_pos)?;
                if k == 0 {
                    return Err(bad("k must be positive"));
                }
                let pairs = self.backend.mlm_topk(&tokens, mask_pos, k)?;
                let (token_ids, probs) = pairs.into_iter().unzip();
                ok_value(TopkOk { token_ids, probs })
            }
            Request::MlmDist { tokens, mask_pos, .. } => {
                self.check_tokens(&tokens, mask_pos)?;
                ok_value(DistOk {
                    probs: self.backend.mlm_distribution(&tokens, mask_pos)?,
                })
            }
            Request::Match {
                image, texts, token_ids, ..
            } => {
                let texts = self.texts(texts, token_ids)?;
                let scores = self.backend.match_with(&image, &texts)?;
                ok_value(ScoresOk {
                    truncated: vec![false; scores.len()],
                    scores: scores.into_iter().map(Some).collect(),
                })
            }
            Request::Control {
                task,
                position,
                texts,
                token_ids,
                ..
            } => {
                let task = ControlTask::parse_flag(&task).map_err(|e| bad(e.to_string()))?;
                let texts = self.texts(texts, token_ids)?;
                let scores = self.backend.control_scores(&task, position, &texts)?;
                ok_value(ScoresOk {
                    truncated: vec![false; scores.len()],
                    scores: scores.into_iter().map(|s| s.is_finite().then_some(s)).collect(),
                })
            }
            Request::Embed { texts, .. } => ok_value(EmbedOk {
                vectors: self.backend.embed(&texts)?,
            }),
        }
    }

    /// Serves requests line by line until the reader is exhausted.
    pub fn serve<R: BufRead, W: Write>(&mut self, reader: R, mut writer: W) -> io::Result<()> {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let reply = self.handle_line(&line);
            writer.write_all(reply.as_bytes())?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        Ok(())
    }

    /// Accepts connections forever, one thread and one server copy each.
    pub fn serve_tcp(&self, listener: TcpListener) -> io::Result<()> {
        for stream in listener.incoming() {
            let stream = stream?;
            if let Err(e) = stream.set_nodelay(true) {
                log::debug!("set_nodelay failed: {e}");
            }
            let mut server = self.clone();
            thread::spawn(move || {
                let reader = match stream.try_clone() {
                    Ok(s) => io::BufReader::new(s),
                    Err(e) => {
                        log::warn!("connection setup failed: {e}");
                        return;
                    }
                };
                if let Err(e) = server.serve(reader, stream) {
                    log::debug!("connection closed: {e}");
                }
            });
        }
        Ok(())
    }
}

/// In-process transport answering through a [`SyntheticServer`].
#[derive(Debug, Clone)]
pub struct LoopbackTransport {
    server: SyntheticServer,
    pending: Option<String>,
}

impl LoopbackTransport {
    pub fn new(server: SyntheticServer) -> Self {
        LoopbackTransport { server, pending: None }
    }
}

impl Transport for LoopbackTransport {
    fn send(&mut self, line: &str) -> Result<(), ScorerError> {
        if self.pending.is_some() {
            return Err(ScorerError::Transport("request sent before the previous reply was read".into()));
        }
        self.pending = Some(self.server.handle_line(line));
        Ok(())
    }

    fn recv(&mut self) -> Result<String, ScorerError> {
        self.pending
            .take()
            .ok_or_else(|| ScorerError::Transport("no request outstanding".into()))
    }

    fn reconnect(&mut self) -> Result<(), ScorerError> {
        self.pending = None;
        Ok(())
    }
}
