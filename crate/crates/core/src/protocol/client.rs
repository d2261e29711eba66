use std::thread;
use std::time::Duration;

use base64::Engine as _;
use serde::de::DeserializeOwned;

use super::{error_from_body, DistOk, EmbedOk, HandshakeOk, RegisterOk, Reply, Request, ScoresOk, TopkOk, Transport};
use crate::backend::{BackendManifest, CandidateText, ScorerBackend, PROTOCOL_VERSION};
use crate::control::ControlTask;
use crate::error::ScorerError;
use crate::json;
use crate::vocab::{TokenId, Vocabulary};

const MAX_RETRIES: u32 = 2;

enum ImageSource {
    Bytes(Vec<u8>),
    Path(String),
}

/// [`ScorerBackend`] that forwards every call to a protocol server.
pub struct RemoteBackend<T> {
    transport: T,
    next_id: u64,
    manifest: BackendManifest,
    vocab: Vocabulary,
    image: Option<(ImageSource, String)>,
    backoff: Duration,
}

fn protocol(msg: impl Into<String>) -> ScorerError {
    ScorerError::Protocol(msg.into())
}

impl<T: Transport> RemoteBackend<T> {
    /// Performs the handshake and checks the protocol version and manifest.
    pub fn connect(mut transport: T) -> Result<Self, ScorerError> {
        let mut next_id = 0;
        let hs = handshake(&mut transport, &mut next_id)?;
        Ok(RemoteBackend {
            transport,
            next_id,
            manifest: hs.manifest,
            vocab: hs.vocabulary,
            image: None,
            backoff: Duration::from_millis(100),
        })
    }

    /// Base delay between retries; doubles on each attempt.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    /// Uploads image bytes and makes the returned handle active.
    pub fn register_image(&mut self, bytes: &[u8]) -> Result<String, ScorerError> {
        let source = ImageSource::Bytes(bytes.to_vec());
        let handle = self.call_with_retry(|id, _| register_request(id, &source), parse_register)?;
        self.image = Some((source, handle.clone()));
        Ok(handle)
    }

    /// Asks the server to read the image from a path on its own filesystem.
    pub fn register_image_path(&mut self, path: &str) -> Result<String, ScorerError> {
        let source = ImageSource::Path(path.to_string());
        let handle = self.call_with_retry(|id, _| register_request(id, &source), parse_register)?;
        self.image = Some((source, handle.clone()));
        Ok(handle)
    }

    pub fn active_image(&self) -> Option<&str> {
        self.image.as_ref().map(|(_, h)| h.as_str())
    }

    fn call_with_retry<R>(
        &mut self,
        make: impl Fn(u64, &str) -> Request,
        parse: impl Fn(&Reply) -> Result<R, ScorerError>,
    ) -> Result<R, ScorerError> {
        let mut attempt = 0;
        loop {
            // rebuilt each attempt: a reconnect may hand out a new image handle
            let image = self.image.as_ref().map(|(_, h)| h.clone()).unwrap_or_default();
            let req = make(self.next_id, &image);
            match exchange(&mut self.transport, &mut self.next_id, &req).and_then(|r| parse(&r)) {
                Err(e) if e.is_retriable() && attempt < MAX_RETRIES => {
                    attempt += 1;
                    log::warn!("scorer transport failure ({e}); retry {attempt}/{MAX_RETRIES}");
                    thread::sleep(self.backoff * 2u32.pow(attempt - 1));
                    if let Err(e) = self.reestablish() {
                        log::warn!("reconnect failed: {e}");
                    }
                }
                other => return other,
            }
        }
    }

    fn reestablish(&mut self) -> Result<(), ScorerError> {
        self.transport.reconnect()?;
        let hs = handshake(&mut self.transport, &mut self.next_id)?;
        if hs.manifest != self.manifest || hs.vocabulary != self.vocab {
            return Err(protocol("server changed its manifest across a reconnect"));
        }
        if let Some((source, old)) = &self.image {
            let req = register_request(self.next_id, source);
            let handle = parse_register(&exchange(&mut self.transport, &mut self.next_id, &req)?)?;
            if &handle != old {
                log::info!("image handle changed from {old} to {handle} after reconnect");
                let source = self.image.take().expect("checked above").0;
                self.image = Some((source, handle));
            }
        }
        Ok(())
    }

    fn image_handle(&self) -> Result<String, ScorerError> {
        self.image
            .as_ref()
            .map(|(_, h)| h.clone())
            .ok_or_else(|| ScorerError::StaleHandle("no image registered".into()))
    }
}

fn register_request(id: u64, source: &ImageSource) -> Request {
    match source {
        ImageSource::Bytes(b) => Request::RegisterImage {
            id,
            bytes_b64: Some(base64::engine::general_purpose::STANDARD.encode(b)),
            path: None,
        },
        ImageSource::Path(p) => Request::RegisterImage {
            id,
            bytes_b64: None,
            path: Some(p.clone()),
        },
    }
}

fn parse_register(reply: &Reply) -> Result<String, ScorerError> {
    let ok: RegisterOk = payload(reply)?;
    if ok.handle.is_empty() {
        return Err(protocol("empty image handle"));
    }
    Ok(ok.handle)
}

fn handshake<T: Transport>(transport: &mut T, next_id: &mut u64) -> Result<HandshakeOk, ScorerError> {
    let req = Request::Handshake {
        id: *next_id,
        protocol_version: PROTOCOL_VERSION,
        client: concat!("gibbscap/", env!("CARGO_PKG_VERSION")).to_string(),
    };
    let reply = exchange(transport, next_id, &req)?;
    if let Some(err) = &reply.error {
        if err.code == "version_mismatch" {
            let server = err
                .message
                .split_whitespace()
                .last()
                .and_then(|w| w.parse().ok())
                .unwrap_or(0);
            return Err(ScorerError::VersionMismatch {
                client: PROTOCOL_VERSION,
                server,
            });
        }
    }
    let hs: HandshakeOk = payload(&reply)?;
    if hs.manifest.protocol_version != PROTOCOL_VERSION {
        return Err(ScorerError::VersionMismatch {
            client: PROTOCOL_VERSION,
            server: hs.manifest.protocol_version,
        });
    }
    if hs.vocabulary.size() != hs.manifest.vocab_size || hs.vocabulary.mask_id() != hs.manifest.mask_id {
        return Err(protocol("manifest disagrees with the vocabulary it was sent with"));
    }
    for op in ["mlm_topk", "match"] {
        if !hs.manifest.supports_op(op) {
            return Err(ScorerError::Unsupported(format!("server lacks required op {op}")));
        }
    }
    Ok(hs)
}

/// One request/reply round trip with id bookkeeping. Never panics on bad
/// input from the server.
fn exchange<T: Transport>(transport: &mut T, next_id: &mut u64, req: &Request) -> Result<Reply, ScorerError> {
    *next_id = req.id() + 1;
    let line = json::to_line(req).map_err(|e| protocol(e.to_string()))?;
    transport.send(&line)?;
    let raw = transport.recv()?;
    let reply: Reply = serde_json::from_str(&raw).map_err(|e| protocol(format!("unparseable reply: {e}")))?;
    if reply.id != Some(req.id()) {
        if let (None, Some(err)) = (reply.id, &reply.error) {
            return Err(error_from_body(err.clone()));
        }
        return Err(protocol(format!("reply id {:?} does not match request id {}", reply.id, req.id())));
    }
    Ok(reply)
}

fn payload<R: DeserializeOwned>(reply: &Reply) -> Result<R, ScorerError> {
    match (&reply.ok, &reply.error) {
        (Some(ok), None) => serde_json::from_value(ok.clone()).map_err(|e| protocol(format!("malformed payload: {e}"))),
        (None, Some(err)) => Err(error_from_body(err.clone())),
        _ => Err(protocol("reply must carry exactly one of `ok` and `error`")),
    }
}

fn check_scores(ok: ScoresOk, n: usize, allow_excluded: bool) -> Result<Vec<f64>, ScorerError> {
    if ok.scores.len() != n {
        return Err(protocol(format!("expected {n} scores, got {}", ok.scores.len())));
    }
    if ok.truncated.iter().any(|&t| t) {
        log::warn!("scorer truncated {} of {n} texts", ok.truncated.iter().filter(|&&t| t).count());
    }
    ok.scores
        .into_iter()
        .map(|s| match s {
            Some(x) if x.is_finite() => Ok(x),
            None if allow_excluded => Ok(f64::NEG_INFINITY),
            _ => Err(protocol("score missing or not finite")),
        })
        .collect()
}

fn split_texts(texts: &[CandidateText]) -> (Vec<String>, Vec<Vec<TokenId>>) {
    texts.iter().map(|t| (t.text.clone(), t.token_ids.clone())).unzip()
}

impl<T: Transport> ScorerBackend for RemoteBackend<T> {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn manifest(&self) -> BackendManifest {
        self.manifest.clone()
    }

    fn mlm_topk(&mut self, tokens: &[TokenId], mask_pos: usize, k: usize) -> Result<Vec<(TokenId, f64)>, ScorerError> {
        let want = k.min(self.vocab.size());
        let v = self.vocab.size();
        self.call_with_retry(
            |id, _| Request::MlmTopk {
                id,
                tokens: tokens.to_vec(),
                mask_pos,
                k: want,
            },
            |reply| {
                let ok: TopkOk = payload(reply)?;
                if ok.token_ids.len() != ok.probs.len() {
                    return Err(protocol("token_ids and probs differ in length"));
                }
                if ok.token_ids.len() != want {
                    return Err(protocol(format!("asked for {want} candidates, got {}", ok.token_ids.len())));
                }
                if ok.token_ids.iter().any(|&t| t as usize >= v) {
                    return Err(protocol("candidate id outside the vocabulary"));
                }
                if ok.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(protocol("probability outside [0, 1]"));
                }
                if ok.probs.windows(2).any(|w| w[0] < w[1]) {
                    return Err(protocol("candidates not sorted by probability"));
                }
                Ok(ok.token_ids.into_iter().zip(ok.probs).collect())
            },
        )
    }

    fn mlm_distribution(&mut self, tokens: &[TokenId], mask_pos: usize) -> Result<Vec<f64>, ScorerError> {
        if !self.manifest.supports_op("mlm_dist") {
            return Err(ScorerError::Unsupported("server lacks mlm_dist".into()));
        }
        let v = self.vocab.size();
        self.call_with_retry(
            |id, _| Request::MlmDist {
                id,
                tokens: tokens.to_vec(),
                mask_pos,
            },
            |reply| {
                let ok: DistOk = payload(reply)?;
                if ok.probs.len() != v {
                    return Err(protocol(format!("expected {v} probabilities, got {}", ok.probs.len())));
                }
                if ok.probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(protocol("probability outside [0, 1]"));
                }
                Ok(ok.probs)
            },
        )
    }

    fn match_scores(&mut self, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        self.image_handle()?;
        let (strings, ids) = split_texts(texts);
        let n = texts.len();
        self.call_with_retry(
            |id, image| Request::Match {
                id,
                image: image.to_string(),
                texts: strings.clone(),
                token_ids: ids.clone(),
            },
            |reply| check_scores(payload(reply)?, n, false),
        )
    }

    fn control_scores(&mut self, task: &ControlTask, position: usize, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        let tag = task
            .tag()
            .ok_or_else(|| ScorerError::Unsupported(format!("{task:?} has no classifier")))?;
        if !self.manifest.supports_control(&tag) {
            return Err(ScorerError::Unsupported(format!("control task {tag}")));
        }
        let (strings, ids) = split_texts(texts);
        let n = texts.len();
        self.call_with_retry(
            |id, _| Request::Control {
                id,
                task: tag.clone(),
                position,
                texts: strings.clone(),
                token_ids: ids.clone(),
            },
            |reply| check_scores(payload(reply)?, n, true),
        )
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f64>>, ScorerError> {
        if !self.manifest.supports_op("embed") {
            return Err(ScorerError::Unsupported("server lacks embed".into()));
        }
        let dim = self.manifest.embed_dim;
        let n = texts.len();
        self.call_with_retry(
            |id, _| Request::Embed {
                id,
                texts: texts.to_vec(),
            },
            |reply| {
                let ok: EmbedOk = payload(reply)?;
                if ok.vectors.len() != n {
                    return Err(protocol(format!("expected {n} vectors, got {}", ok.vectors.len())));
                }
                for v in &ok.vectors {
                    if dim.is_some_and(|d| d != v.len()) || v.iter().any(|x| !x.is_finite()) {
                        return Err(protocol("embedding has the wrong dimension or non-finite entries"));
                    }
                }
                Ok(ok.vectors)
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::engine::run;
    use crate::protocol::{LoopbackTransport, RecordingTransport, ReplayTransport, SyntheticServer};
    use crate::synthetic::{fixtures, SyntheticBackend};

    fn loopback(f: &fixtures::Fixture) -> LoopbackTransport {
        LoopbackTransport::new(SyntheticServer::new(SyntheticBackend::new(
            SyntheticBackend::builtin(f).table().clone(),
            None,
            None,
        )))
    }

    fn scenes_config() -> RunConfig {
        RunConfig {
            n: 4,
            k: 8,
            iterations: 3,
            seed: 7,
            ..RunConfig::default()
        }
    }

    #[test]
    fn remote_run_matches_local_run() {
        let f = &fixtures::SCENES;
        let bag = SyntheticBackend::builtin_image(f, "dog_in_grass").unwrap();
        let mut local = SyntheticBackend::builtin(f);
        let h = local.register_image(bag.as_bytes()).unwrap();
        local.select_image(&h).unwrap();
        let expected = run(&scenes_config(), &mut local).unwrap();

        let mut remote = RemoteBackend::connect(loopback(f)).unwrap();
        assert_eq!(remote.register_image(bag.as_bytes()).unwrap(), h);
        let got = run(&scenes_config(), &mut remote).unwrap();
        assert_eq!(got.best_caption, expected.best_caption);
        assert_eq!(got.per_iteration, expected.per_iteration);
        assert_eq!(got.scorer_call_counts, expected.scorer_call_counts);
    }

    #[test]
    fn recording_replays_identically() {
        let f = &fixtures::TOY7;
        let bag = SyntheticBackend::builtin_image(f, "cat").unwrap();
        let cfg = RunConfig {
            n: 3,
            k: 4,
            iterations: 2,
            prompt_text: String::new(),
            ..RunConfig::default()
        };
        let mut remote = RemoteBackend::connect(RecordingTransport::new(loopback(f))).unwrap();
        remote.register_image(bag.as_bytes()).unwrap();
        let first = run(&cfg, &mut remote).unwrap();
        let transcript = remote.into_transport().transcript();

        let mut replay = RemoteBackend::connect(ReplayTransport::parse(&transcript).unwrap()).unwrap();
        replay.register_image(bag.as_bytes()).unwrap();
        assert_eq!(run(&cfg, &mut replay).unwrap(), first);
        assert!(replay.transport().is_exhausted());

        let mut diverging = RemoteBackend::connect(ReplayTransport::parse(&transcript).unwrap()).unwrap();
        diverging.register_image(bag.as_bytes()).unwrap();
        let err = run(&RunConfig { seed: 1, ..cfg }, &mut diverging).unwrap_err();
        assert!(err.to_string().contains("differs from recording"), "{err}");
    }

    /// Drops the first `failures` replies to simulate a flaky link.
    struct Flaky {
        inner: LoopbackTransport,
        failures: u32,
        reconnects: u32,
    }

    impl Transport for Flaky {
        fn send(&mut self, line: &str) -> Result<(), ScorerError> {
            self.inner.send(line)
        }

        fn recv(&mut self) -> Result<String, ScorerError> {
            let r = self.inner.recv()?;
            if self.failures > 0 && !r.contains("\"manifest\"") {
                self.failures -= 1;
                return Err(ScorerError::Transport("reset by peer".into()));
            }
            Ok(r)
        }

        fn reconnect(&mut self) -> Result<(), ScorerError> {
            self.reconnects += 1;
            self.inner.reconnect()
        }
    }

    #[test]
    fn transport_errors_are_retried_twice() {
        let f = &fixtures::TOY7;
        let flaky = |failures| Flaky {
            inner: loopback(f),
            failures,
            reconnects: 0,
        };
        let tokens = [0, 6];

        let mut ok = RemoteBackend::connect(flaky(2)).unwrap().with_backoff(Duration::ZERO);
        assert_eq!(ok.mlm_topk(&tokens, 1, 3).unwrap().len(), 3);
        assert_eq!(ok.transport().reconnects, 2);

        let mut failing = RemoteBackend::connect(flaky(3)).unwrap().with_backoff(Duration::ZERO);
        assert!(matches!(failing.mlm_topk(&tokens, 1, 3), Err(ScorerError::Transport(_))));
    }

    fn scripted(replies: &[&str]) -> ReplayTransport {
        let mut t = String::new();
        let mut server = SyntheticServer::new(SyntheticBackend::builtin(&fixtures::TOY7));
        let hs = r#"{"client":"gibbscap/VERSION","id":0,"op":"handshake","protocol_version":1}"#
            .replace("VERSION", env!("CARGO_PKG_VERSION"));
        t += &format!("> {hs}\n< {}\n", server.handle_line(&hs));
        t += r#"> {"id":1,"k":3,"mask_pos":1,"op":"mlm_topk","tokens":[0,6]}"#;
        t += "\n";
        for r in replies {
            t += &format!("< {r}\n");
        }
        ReplayTransport::parse(&t).unwrap()
    }

    #[test]
    fn malformed_topk_replies_are_protocol_errors() {
        for bad in [
            "garbage",
            r#"{"id":1}"#,
            r#"{"id":2,"ok":{"token_ids":[1,2,3],"probs":[0.5,0.2,0.1]}}"#,
            r#"{"id":1,"ok":{"token_ids":[1,2],"probs":[0.5,0.2]}}"#,
            r#"{"id":1,"ok":{"token_ids":[1,2,3],"probs":[0.5,0.2]}}"#,
            r#"{"id":1,"ok":{"token_ids":[1,2,3],"probs":[0.1,0.2,0.5]}}"#,
            r#"{"id":1,"ok":{"token_ids":[1,2,30],"probs":[0.5,0.2,0.1]}}"#,
            r#"{"id":1,"ok":{"token_ids":[1,2,3],"probs":[1.5,0.2,0.1]}}"#,
            r#"{"id":1,"ok":{"token_ids":"x","probs":[]}}"#,
            r#"{"id":1,"ok":{},"error":{"code":"internal","message":"x"}}"#,
        ] {
            let mut b = RemoteBackend::connect(scripted(&[bad])).unwrap();
            let got = b.mlm_topk(&[0, 6], 1, 3);
            assert!(matches!(got, Err(ScorerError::Protocol(_))), "{bad}: {got:?}");
        }
        let mut b = RemoteBackend::connect(scripted(&[r#"{"id":1,"error":{"code":"oom","message":"gpu"}}"#])).unwrap();
        assert!(matches!(b.mlm_topk(&[0, 6], 1, 3), Err(ScorerError::Remote { .. })));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let t = ReplayTransport::parse(&format!(
            "> {}\n< {}\n",
            r#"{"client":"gibbscap/VERSION","id":0,"op":"handshake","protocol_version":1}"#.replace("VERSION", env!("CARGO_PKG_VERSION")),
            r#"{"error":{"code":"version_mismatch","message":"server protocol version 2"},"id":0}"#
        ))
        .unwrap();
        assert!(matches!(
            RemoteBackend::connect(t).err().unwrap(),
            ScorerError::VersionMismatch { client: 1, server: 2 }
        ));
    }

    #[test]
    fn missing_capability_fails_before_any_scoring() {
        let mut remote = RemoteBackend::connect(loopback(&fixtures::TWO_MODE)).unwrap();
        let cfg = RunConfig {
            n: 2,
            k: 2,
            prompt_text: String::new(),
            weights: crate::fusion::FusionWeights::new(0.02, 2.0, 5.0),
            control_task: Some(ControlTask::parse_flag("pos:NOUN VERB").unwrap()),
            ..RunConfig::default()
        };
        let err = run(&cfg, &mut remote).unwrap_err();
        assert_eq!(err.scorer_call_counts, Default::default());
    }
}
