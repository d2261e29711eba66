//! Backend selection from `--backend` strings.
//!
//! | spec | meaning |
//! |------|---------|
//! | `synthetic:<name>` | built-in fixture (`toy7`, `two_mode`, `scenes`) |
//! | `synthetic:<dir>` | fixture directory with `mlm.txt` and optional tables |
//! | `remote:tcp://host:port` | model server over TCP |
//! | `remote:stdio:<cmd> [args]` | model server as a child process |
//! | `remote` | endpoint taken from `GIBBSCAP_REMOTE` |
//! | `replay:<file>` | recorded transcript, replayed verbatim |

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Duration;

use gibbscap::backend::{BackendManifest, CandidateText};
use gibbscap::protocol::{
    ChildTransport, LoopbackTransport, RecordingTransport, RemoteBackend, ReplayTransport, SyntheticServer,
    TcpTransport, Transport,
};
use gibbscap::synthetic::fixtures::{self, Fixture};
use gibbscap::synthetic::SyntheticBackend;
use gibbscap::{ControlTask, ScorerBackend, ScorerError, TokenId, Vocabulary};

use crate::failure::{io_at, CliError};

pub const BACKEND_ENV: &str = "GIBBSCAP_BACKEND";
pub const REMOTE_ENV: &str = "GIBBSCAP_REMOTE";
pub const DEFAULT_BACKEND: &str = "synthetic:scenes";

const CONNECT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Builtin(&'static str),
    FixtureDir(PathBuf),
    Tcp(String),
    Stdio(Vec<String>),
    Replay(PathBuf),
}

impl BackendSpec {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let spec = spec.trim();
        if spec == "remote" {
            let target = std::env::var(REMOTE_ENV)
                .map_err(|_| CliError::usage("backend", format!("backend `remote` needs {REMOTE_ENV} to be set")))?;
            return Self::parse_remote(&target);
        }
        if let Some(rest) = spec.strip_prefix("synthetic:") {
            return match fixtures::by_name(rest) {
                Some(f) => Ok(BackendSpec::Builtin(f.name)),
                None => Ok(BackendSpec::FixtureDir(PathBuf::from(rest))),
            };
        }
        if let Some(rest) = spec.strip_prefix("remote:") {
            return Self::parse_remote(rest);
        }
        if let Some(rest) = spec.strip_prefix("replay:") {
            return Ok(BackendSpec::Replay(PathBuf::from(rest)));
        }
        Err(CliError::usage(
            "backend",
            format!("unrecognised backend {spec:?}; expected synthetic:, remote: or replay:"),
        ))
    }

    fn parse_remote(target: &str) -> Result<Self, CliError> {
        if let Some(addr) = target.strip_prefix("tcp://") {
            return Ok(BackendSpec::Tcp(addr.to_string()));
        }
        if let Some(cmd) = target.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if argv.is_empty() {
                return Err(CliError::usage("backend", "remote:stdio: needs a command"));
            }
            return Ok(BackendSpec::Stdio(argv));
        }
        Err(CliError::usage(
            "backend",
            format!("unrecognised remote endpoint {target:?}; expected tcp://host:port or stdio:<command>"),
        ))
    }

    /// Spec from the flag, else the environment, else the built-in scenes.
    pub fn resolve(flag: Option<&str>) -> Result<Self, CliError> {
        match flag {
            Some(s) => Self::parse(s),
            None => match std::env::var(BACKEND_ENV) {
                Ok(s) if !s.trim().is_empty() => Self::parse(&s),
                _ => Self::parse(DEFAULT_BACKEND),
            },
        }
    }

    pub fn is_replay(&self) -> bool {
        matches!(self, BackendSpec::Replay(_))
    }

    /// Image used when none is named: the first one of a built-in fixture.
    pub fn default_image(&self) -> Option<&'static str> {
        match self {
            BackendSpec::Builtin(name) => fixtures::by_name(name).and_then(|f| f.images.first()).map(|(n, _)| *n),
            _ => None,
        }
    }

    /// Opens a session. With `record`, every wire line is appended to that
    /// file; synthetic backends are then served through the in-process
    /// protocol server so the transcript is a real one.
    pub fn open(&self, record: Option<&Path>) -> Result<AnyBackend, CliError> {
        let transport: Box<dyn Transport> = match self {
            BackendSpec::Builtin(_) | BackendSpec::FixtureDir(_) => {
                let local = self.load_synthetic()?;
                if record.is_none() {
                    return Ok(AnyBackend::Synthetic(local));
                }
                Box::new(LoopbackTransport::new(SyntheticServer::new(local)))
            }
            BackendSpec::Tcp(addr) => Box::new(TcpTransport::connect(addr, CONNECT_TIMEOUT)?),
            BackendSpec::Stdio(argv) => Box::new(ChildTransport::spawn(&argv[0], &argv[1..])?),
            BackendSpec::Replay(path) => Box::new(ReplayTransport::open(path)?),
        };
        let transport: Box<dyn Transport> = match record {
            Some(path) => {
                let sink = File::create(path).map_err(io_at(path))?;
                Box::new(RecordingTransport::with_sink(transport, Box::new(sink)))
            }
            None => transport,
        };
        Ok(AnyBackend::Remote(RemoteBackend::connect(transport)?))
    }

    fn load_synthetic(&self) -> Result<SyntheticBackend, CliError> {
        match self {
            BackendSpec::Builtin(name) => Ok(SyntheticBackend::builtin(fixtures::by_name(name).expect("parsed name"))),
            BackendSpec::FixtureDir(dir) => {
                if !dir.is_dir() {
                    return Err(CliError::usage(
                        "backend",
                        format!("{} is neither a built-in fixture nor a directory", dir.display()),
                    ));
                }
                Ok(SyntheticBackend::load_dir(dir)?)
            }
            _ => unreachable!("not a synthetic spec"),
        }
    }

    /// Raw image bytes for `image`: an existing file, a `<name>.bag` in a
    /// fixture directory, or a built-in image name.
    pub fn image_bytes(&self, image: &str) -> Result<Vec<u8>, CliError> {
        let path = Path::new(image);
        if path.is_file() {
            return fs::read(path).map_err(io_at(path));
        }
        if let BackendSpec::FixtureDir(dir) = self {
            let p = dir.join(format!("{image}.bag"));
            if p.is_file() {
                return fs::read(&p).map_err(io_at(&p));
            }
        }
        let mut search: Vec<&Fixture> = Vec::new();
        if let BackendSpec::Builtin(name) = self {
            search.extend(fixtures::by_name(name));
        }
        search.extend(fixtures::ALL);
        search
            .into_iter()
            .find_map(|f| SyntheticBackend::builtin_image(f, image))
            .map(|b| b.as_bytes().to_vec())
            .ok_or_else(|| CliError::usage("image", format!("no image file or built-in image named {image:?}")))
    }
}

/// Either backend behind one type, so commands need not be generic.
pub enum AnyBackend {
    Synthetic(SyntheticBackend),
    Remote(RemoteBackend<Box<dyn Transport>>),
}

impl AnyBackend {
    pub fn set_image(&mut self, bytes: &[u8]) -> Result<(), CliError> {
        match self {
            AnyBackend::Synthetic(b) => {
                let h = b.register_image(bytes)?;
                b.select_image(&h)?;
            }
            AnyBackend::Remote(b) => {
                b.register_image(bytes)?;
            }
        }
        Ok(())
    }

    pub fn has_image(&self) -> bool {
        match self {
            AnyBackend::Synthetic(b) => b.active_image().is_some(),
            AnyBackend::Remote(b) => b.active_image().is_some(),
        }
    }

    fn inner(&mut self) -> &mut dyn ScorerBackend {
        match self {
            AnyBackend::Synthetic(b) => b,
            AnyBackend::Remote(b) => b,
        }
    }
}

impl ScorerBackend for AnyBackend {
    fn vocabulary(&self) -> &Vocabulary {
        match self {
            AnyBackend::Synthetic(b) => b.vocabulary(),
            AnyBackend::Remote(b) => b.vocabulary(),
        }
    }

    fn manifest(&self) -> BackendManifest {
        match self {
            AnyBackend::Synthetic(b) => b.manifest(),
            AnyBackend::Remote(b) => b.manifest(),
        }
    }

    fn mlm_topk(&mut self, tokens: &[TokenId], mask_pos: usize, k: usize) -> Result<Vec<(TokenId, f64)>, ScorerError> {
        self.inner().mlm_topk(tokens, mask_pos, k)
    }

    fn mlm_distribution(&mut self, tokens: &[TokenId], mask_pos: usize) -> Result<Vec<f64>, ScorerError> {
        self.inner().mlm_distribution(tokens, mask_pos)
    }

    fn match_scores(&mut self, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        self.inner().match_scores(texts)
    }

    fn control_scores(&mut self, task: &ControlTask, position: usize, texts: &[CandidateText]) -> Result<Vec<f64>, ScorerError> {
        self.inner().control_scores(task, position, texts)
    }

    fn embed(&mut self, texts: &[String]) -> Result<Vec<Vec<f64>>, ScorerError> {
        self.inner().embed(texts)
    }
}
