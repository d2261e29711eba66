use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Duration;

use crate::error::ScorerError;

/// A bidirectional line channel.
pub trait Transport {
    fn send(&mut self, line: &str) -> Result<(), ScorerError>;

    fn recv(&mut self) -> Result<String, ScorerError>;

    /// Re-opens the underlying connection after a transport failure.
    fn reconnect(&mut self) -> Result<(), ScorerError> {
        Err(ScorerError::Transport("this transport cannot reconnect".into()))
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, line: &str) -> Result<(), ScorerError> {
        (**self).send(line)
    }

    fn recv(&mut self) -> Result<String, ScorerError> {
        (**self).recv()
    }

    fn reconnect(&mut self) -> Result<(), ScorerError> {
        (**self).reconnect()
    }
}

fn io_err(e: std::io::Error) -> ScorerError {
    ScorerError::Transport(e.to_string())
}

/// Lines over any reader/writer pair.
pub struct StreamTransport<R, W> {
    reader: BufReader<R>,
    writer: W,
}

impl<R: Read, W: Write> StreamTransport<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        StreamTransport {
            reader: BufReader::new(reader),
            writer,
        }
    }
}

impl<R: Read, W: Write> Transport for StreamTransport<R, W> {
    fn send(&mut self, line: &str) -> Result<(), ScorerError> {
        self.writer.write_all(line.as_bytes()).map_err(io_err)?;
        self.writer.write_all(b"\n").map_err(io_err)?;
        self.writer.flush().map_err(io_err)
    }

    fn recv(&mut self) -> Result<String, ScorerError> {
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(io_err)?;
        if n == 0 {
            return Err(ScorerError::Transport("connection closed".into()));
        }
        while line.ends_with('\n') || line.ends_with('\r') {
            line.pop();
        }
        Ok(line)
    }
}

/// Server running as a child process speaking over its stdin/stdout.
pub struct ChildTransport {
    program: String,
    args: Vec<String>,
    child: Child,
    stream: StreamTransport<ChildStdout, ChildStdin>,
}

impl ChildTransport {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, ScorerError> {
        let (child, stream) = Self::start(program, args)?;
        Ok(ChildTransport {
            program: program.to_string(),
            args: args.to_vec(),
            child,
            stream,
        })
    }

    fn start(program: &str, args: &[String]) -> Result<(Child, StreamTransport<ChildStdout, ChildStdin>), ScorerError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ScorerError::Transport(format!("spawning {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok((child, StreamTransport::new(stdout, stdin)))
    }
}

impl Transport for ChildTransport {
    fn send(&mut self, line: &str) -> Result<(), ScorerError> {
        self.stream.send(line)
    }

    fn recv(&mut self) -> Result<String, ScorerError> {
        self.stream.recv()
    }

    fn reconnect(&mut self) -> Result<(), ScorerError> {
        let _ = self.child.kill();
        let _ = self.child.wait();
        let (child, stream) = Self::start(&self.program, &self.args)?;
        self.child = child;
        self.stream = stream;
        Ok(())
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// TCP connection with a read timeout.
pub struct TcpTransport {
    addr: String,
    timeout: Duration,
    stream: StreamTransport<TcpStream, TcpStream>,
}

impl TcpTransport {
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self, ScorerError> {
        let stream = Self::open(addr, timeout)?;
        Ok(TcpTransport {
            addr: addr.to_string(),
            timeout,
            stream,
        })
    }

    fn open(addr: &str, timeout: Duration) -> Result<StreamTransport<TcpStream, TcpStream>, ScorerError> {
        let sock = addr
            .to_socket_addrs()
            .map_err(io_err)?
            .next()
            .ok_or_else(|| ScorerError::Transport(format!("cannot resolve {addr}")))?;
        let s = TcpStream::connect_timeout(&sock, timeout).map_err(io_err)?;
        s.set_read_timeout(Some(timeout)).map_err(io_err)?;
        s.set_nodelay(true).map_err(io_err)?;
        let r = s.try_clone().map_err(io_err)?;
        Ok(StreamTransport::new(r, s))
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, line: &str) -> Result<(), ScorerError> {
        self.stream.send(line)
    }

    fn recv(&mut self) -> Result<String, ScorerError> {
        self.stream.recv()
    }

    fn reconnect(&mut self) -> Result<(), ScorerError> {
        self.stream = Self::open(&self.addr, self.timeout)?;
        Ok(())
    }
}

/// Wraps a transport and keeps a transcript: `> ` for sent lines, `< ` for
/// received ones.
pub struct RecordingTransport<T> {
    inner: T,
    transcript: Vec<String>,
    sink: Option<Box<dyn Write>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        RecordingTransport {
            inner,
            transcript: Vec::new(),
            sink: None,
        }
    }

    /// Also streams every transcript line to `sink` as it happens.
    pub fn with_sink(inner: T, sink: Box<dyn Write>) -> Self {
        RecordingTransport {
            sink: Some(sink),
            ..Self::new(inner)
        }
    }

    fn log(&mut self, line: String) -> Result<(), ScorerError> {
        if let Some(sink) = &mut self.sink {
            writeln!(sink, "{line}").and_then(|_| sink.flush()).map_err(io_err)?;
        }
        self.transcript.push(line);
        Ok(())
    }

    pub fn transcript(&self) -> String {
        self.transcript.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn into_inner(self) -> T {
        self.inner
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&mut self, line: &str) -> Result<(), ScorerError> {
        self.log(format!("> {line}"))?;
        self.inner.send(line)
    }

    fn recv(&mut self) -> Result<String, ScorerError> {
        let line = self.inner.recv()?;
        self.log(format!("< {line}"))?;
        Ok(line)
    }

    fn reconnect(&mut self) -> Result<(), ScorerError> {
        self.inner.reconnect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Entry {
    Sent(String),
    Received(String),
}

/// Plays back a recorded transcript. Every sent line must equal the
/// recorded request byte for byte.
#[derive(Debug, Clone)]
pub struct ReplayTransport {
    entries: Vec<Entry>,
    cursor: usize,
}

impl ReplayTransport {
    pub fn parse(transcript: &str) -> Result<Self, ScorerError> {
        let mut entries = Vec::new();
        for (no, line) in transcript.lines().enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("> ") {
                entries.push(Entry::Sent(rest.to_string()));
            } else if let Some(rest) = line.strip_prefix("< ") {
                entries.push(Entry::Received(rest.to_string()));
            } else {
                return Err(ScorerError::ReplayMismatch(format!(
                    "transcript line {}: expected `> ` or `< ` prefix",
                    no + 1
                )));
            }
        }
        Ok(ReplayTransport { entries, cursor: 0 })
    }

    pub fn open(path: &Path) -> Result<Self, ScorerError> {
        let text = fs::read_to_string(path).map_err(io_err)?;
        Self::parse(&text)
    }

    pub fn is_exhausted(&self) -> bool {
        self.cursor == self.entries.len()
    }
}

impl Transport for ReplayTransport {
    fn send(&mut self, line: &str) -> Result<(), ScorerError> {
        match self.entries.get(self.cursor) {
            Some(Entry::Sent(expected)) if expected == line => {
                self.cursor += 1;
                Ok(())
            }
            Some(Entry::Sent(expected)) => Err(ScorerError::ReplayMismatch(format!(
                "request {} differs from recording:\n  sent     {line}\n  recorded {expected}",
                self.cursor
            ))),
            Some(Entry::Received(_)) => Err(ScorerError::ReplayMismatch(
                "sent a request while the recording expects a reply".into(),
            )),
            None => Err(ScorerError::ReplayMismatch("recording exhausted".into())),
        }
    }

    fn recv(&mut self) -> Result<String, ScorerError> {
        match self.entries.get(self.cursor) {
            Some(Entry::Received(line)) => {
                self.cursor += 1;
                Ok(line.clone())
            }
            Some(Entry::Sent(_)) => Err(ScorerError::ReplayMismatch(
                "waiting for a reply while the recording expects a request".into(),
            )),
            None => Err(ScorerError::ReplayMismatch("recording exhausted".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_transport_lines() {
        let input = b"first\r\nsecond\n".to_vec();
        let mut out = Vec::new();
        {
            let mut t = StreamTransport::new(&input[..], &mut out);
            t.send("hello").unwrap();
            assert_eq!(t.recv().unwrap(), "first");
            assert_eq!(t.recv().unwrap(), "second");
            assert!(matches!(t.recv(), Err(ScorerError::Transport(_))));
        }
        assert_eq!(out, b"hello\n");
    }

    #[test]
    fn replay_enforces_order_and_bytes() {
        let mut r = ReplayTransport::parse("# c\n> a\n< b\n").unwrap();
        assert!(matches!(r.recv(), Err(ScorerError::ReplayMismatch(_))));
        assert!(matches!(r.send("x"), Err(ScorerError::ReplayMismatch(_))));
        r.send("a").unwrap();
        assert!(matches!(r.send("a"), Err(ScorerError::ReplayMismatch(_))));
        assert_eq!(r.recv().unwrap(), "b");
        assert!(r.is_exhausted());
        assert!(matches!(r.send("a"), Err(ScorerError::ReplayMismatch(_))));
        assert!(ReplayTransport::parse("? what\n").is_err());
    }
}
