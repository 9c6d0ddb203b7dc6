use std::io::{self, BufRead, BufReader, Read, Write};

use thiserror::Error;

use super::{decode_reply, encode, encode_reply, Command, DecodeError, Emulator, Reply, Telemetry};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("motor controller closed the connection")]
    Closed,
    #[error("unreadable reply {line:?}: {source}")]
    Reply { line: String, source: DecodeError },
}

/// One request/reply exchange at a time with a motor controller.
pub trait Session {
    fn request(&mut self, cmd: &Command) -> Result<Reply, SessionError>;

    /// Read-only view of the true plant, when the other end is an emulator in
    /// this process.
    fn telemetry(&self) -> Option<Telemetry> {
        None
    }
}

/// In-process session. Every exchange still goes through the byte encoding,
/// so a recorded transcript is exactly what a stream would carry.
#[derive(Debug)]
pub struct LocalSession {
    emulator: Emulator,
    transcript: Option<Vec<String>>,
}

impl LocalSession {
    pub fn new(emulator: Emulator) -> Self {
        Self {
            emulator,
            transcript: None,
        }
    }

    /// Keeps every line, prefixed with `> ` (sent) or `< ` (received).
    pub fn recording(mut self) -> Self {
        self.transcript = Some(Vec::new());
        self
    }

    pub fn transcript(&self) -> &[String] {
        self.transcript.as_deref().unwrap_or(&[])
    }

    pub fn emulator(&self) -> &Emulator {
        &self.emulator
    }

    /// Sends a raw line, bypassing the encoder.
    pub fn request_raw(&mut self, line: &[u8]) -> Result<Reply, SessionError> {
        let reply = self.emulator.handle_line(line);
        let bytes = encode_reply(&reply);
        if let Some(t) = &mut self.transcript {
            t.push(format!("> {}", String::from_utf8_lossy(line).trim_end_matches('\n')));
            t.push(format!("< {}", String::from_utf8_lossy(&bytes).trim_end_matches('\n')));
        }
        parse(&bytes)
    }
}

impl Session for LocalSession {
    fn request(&mut self, cmd: &Command) -> Result<Reply, SessionError> {
        self.request_raw(&encode(cmd))
    }

    fn telemetry(&self) -> Option<Telemetry> {
        Some(self.emulator.telemetry())
    }
}

fn parse(bytes: &[u8]) -> Result<Reply, SessionError> {
    decode_reply(bytes).map_err(|source| SessionError::Reply {
        line: String::from_utf8_lossy(bytes).into_owned(),
        source,
    })
}

/// Session over any byte stream (TCP socket, child process pipes).
pub struct StreamSession<R, W> {
    reader: BufReader<R>,
    writer: W,
}

impl<R: Read, W: Write> StreamSession<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader: BufReader::new(reader),
            writer,
        }
    }
}

impl<R: Read, W: Write> Session for StreamSession<R, W> {
    fn request(&mut self, cmd: &Command) -> Result<Reply, SessionError> {
        self.writer.write_all(&encode(cmd))?;
        self.writer.flush()?;
        let mut line = Vec::new();
        if self.reader.read_until(b'\n', &mut line)? == 0 {
            return Err(SessionError::Closed);
        }
        parse(&line)
    }
}
