use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::str::FromStr;

use super::{encode_reply, Emulator, MAX_LINE_BYTES};

/// Where the emulator listens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Stdio,
    /// `host:port`; port 0 picks a free one.
    Tcp(String),
}

impl FromStr for Endpoint {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "stdio" || s == "-" {
            return Ok(Endpoint::Stdio);
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        match addr.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(Endpoint::Tcp(addr.to_string())),
            _ => Err(format!("expected `stdio` or host:port, got {s:?}")),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Stdio => f.write_str("stdio"),
            Endpoint::Tcp(a) => f.write_str(a),
        }
    }
}

/// Runs the command loop over one connection until the peer closes it.
pub fn serve_stream<R: Read, W: Write>(emulator: &mut Emulator, reader: R, mut writer: W) -> io::Result<()> {
    let mut reader = BufReader::new(reader);
    let mut line = Vec::new();
    loop {
        line.clear();
        // cap what one line may buffer; the decoder rejects the overflow
        let n = (&mut reader).take(MAX_LINE_BYTES as u64 + 1).read_until(b'\n', &mut line)?;
        if n == 0 {
            return Ok(());
        }
        if line.last() != Some(&b'\n') && n > MAX_LINE_BYTES {
            // drain the rest of an oversized line so framing recovers
            let mut rest = Vec::new();
            reader.read_until(b'\n', &mut rest)?;
        }
        let reply = emulator.handle_line(&line);
        writer.write_all(&encode_reply(&reply))?;
        writer.flush()?;
    }
}

/// Accepts controllers one after another. The plant outlives each
/// connection. Stops after `limit` connections when given.
pub fn serve_tcp(listener: TcpListener, emulator: &mut Emulator, limit: Option<usize>) -> io::Result<()> {
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream?;
        let reader = stream.try_clone()?;
        if let Err(e) = serve_stream(emulator, reader, stream) {
            // a dropped controller is not fatal to the emulator
            eprintln!("connection ended: {e}");
        }
        served += 1;
        if limit.is_some_and(|l| served >= l) {
            break;
        }
    }
    Ok(())
}

pub fn serve(endpoint: &Endpoint, emulator: &mut Emulator) -> io::Result<()> {
    match endpoint {
        Endpoint::Stdio => serve_stream(emulator, io::stdin().lock(), io::stdout().lock()),
        Endpoint::Tcp(addr) => serve_tcp(TcpListener::bind(addr)?, emulator, None),
    }
}
