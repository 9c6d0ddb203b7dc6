//! Getting a protocol session to an emulator.

use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command as Process, Stdio};

use anyhow::{bail, Context, Result};
use gondola_core::config::RigConfig;
use gondola_core::protocol::{
    Command, Emulator, EmulatorOptions, LocalSession, Reply, Session, SessionError, StreamSession,
};

/// Emulator binary installed next to this one.
pub fn emulator_binary() -> Result<std::path::PathBuf> {
    let me = std::env::current_exe().context("locating own executable")?;
    let path = me.with_file_name(format!("gondola-emulator{}", std::env::consts::EXE_SUFFIX));
    if !path.exists() {
        bail!("emulator binary not found at {}", path.display());
    }
    Ok(path)
}

/// Emulator child process spoken to over its stdin and stdout.
pub struct SpawnedSession {
    child: Child,
    inner: StreamSession<ChildStdout, ChildStdin>,
}

impl SpawnedSession {
    pub fn start(config: &Path) -> Result<Self> {
        let mut child = Process::new(emulator_binary()?)
            .arg("--config")
            .arg(config)
            .args(["--endpoint", "stdio"])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .context("starting emulator")?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self {
            child,
            inner: StreamSession::new(stdout, stdin),
        })
    }
}

impl Session for SpawnedSession {
    fn request(&mut self, cmd: &Command) -> Result<Reply, SessionError> {
        self.inner.request(cmd)
    }
}

impl Drop for SpawnedSession {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn tcp(addr: &str) -> Result<StreamSession<TcpStream, TcpStream>> {
    let addr = addr.strip_prefix("tcp://").unwrap_or(addr);
    let stream = TcpStream::connect(addr).with_context(|| format!("connecting to emulator at {addr}"))?;
    stream.set_nodelay(true)?;
    Ok(StreamSession::new(stream.try_clone()?, stream))
}

/// Where the controller finds its motor controller.
pub enum Target<'a> {
    Tcp(&'a str),
    Spawn(&'a Path),
    InProcess(&'a RigConfig),
}

pub fn open(target: Target<'_>) -> Result<Box<dyn Session + Send>> {
    Ok(match target {
        Target::Tcp(addr) => Box::new(tcp(addr)?),
        Target::Spawn(config) => Box::new(SpawnedSession::start(config)?),
        Target::InProcess(rig) => Box::new(LocalSession::new(Emulator::new(rig.clone(), EmulatorOptions::default()))),
    })
}
