//! TCP bridge for a control panel.
//!
//! Clients send one command per line:
//!
//! ```text
//! GOTO 325 130 150 [speed]
//! HOME
//! TRACE-START 3          # the next 3 lines are a trace
//! TRACE-ABORT
//! TRACE-CSV              # log of the last trace as CSV
//! SNAPSHOT
//! ```
//!
//! The bridge answers with event lines, broadcast to every client except
//! where noted:
//!
//! ```text
//! SNAPSHOT anchors=0,0,310;650,0,310 home=325,130,150 believed=.. true=..|none busy=0   (requester)
//! QUEUED GOTO 325 130 150                                                              (requester)
//! REJECT <reason>                                                                      (requester)
//! RECORD t=120 kind=ack cmd=x,y,z bel=x,y,z payload=ACK id=1..4
//! PROGRESS 2/7
//! POSE believed=x,y,z true=x,y,z|none
//! CSV <line> ... CSV-END                                                               (requester)
//! ```

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::kinematics::Point3;
use crate::protocol::Session;

use super::{
    parse_trace, write_csv, Controller, DeviceSource, Instruction, LogRecord, RunObserver, SilentDevice, Trace,
};

/// Longest trace accepted in one TRACE-START.
pub const MAX_BRIDGE_TRACE_LINES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub enum BridgeCommand {
    Goto { target: Point3, speed_cm_s: Option<f64> },
    Home,
    /// Header of a trace upload; the body follows on the next `n` lines.
    TraceStart(usize),
    TraceAbort,
    TraceCsv,
    Snapshot,
}

pub fn parse_bridge_command(line: &str) -> Result<BridgeCommand, String> {
    let line = line.trim();
    let mut words = line.split_whitespace();
    match words.next() {
        Some("TRACE-START") => {
            let n = words.next().ok_or("TRACE-START needs a line count")?;
            if words.next().is_some() {
                return Err("TRACE-START takes one argument".into());
            }
            let n: usize = n.parse().map_err(|_| format!("line count {n:?} is not a number"))?;
            if n > MAX_BRIDGE_TRACE_LINES {
                return Err(format!("trace longer than {MAX_BRIDGE_TRACE_LINES} lines"));
            }
            Ok(BridgeCommand::TraceStart(n))
        }
        Some(verb @ ("TRACE-ABORT" | "TRACE-CSV" | "SNAPSHOT")) => {
            if words.next().is_some() {
                return Err(format!("{verb} takes no arguments"));
            }
            Ok(match verb {
                "TRACE-ABORT" => BridgeCommand::TraceAbort,
                "TRACE-CSV" => BridgeCommand::TraceCsv,
                _ => BridgeCommand::Snapshot,
            })
        }
        Some("GOTO" | "HOME") => {
            let trace = parse_trace(line).map_err(|e| e.message)?;
            match trace.steps.into_iter().next().map(|(_, i)| i) {
                Some(Instruction::Goto { target, speed_cm_s }) => Ok(BridgeCommand::Goto { target, speed_cm_s }),
                Some(Instruction::Home) => Ok(BridgeCommand::Home),
                _ => Err("empty command".into()),
            }
        }
        Some(other) => Err(format!("unknown command {other:?}")),
        None => Err("empty command".into()),
    }
}

pub struct BridgeOptions {
    /// Source of device lines for AWAIT during traces.
    pub device: Box<dyn DeviceSource + Send>,
    /// Set to stop accepting clients and return.
    pub shutdown: Arc<AtomicBool>,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            device: Box::new(SilentDevice),
            shutdown: Arc::new(AtomicBool::new(false)),
        }
    }
}

fn xyz(p: Point3) -> String {
    format!("{:.4},{:.4},{:.4}", p.x, p.y, p.z)
}

fn record_line(r: &LogRecord) -> String {
    let payload: String = r.payload.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
    format!(
        "RECORD t={} kind={} cmd={} bel={} payload={payload}",
        r.t_ms,
        r.kind,
        xyz(r.commanded),
        xyz(r.believed)
    )
}

#[derive(Default)]
struct Hub {
    clients: Mutex<Vec<(usize, TcpStream)>>,
}

impl Hub {
    fn broadcast(&self, line: &str) {
        let mut clients = self.clients.lock().expect("hub lock");
        clients.retain_mut(|(_, s)| writeln!(s, "{line}").is_ok());
    }

    fn send_to(&self, client: usize, line: &str) {
        let mut clients = self.clients.lock().expect("hub lock");
        if let Some((_, s)) = clients.iter_mut().find(|(id, _)| *id == client) {
            let _ = writeln!(s, "{line}");
        }
    }
}

enum Job {
    Goto(Point3, Option<f64>),
    Home,
    Trace(Trace),
    Snapshot(usize),
    Csv(usize),
}

struct Shared {
    hub: Hub,
    abort: AtomicBool,
    busy: AtomicBool,
}

struct Broadcast<'a> {
    shared: &'a Shared,
    abortable: bool,
}

impl RunObserver for Broadcast<'_> {
    fn record(&mut self, record: &LogRecord) {
        self.shared.hub.broadcast(&record_line(record));
    }

    fn progress(&mut self, done: usize, total: usize) {
        if self.abortable {
            self.shared.hub.broadcast(&format!("PROGRESS {done}/{total}"));
        }
    }

    fn should_abort(&mut self) -> bool {
        self.abortable && self.shared.abort.load(Ordering::SeqCst)
    }
}

fn true_position(session: &dyn Session) -> String {
    session
        .telemetry()
        .and_then(|t| t.latest())
        .and_then(|s| s.position)
        .map(xyz)
        .unwrap_or_else(|| "none".into())
}

fn worker(
    mut controller: Controller,
    mut session: Box<dyn Session + Send>,
    mut device: Box<dyn DeviceSource + Send>,
    jobs: Receiver<Job>,
    shared: Arc<Shared>,
) {
    let mut last_log: Vec<LogRecord> = Vec::new();
    for job in jobs {
        let trace = match job {
            Job::Snapshot(client) => {
                let anchors: Vec<String> = controller.rig().layout.anchors().iter().map(|a| xyz(*a)).collect();
                let line = format!(
                    "SNAPSHOT anchors={} home={} believed={} true={} busy={}",
                    anchors.join(";"),
                    xyz(controller.rig().home),
                    xyz(controller.believed()),
                    true_position(session.as_ref()),
                    u8::from(shared.busy.load(Ordering::SeqCst))
                );
                shared.hub.send_to(client, &line);
                continue;
            }
            Job::Csv(client) => {
                let mut buf = Vec::new();
                if write_csv(&last_log, &mut buf).is_ok() {
                    for line in String::from_utf8_lossy(&buf).lines() {
                        shared.hub.send_to(client, &format!("CSV {line}"));
                    }
                }
                shared.hub.send_to(client, "CSV-END");
                continue;
            }
            Job::Goto(target, speed_cm_s) => (
                Trace {
                    steps: vec![(1, Instruction::Goto { target, speed_cm_s })],
                },
                false,
            ),
            Job::Home => (
                Trace {
                    steps: vec![(1, Instruction::Home)],
                },
                false,
            ),
            Job::Trace(t) => (t, true),
        };
        let (trace, abortable) = trace;
        shared.busy.store(true, Ordering::SeqCst);
        let mut observer = Broadcast {
            shared: &shared,
            abortable,
        };
        let outcome = controller.run_trace(session.as_mut(), &trace, device.as_mut(), &mut observer);
        if abortable {
            last_log = outcome.records;
        }
        shared.busy.store(false, Ordering::SeqCst);
        shared.hub.broadcast(&format!(
            "POSE believed={} true={}",
            xyz(controller.believed()),
            true_position(session.as_ref())
        ));
    }
}

fn client(stream: TcpStream, id: usize, jobs: Sender<Job>, shared: Arc<Shared>) -> io::Result<()> {
    let mut lines = BufReader::new(stream).lines();
    let _ = jobs.send(Job::Snapshot(id));
    while let Some(line) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let job = match parse_bridge_command(&line) {
            Err(reason) => {
                shared.hub.send_to(id, &format!("REJECT {reason}"));
                continue;
            }
            Ok(BridgeCommand::TraceAbort) => {
                shared.abort.store(true, Ordering::SeqCst);
                shared.hub.send_to(id, "QUEUED TRACE-ABORT");
                continue;
            }
            Ok(BridgeCommand::Snapshot) => Job::Snapshot(id),
            Ok(BridgeCommand::TraceCsv) => Job::Csv(id),
            Ok(BridgeCommand::Goto { target, speed_cm_s }) => Job::Goto(target, speed_cm_s),
            Ok(BridgeCommand::Home) => Job::Home,
            Ok(BridgeCommand::TraceStart(n)) => {
                let mut body = String::new();
                for _ in 0..n {
                    match lines.next() {
                        Some(l) => {
                            body.push_str(&l?);
                            body.push('\n');
                        }
                        None => return Ok(()),
                    }
                }
                match parse_trace(&body) {
                    Ok(trace) => {
                        shared.abort.store(false, Ordering::SeqCst);
                        Job::Trace(trace)
                    }
                    Err(e) => {
                        shared.hub.send_to(id, &format!("REJECT trace {e}"));
                        continue;
                    }
                }
            }
        };
        if !matches!(job, Job::Snapshot(_) | Job::Csv(_)) {
            shared.hub.send_to(id, &format!("QUEUED {}", line.trim()));
        }
        if jobs.send(job).is_err() {
            break;
        }
    }
    Ok(())
}

/// Serves clients until `options.shutdown` is set. Commands from every
/// client run one at a time on `controller` and `session`.
pub fn run_bridge(
    listener: TcpListener,
    controller: Controller,
    session: Box<dyn Session + Send>,
    options: BridgeOptions,
) -> io::Result<()> {
    let shared = Arc::new(Shared {
        hub: Hub::default(),
        abort: AtomicBool::new(false),
        busy: AtomicBool::new(false),
    });
    let (tx, rx) = mpsc::channel();
    let worker_shared = Arc::clone(&shared);
    let device = options.device;
    let worker_handle = thread::spawn(move || worker(controller, session, device, rx, worker_shared));

    listener.set_nonblocking(true)?;
    let next_id = AtomicUsize::new(1);
    while !options.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                let id = next_id.fetch_add(1, Ordering::SeqCst);
                shared.hub.clients.lock().expect("hub lock").push((id, stream.try_clone()?));
                let (jobs, shared) = (tx.clone(), Arc::clone(&shared));
                thread::spawn(move || {
                    let _ = client(stream, id, jobs, shared);
                });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(e),
        }
    }
    for (_, s) in shared.hub.clients.lock().expect("hub lock").drain(..) {
        let _ = s.shutdown(std::net::Shutdown::Both);
    }
    drop(tx);
    let _ = worker_handle.join();
    Ok(())
}
