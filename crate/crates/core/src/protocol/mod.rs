//! Line protocol between the system controller and a motor controller.
//!
//! Every message is one ASCII line of space-separated fields terminated by
//! `\n`. Controller to motor controller:
//!
//! ```text
//! CONFIG motors=3 spr=200 r0=2000000 r1=2000000 r2=2000000
//! HOME
//! MOVE id=7 m0=+398 m1=-12 m2=+55 m3=0 t=2500
//! STATUS id=8
//! PING
//! ```
//!
//! Motor controller to controller:
//!
//! ```text
//! ACK id=7
//! ERR id=7 code=UNSPOOL msg=motor 2 would unspool past an empty wheel
//! STATE id=8 m0=+398 m1=-12 m2=+55
//! ```
//!
//! Radii travel in centi-micrometres (1e-6 cm). Steps carry an explicit sign
//! except zero. Commands without an id (CONFIG, HOME, PING) are answered with
//! `ACK id=0`. Decoding is strict: fixed field order, no unknown or repeated
//! keys, single spaces.

mod emulator;
mod server;
mod session;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use emulator::{apply_move, Emulator, EmulatorOptions, PlantState, Telemetry, TelemetrySnapshot};
pub use server::{serve, serve_stream, serve_tcp, Endpoint};
pub use session::{LocalSession, Session, SessionError, StreamSession};

/// Motors addressable by one controller.
pub const MAX_PROTOCOL_MOTORS: usize = 4;
/// Exclusive bound on the magnitude of a per-motor step count.
pub const MAX_STEP_MAGNITUDE: i64 = 1 << 31;
pub const MAX_LINE_BYTES: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Config {
        steps_per_rev: u32,
        base_radius_centi_um: Vec<u64>,
    },
    Home,
    Move {
        id: u64,
        steps: Vec<i64>,
        duration_ms: u64,
    },
    Status {
        id: u64,
    },
    Ping,
}

impl Command {
    pub fn motors(&self) -> Option<usize> {
        match self {
            Command::Config {
                base_radius_centi_um,
                ..
            } => Some(base_radius_centi_um.len()),
            Command::Move { steps, .. } => Some(steps.len()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    /// Line could not be decoded.
    BadCmd,
    /// Motion before the first HOME.
    NoHome,
    /// A motor would unspool past an empty wheel.
    Unspool,
    /// Wire lengths no longer describe a point.
    Geom,
    /// MOVE id not strictly increasing.
    BadId,
    /// CONFIG or motor count disagrees with the rig.
    Config,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::BadCmd => "BADCMD",
            ErrorCode::NoHome => "NOHOME",
            ErrorCode::Unspool => "UNSPOOL",
            ErrorCode::Geom => "GEOM",
            ErrorCode::BadId => "BADID",
            ErrorCode::Config => "CONFIG",
        }
    }
}

impl FromStr for ErrorCode {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "BADCMD" => ErrorCode::BadCmd,
            "NOHOME" => ErrorCode::NoHome,
            "UNSPOOL" => ErrorCode::Unspool,
            "GEOM" => ErrorCode::Geom,
            "BADID" => ErrorCode::BadId,
            "CONFIG" => ErrorCode::Config,
            _ => return Err(()),
        })
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Ack { id: u64 },
    Err { id: u64, code: ErrorCode, message: String },
    State { id: u64, steps: Vec<i64> },
}

impl Reply {
    /// Error reply; line breaks in `message` become spaces.
    pub fn error(id: u64, code: ErrorCode, message: impl Into<String>) -> Self {
        let message = message
            .into()
            .chars()
            .map(|c| if c.is_ascii_graphic() || c == ' ' { c } else { ' ' })
            .collect();
        Reply::Err { id, code, message }
    }

    pub fn id(&self) -> u64 {
        match self {
            Reply::Ack { id } | Reply::Err { id, .. } | Reply::State { id, .. } => *id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed line: {0}")]
pub struct DecodeError(pub String);

fn bad(msg: impl Into<String>) -> DecodeError {
    DecodeError(msg.into())
}

fn signed(n: i64) -> String {
    if n > 0 {
        format!("+{n}")
    } else {
        n.to_string()
    }
}

fn push_steps(out: &mut String, steps: &[i64]) {
    for (i, s) in steps.iter().enumerate() {
        out.push_str(&format!(" m{i}={}", signed(*s)));
    }
}

pub fn encode(cmd: &Command) -> Vec<u8> {
    let mut line = match cmd {
        Command::Config {
            steps_per_rev,
            base_radius_centi_um,
        } => {
            let mut s = format!("CONFIG motors={} spr={steps_per_rev}", base_radius_centi_um.len());
            for (i, r) in base_radius_centi_um.iter().enumerate() {
                s.push_str(&format!(" r{i}={r}"));
            }
            s
        }
        Command::Home => "HOME".to_string(),
        Command::Move {
            id,
            steps,
            duration_ms,
        } => {
            let mut s = format!("MOVE id={id}");
            push_steps(&mut s, steps);
            s.push_str(&format!(" t={duration_ms}"));
            s
        }
        Command::Status { id } => format!("STATUS id={id}"),
        Command::Ping => "PING".to_string(),
    };
    line.push('\n');
    line.into_bytes()
}

pub fn encode_reply(reply: &Reply) -> Vec<u8> {
    let mut line = match reply {
        Reply::Ack { id } => format!("ACK id={id}"),
        Reply::Err { id, code, message } => format!("ERR id={id} code={code} msg={message}"),
        Reply::State { id, steps } => {
            let mut s = format!("STATE id={id}");
            push_steps(&mut s, steps);
            s
        }
    };
    line.push('\n');
    line.into_bytes()
}

/// Checks framing and character set, returning the line without its
/// terminator.
fn line_text(line: &[u8]) -> Result<&str, DecodeError> {
    if line.len() > MAX_LINE_BYTES {
        return Err(bad("line too long"));
    }
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    if line.iter().any(|&b| !(b == b' ' || b.is_ascii_graphic())) {
        return Err(bad("non-printable or non-ASCII byte"));
    }
    let text = std::str::from_utf8(line).map_err(|_| bad("not ASCII"))?;
    if text.is_empty() {
        return Err(bad("empty line"));
    }
    Ok(text)
}

fn split_fields(text: &str) -> Result<Vec<&str>, DecodeError> {
    let parts: Vec<&str> = text.split(' ').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("stray whitespace"));
    }
    Ok(parts)
}

fn tokens(line: &[u8]) -> Result<Vec<&str>, DecodeError> {
    split_fields(line_text(line)?)
}

fn field<'a>(token: Option<&&'a str>, key: &str) -> Result<&'a str, DecodeError> {
    let token = token.ok_or_else(|| bad(format!("missing {key}=")))?;
    token
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix('='))
        .ok_or_else(|| bad(format!("expected {key}=, got {token:?}")))
}

fn unsigned(text: &str, key: &str) -> Result<u64, DecodeError> {
    if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad(format!("{key} must be an unsigned integer")));
    }
    if text.len() > 1 && text.starts_with('0') {
        return Err(bad(format!("{key} has a leading zero")));
    }
    text.parse().map_err(|_| bad(format!("{key} out of range")))
}

fn step_count(text: &str, key: &str) -> Result<i64, DecodeError> {
    if text == "0" {
        return Ok(0);
    }
    // one spelling per value: explicit sign, no leading zero
    let digits = text
        .strip_prefix(['+', '-'])
        .ok_or_else(|| bad(format!("{key} needs an explicit sign")))?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
        return Err(bad(format!("{key} must be a signed integer")));
    }
    let n: i64 = text.parse().map_err(|_| bad(format!("{key} out of range")))?;
    if n.abs() >= MAX_STEP_MAGNITUDE {
        return Err(bad(format!("{key} magnitude must be below 2^31")));
    }
    Ok(n)
}

/// Reads `m0= m1= ...` from the front of `rest`, stopping at the first token
/// that is not a motor field.
fn motor_fields(rest: &[&str]) -> Result<Vec<i64>, DecodeError> {
    let mut steps = Vec::new();
    for token in rest {
        let key = format!("m{}", steps.len());
        if !token.starts_with('m') {
            break;
        }
        let value = field(Some(token), &key)?;
        steps.push(step_count(value, &key)?);
    }
    if steps.is_empty() || steps.len() > MAX_PROTOCOL_MOTORS {
        return Err(bad(format!("need 1 to {MAX_PROTOCOL_MOTORS} motor fields")));
    }
    Ok(steps)
}

fn finish(rest: &[&str]) -> Result<(), DecodeError> {
    match rest.first() {
        None => Ok(()),
        Some(t) => Err(bad(format!("unexpected field {t:?}"))),
    }
}

pub fn decode(line: &[u8]) -> Result<Command, DecodeError> {
    let parts = tokens(line)?;
    let (verb, rest) = parts.split_first().expect("tokens are non-empty");
    match *verb {
        "CONFIG" => {
            let motors = unsigned(field(rest.first(), "motors")?, "motors")? as usize;
            if motors == 0 || motors > MAX_PROTOCOL_MOTORS {
                return Err(bad(format!("motors must be 1 to {MAX_PROTOCOL_MOTORS}")));
            }
            let spr = unsigned(field(rest.get(1), "spr")?, "spr")?;
            let steps_per_rev = u32::try_from(spr).map_err(|_| bad("spr out of range"))?;
            if steps_per_rev == 0 {
                return Err(bad("spr must be positive"));
            }
            let mut radii = Vec::with_capacity(motors);
            for i in 0..motors {
                let key = format!("r{i}");
                radii.push(unsigned(field(rest.get(2 + i), &key)?, &key)?);
            }
            finish(&rest[2 + motors..])?;
            Ok(Command::Config {
                steps_per_rev,
                base_radius_centi_um: radii,
            })
        }
        "HOME" => finish(rest).map(|_| Command::Home),
        "PING" => finish(rest).map(|_| Command::Ping),
        "MOVE" => {
            let id = unsigned(field(rest.first(), "id")?, "id")?;
            let steps = motor_fields(&rest[1..])?;
            let after = 1 + steps.len();
            let duration_ms = unsigned(field(rest.get(after), "t")?, "t")?;
            finish(&rest[after + 1..])?;
            Ok(Command::Move {
                id,
                steps,
                duration_ms,
            })
        }
        "STATUS" => {
            let id = unsigned(field(rest.first(), "id")?, "id")?;
            finish(&rest[1..])?;
            Ok(Command::Status { id })
        }
        other => Err(bad(format!("unknown command {other:?}"))),
    }
}

pub fn decode_reply(line: &[u8]) -> Result<Reply, DecodeError> {
    let text = line_text(line)?;
    // the ERR message is free text, spaces included; only its prefix is tokenized
    let (head, message) = match text.split_once(" msg=") {
        Some((head, msg)) if head.starts_with("ERR ") => (head, Some(msg)),
        _ => (text, None),
    };
    let parts = split_fields(head)?;
    let (verb, rest) = parts.split_first().expect("split yields one field");
    let id = unsigned(field(rest.first(), "id")?, "id")?;
    match *verb {
        "ACK" => finish(&rest[1..]).map(|_| Reply::Ack { id }),
        "STATE" => {
            let steps = motor_fields(&rest[1..])?;
            finish(&rest[1 + steps.len()..])?;
            Ok(Reply::State { id, steps })
        }
        "ERR" => {
            let code = field(rest.get(1), "code")?;
            let code = code.parse().map_err(|_| bad(format!("unknown error code {code:?}")))?;
            finish(&rest[2..])?;
            let message = message.ok_or_else(|| bad("missing msg="))?;
            Ok(Reply::Err {
                id,
                code,
                message: message.to_string(),
            })
        }
        other => Err(bad(format!("unknown reply {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn move_golden_line() {
        let cmd = Command::Move {
            id: 7,
            steps: vec![398, -12, 55, 0],
            duration_ms: 2500,
        };
        assert_eq!(encode(&cmd), b"MOVE id=7 m0=+398 m1=-12 m2=+55 m3=0 t=2500\n");
        assert_eq!(decode(&encode(&cmd)).unwrap(), cmd);
    }

    #[test]
    fn other_golden_lines() {
        let cfg = Command::Config {
            steps_per_rev: 200,
            base_radius_centi_um: vec![2_000_000; 3],
        };
        assert_eq!(
            encode(&cfg),
            b"CONFIG motors=3 spr=200 r0=2000000 r1=2000000 r2=2000000\n"
        );
        assert_eq!(encode(&Command::Home), b"HOME\n");
        assert_eq!(encode(&Command::Ping), b"PING\n");
        assert_eq!(encode(&Command::Status { id: 4 }), b"STATUS id=4\n");
        assert_eq!(encode_reply(&Reply::Ack { id: 7 }), b"ACK id=7\n");
        assert_eq!(
            encode_reply(&Reply::State {
                id: 4,
                steps: vec![398, -12, 0]
            }),
            b"STATE id=4 m0=+398 m1=-12 m2=0\n"
        );
        let err = Reply::error(9, ErrorCode::Unspool, "motor 2\nempty");
        assert_eq!(encode_reply(&err), b"ERR id=9 code=UNSPOOL msg=motor 2 empty\n");
        assert_eq!(decode_reply(&encode_reply(&err)).unwrap(), err);
    }

    #[test]
    fn malformed_lines() {
        let corpus: &[&[u8]] = &[
            b"MOVE id=x m0=+1 t=5\n",
            b"MOVE id=1 m0=+1\n",
            b"MOVE id=1 t=5\n",
            b"MOVE id=1 m1=+1 t=5\n",
            b"MOVE id=1 m0=+1 m1=2 m2=3 m3=4 m4=5 t=5\n",
            b"MOVE id=1 m0=+2147483648 t=5\n",
            b"MOVE id=1 m0=+1 t=5 x=1\n",
            b"MOVE  id=1 m0=+1 t=5\n",
            b"MOVE id=-1 m0=+1 t=5\n",
            b"MOVE id=1 m0=++1 t=5\n",
            b"MOVE id=1 m0=1.5 t=5\n",
            b"MOVE id=1 m0=1 t=5\n",
            b"MOVE id=1 m0=+0 t=5\n",
            b"MOVE id=1 m0=-07 t=5\n",
            b"MOVE id=01 m0=+1 t=5\n",
            b"move id=1 m0=+1 t=5\n",
            b"CONFIG motors=5 spr=200 r0=1 r1=1 r2=1 r3=1 r4=1\n",
            b"CONFIG motors=2 spr=200 r0=1\n",
            b"CONFIG motors=1 spr=0 r0=1\n",
            b"HOME now\n",
            b"STATUS\n",
            b"\n",
            b"",
            b"PING\xff\n",
            b"FLY\n",
        ];
        for line in corpus {
            assert!(decode(line).is_err(), "{:?}", String::from_utf8_lossy(line));
        }
    }

    #[test]
    fn accepts_crlf_only_in_canonical_form() {
        let line = b"MOVE id=1 m0=+5 m1=0 t=0\r\n";
        let cmd = decode(line).unwrap();
        assert_eq!(
            cmd,
            Command::Move {
                id: 1,
                steps: vec![5, 0],
                duration_ms: 0
            }
        );
        assert_eq!(encode(&cmd), b"MOVE id=1 m0=+5 m1=0 t=0\n");
        assert!(decode(b"MOVE id=1 m0=5 m1=-0 t=0\r\n").is_err());
    }

    fn command() -> impl Strategy<Value = Command> {
        let steps = prop::collection::vec(-(MAX_STEP_MAGNITUDE - 1)..MAX_STEP_MAGNITUDE, 1..=4);
        prop_oneof![
            (1u32..100_000, prop::collection::vec(any::<u64>(), 1..=4)).prop_map(|(spr, r)| {
                Command::Config {
                    steps_per_rev: spr,
                    base_radius_centi_um: r,
                }
            }),
            Just(Command::Home),
            Just(Command::Ping),
            (any::<u64>(), steps, any::<u64>()).prop_map(|(id, steps, t)| Command::Move {
                id,
                steps,
                duration_ms: t
            }),
            any::<u64>().prop_map(|id| Command::Status { id }),
        ]
    }

    proptest! {
        #[test]
        fn command_round_trip(cmd in command()) {
            prop_assert_eq!(decode(&encode(&cmd)).unwrap(), cmd);
        }

        #[test]
        fn reply_round_trip(id in any::<u64>(), msg in "[ -~]{0,80}", steps in prop::collection::vec(-1000i64..1000, 1..=4)) {
            for reply in [
                Reply::Ack { id },
                Reply::error(id, ErrorCode::Geom, msg.clone()),
                Reply::State { id, steps: steps.clone() },
            ] {
                prop_assert_eq!(decode_reply(&encode_reply(&reply)).unwrap(), reply);
            }
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode(&bytes);
            let _ = decode_reply(&bytes);
        }

        #[test]
        fn accepted_lines_are_canonical(
            verb in "(MOVE|STATUS|CONFIG|HOME|PING)",
            fields in prop::collection::vec("(id|t|spr|motors|m[0-3]|r[0-3])=[+-]?[0-9]{1,3}", 0..6),
        ) {
            let line = std::iter::once(verb).chain(fields).collect::<Vec<_>>().join(" ") + "\n";
            if let Ok(cmd) = decode(line.as_bytes()) {
                prop_assert_eq!(String::from_utf8(encode(&cmd)).unwrap(), line);
            }
        }
    }
}
