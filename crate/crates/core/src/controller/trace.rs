//! `.trace` files: one instruction per line.
//!
//! ```text
//! # comments start with '#'
//! GOTO 325 130 150        # optional fourth field: speed in cm/s
//! DWELL 1000
//! AWAIT "sample done" 5000
//! AWAIT /^T=\d+/ 2000
//! AWAIT READY 100
//! LOG free text
//! HOME
//! ```

use std::fmt;

use regex::Regex;
use thiserror::Error;

use crate::kinematics::Point3;

#[derive(Debug, Clone)]
pub enum Pattern {
    Literal(String),
    Regex(Regex),
}

impl Pattern {
    /// Literal patterns match anywhere in the line.
    pub fn matches(&self, line: &str) -> bool {
        match self {
            Pattern::Literal(s) => line.contains(s.as_str()),
            Pattern::Regex(r) => r.is_match(line),
        }
    }
}

impl PartialEq for Pattern {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Pattern::Literal(a), Pattern::Literal(b)) => a == b,
            (Pattern::Regex(a), Pattern::Regex(b)) => a.as_str() == b.as_str(),
            _ => false,
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Literal(s) if is_bare(s) => f.write_str(s),
            Pattern::Literal(s) => write!(f, "\"{s}\""),
            Pattern::Regex(r) => write!(f, "/{}/", r.as_str()),
        }
    }
}

fn is_bare(s: &str) -> bool {
    !s.is_empty()
        && !s.chars().any(char::is_whitespace)
        && !s.starts_with(['"', '/', '#'])
        && !s.contains('#')
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instruction {
    Goto { target: Point3, speed_cm_s: Option<f64> },
    Dwell { ms: u64 },
    Await { pattern: Pattern, timeout_ms: u64 },
    Log { text: String },
    Home,
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Goto { target, speed_cm_s } => {
                write!(f, "GOTO {} {} {}", target.x, target.y, target.z)?;
                if let Some(s) = speed_cm_s {
                    write!(f, " {s}")?;
                }
                Ok(())
            }
            Instruction::Dwell { ms } => write!(f, "DWELL {ms}"),
            Instruction::Await { pattern, timeout_ms } => write!(f, "AWAIT {pattern} {timeout_ms}"),
            Instruction::Log { text } if text.is_empty() => f.write_str("LOG"),
            Instruction::Log { text } => write!(f, "LOG {text}"),
            Instruction::Home => f.write_str("HOME"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    /// Instructions with their 1-based source line.
    pub steps: Vec<(usize, Instruction)>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.steps.iter().map(|(_, i)| i)
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in self.instructions() {
            writeln!(f, "{i}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

fn number(token: &str, what: &str) -> Result<f64, String> {
    let v: f64 = token.parse().map_err(|_| format!("{what} {token:?} is not a number"))?;
    if !v.is_finite() {
        return Err(format!("{what} must be finite"));
    }
    Ok(v)
}

fn positive_ms(token: &str, what: &str) -> Result<u64, String> {
    token
        .parse::<u64>()
        .map_err(|_| format!("{what} {token:?} is not a whole number of ms"))
}

/// Strips a trailing comment. A `#` inside a quoted or slash-delimited
/// AWAIT pattern is not a comment.
fn strip_comment(line: &str) -> &str {
    let mut quote: Option<char> = None;
    let mut prev = ' ';
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) if c == q && prev != '\\' => quote = None,
            Some(_) => {}
            None if c == '#' => return &line[..i],
            None if (c == '"' || c == '/') && prev.is_whitespace() => quote = Some(c),
            None => {}
        }
        prev = c;
    }
    line
}

fn parse_await(rest: &str) -> Result<Instruction, String> {
    let rest = rest.trim();
    let (pattern, timeout) = rest
        .rsplit_once(char::is_whitespace)
        .ok_or("AWAIT needs a pattern and a timeout")?;
    let timeout_ms = positive_ms(timeout, "timeout")?;
    if timeout_ms == 0 {
        return Err("timeout must be positive".into());
    }
    let pattern = pattern.trim_end();
    let pattern = if let Some(inner) = pattern.strip_prefix('"').and_then(|p| p.strip_suffix('"')) {
        if inner.is_empty() {
            return Err("empty pattern".into());
        }
        Pattern::Literal(inner.to_string())
    } else if let Some(inner) = pattern.strip_prefix('/').and_then(|p| p.strip_suffix('/')) {
        if inner.is_empty() {
            return Err("empty pattern".into());
        }
        Pattern::Regex(Regex::new(inner).map_err(|e| format!("bad regular expression: {e}"))?)
    } else if is_bare(pattern) {
        Pattern::Literal(pattern.to_string())
    } else {
        return Err(format!("pattern {pattern:?} must be a word, \"quoted\" or /regex/"));
    };
    Ok(Instruction::Await { pattern, timeout_ms })
}

fn parse_line(text: &str) -> Result<Option<Instruction>, String> {
    let text = strip_comment(text).trim();
    if text.is_empty() {
        return Ok(None);
    }
    let (verb, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
    let args: Vec<&str> = rest.split_whitespace().collect();
    let arity = |lo: usize, hi: usize| {
        if args.len() < lo || args.len() > hi {
            let want = if lo == hi { lo.to_string() } else { format!("{lo} or {hi}") };
            Err(format!("{verb} takes {want} arguments, got {}", args.len()))
        } else {
            Ok(())
        }
    };
    let instruction = match verb {
        "GOTO" => {
            arity(3, 4)?;
            let target = Point3::new(number(args[0], "x")?, number(args[1], "y")?, number(args[2], "z")?);
            let speed_cm_s = match args.get(3) {
                Some(s) => {
                    let v = number(s, "speed")?;
                    if v <= 0.0 {
                        return Err("speed must be positive".into());
                    }
                    Some(v)
                }
                None => None,
            };
            Instruction::Goto { target, speed_cm_s }
        }
        "DWELL" => {
            arity(1, 1)?;
            Instruction::Dwell {
                ms: positive_ms(args[0], "duration")?,
            }
        }
        "AWAIT" => parse_await(rest)?,
        "LOG" => Instruction::Log {
            text: rest.trim().to_string(),
        },
        "HOME" => {
            arity(0, 0)?;
            Instruction::Home
        }
        other => return Err(format!("unknown instruction {other:?}")),
    };
    Ok(Some(instruction))
}

pub fn parse_trace(text: &str) -> Result<Trace, TraceError> {
    let mut steps = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        match parse_line(raw) {
            Ok(Some(i)) => steps.push((line, i)),
            Ok(None) => {}
            Err(message) => return Err(TraceError { line, message }),
        }
    }
    Ok(Trace { steps })
}
