//! Line-event sources: whatever the experiment's sensor node prints.

use std::collections::VecDeque;

/// A stream of timestamped text lines on the controller's virtual clock.
pub trait DeviceSource {
    /// Next line emitted at or before `until_ms`, if any. Lines come out in
    /// timestamp order and are consumed.
    fn poll(&mut self, until_ms: u64) -> Option<(u64, String)>;
}

/// A device that never says anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct SilentDevice;

impl DeviceSource for SilentDevice {
    fn poll(&mut self, _until_ms: u64) -> Option<(u64, String)> {
        None
    }
}

/// Replays a fixed script of `(time_ms, line)` emissions.
#[derive(Debug, Default, Clone)]
pub struct ScriptedDevice {
    lines: VecDeque<(u64, String)>,
}

impl ScriptedDevice {
    pub fn new(mut lines: Vec<(u64, String)>) -> Self {
        lines.sort_by_key(|(t, _)| *t);
        Self { lines: lines.into() }
    }

    /// Parses `<ms> <text>` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let raw = raw.trim_end();
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let (t, rest) = raw.trim_start().split_once(' ').unwrap_or((raw.trim_start(), ""));
            let t = t.parse().map_err(|_| format!("line {}: {t:?} is not a time in ms", i + 1))?;
            lines.push((t, rest.to_string()));
        }
        Ok(Self::new(lines))
    }

    pub fn remaining(&self) -> usize {
        self.lines.len()
    }
}

impl DeviceSource for ScriptedDevice {
    fn poll(&mut self, until_ms: u64) -> Option<(u64, String)> {
        match self.lines.front() {
            Some((t, _)) if *t <= until_ms => self.lines.pop_front(),
            _ => None,
        }
    }
}
