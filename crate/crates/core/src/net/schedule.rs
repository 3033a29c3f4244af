//! Scripted adversary.
//!
//! A schedule is a seed plus an ordered rule list. Each transmission attempt
//! of a frame is matched against the rules; the first rule that matches and
//! still has budget decides what the adversary does with that attempt.
//!
//! Config file schema (TOML):
//!
//! ```toml
//! seed = 7
//!
//! [[rules]]
//! from = 1          # sending device      (omit = any)
//! to = 2            # receiving device    (omit = any)
//! session = 10      # session id          (omit = any)
//! index = 3         # n-th frame on the (from, to, session) channel (omit = any)
//! attempt = 0       # transmission attempt of that frame, 0 = first (omit = any)
//! times = 1         # how often the rule may fire (omit = unlimited)
//! action = { kind = "drop" }
//! ```
//!
//! Actions: `drop`, `duplicate`, `delay { ns }`, `reorder` (swap with the
//! next frame on the same channel), `tamper_bit { offset }` (bit offset into
//! the encoded frame; omitted = seeded random), `replay { index }` (re-inject
//! an earlier frame of the same channel), `inject_forged { frame_hex }`
//! (omitted = seeded random tag over the current header).

use serde::{Deserialize, Serialize};

use crate::kernel::{DeviceId, SessionId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultAction {
    Drop,
    Duplicate,
    Delay { ns: u64 },
    Reorder,
    TamperBit {
        #[serde(default)]
        offset: Option<u32>,
    },
    Replay { index: u64 },
    InjectForged {
        #[serde(default)]
        frame_hex: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRule {
    #[serde(default)]
    pub from: Option<DeviceId>,
    #[serde(default)]
    pub to: Option<DeviceId>,
    #[serde(default)]
    pub session: Option<SessionId>,
    #[serde(default)]
    pub index: Option<u64>,
    #[serde(default)]
    pub attempt: Option<u32>,
    #[serde(default)]
    pub times: Option<u32>,
    pub action: FaultAction,
}

impl FaultRule {
    pub fn new(action: FaultAction) -> Self {
        Self {
            from: None,
            to: None,
            session: None,
            index: None,
            attempt: None,
            times: None,
            action,
        }
    }

    pub fn on_session(mut self, session: SessionId) -> Self {
        self.session = Some(session);
        self
    }

    pub fn from(mut self, device: DeviceId) -> Self {
        self.from = Some(device);
        self
    }

    pub fn to(mut self, device: DeviceId) -> Self {
        self.to = Some(device);
        self
    }

    pub fn at_index(mut self, index: u64) -> Self {
        self.index = Some(index);
        self
    }

    pub fn at_attempt(mut self, attempt: u32) -> Self {
        self.attempt = Some(attempt);
        self
    }

    pub fn times(mut self, n: u32) -> Self {
        self.times = Some(n);
        self
    }

    pub fn matches(&self, from: DeviceId, to: DeviceId, session: SessionId, index: u64, attempt: u32) -> bool {
        self.from.map_or(true, |d| d == from)
            && self.to.map_or(true, |d| d == to)
            && self.session.map_or(true, |s| s == session)
            && self.index.map_or(true, |i| i == index)
            && self.attempt.map_or(true, |a| a == attempt)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSchedule {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rules: Vec<FaultRule>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScheduleError {
    #[error("schedule parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("schedule serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
}

impl FaultSchedule {
    pub fn new(seed: u64) -> Self {
        Self { seed, rules: Vec::new() }
    }

    pub fn with_rule(mut self, rule: FaultRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn from_toml(text: &str) -> Result<Self, ScheduleError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String, ScheduleError> {
        Ok(toml::to_string(self)?)
    }
}
