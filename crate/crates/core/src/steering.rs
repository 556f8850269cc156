//! Live steering: the "ssim/1" wire protocol and a deterministic session
//! that applies operator commands at step boundaries and logs them for
//! replay.
//!
//! Framing: each message is its payload length in bytes as ASCII decimal,
//! a `\n`, then a JSON object of exactly that length. Every payload carries
//! `"v": "ssim/1"`.

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::harness::{Cue, LightAction, Recorder, Script, Simulation, Trigger};
use crate::record::{TerminationReason, TrajectoryRecord};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const PROTOCOL_VERSION: &str = "ssim/1";
/// Frames larger than this are rejected without reading them.
pub const MAX_FRAME_BYTES: usize = 1 << 20;
pub const DEFAULT_SNAPSHOT_HZ: f64 = 30.0;
pub const MAX_TIMESCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    PlaceLight { x: f64, y: f64 },
    ToggleLight { id: u32 },
    RemoveLight { id: u32 },
    Pause,
    Resume,
    Reset { seed: u64 },
    SetTimescale { k: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Hello,
    Command {
        /// Client-chosen tag echoed in the reply.
        id: u64,
        cmd: Command,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmarticleView {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightView {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub on: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub step: u64,
    pub ring_x: f64,
    pub ring_y: f64,
    pub ring_heading: f64,
    pub ring_radius: f64,
    pub plate_half_extent: f64,
    pub smarticles: Vec<SmarticleView>,
    pub lights: Vec<LightView>,
    pub paused: bool,
    pub ended: Option<TerminationReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    /// Carries the current state, since snapshots only stream while running.
    Welcome {
        seed: u64,
        config_hash: String,
        state: Snapshot,
    },
    /// Broadcast after a reset; sim time restarts from 0.
    Reset {
        seed: u64,
        config_hash: String,
        state: Snapshot,
    },
    Refused { reason: String },
    Ack {
        id: u64,
        time: f64,
        step: u64,
        /// Id assigned by `place_light`.
        #[serde(skip_serializing_if = "Option::is_none", default)]
        light_id: Option<u32>,
    },
    Error {
        #[serde(skip_serializing_if = "Option::is_none", default)]
        id: Option<u64>,
        reason: String,
    },
    Snapshot(Snapshot),
}

#[derive(Serialize)]
struct Versioned<'a, T> {
    v: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

pub fn encode_payload<T: Serialize>(msg: &T) -> String {
    serde_json::to_string(&Versioned {
        v: PROTOCOL_VERSION,
        body: msg,
    })
    .expect("protocol messages serialize")
}

pub fn write_frame<W: Write, T: Serialize>(w: &mut W, msg: &T) -> std::io::Result<()> {
    let payload = encode_payload(msg);
    write!(w, "{}\n{}", payload.len(), payload)?;
    w.flush()
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FrameError {
    #[error("connection closed")]
    Closed,
    #[error("bad frame header: {0}")]
    Header(String),
    #[error("frame of {0} bytes exceeds the limit")]
    TooLarge(usize),
    #[error("protocol version mismatch: expected {PROTOCOL_VERSION}, got {0}")]
    Version(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl FrameError {
    /// Whether the stream is still aligned on a frame boundary.
    pub fn recoverable(&self) -> bool {
        matches!(self, FrameError::Malformed(_))
    }
}

/// Reads one raw frame payload.
pub fn read_frame<R: BufRead>(r: &mut R) -> std::result::Result<String, FrameError> {
    let mut header = String::new();
    let n = std::io::Read::take(&mut *r, 24)
        .read_line(&mut header)
        .map_err(|e| FrameError::Io(e.to_string()))?;
    if n == 0 {
        return Err(FrameError::Closed);
    }
    let len_text = header.strip_suffix('\n').ok_or_else(|| FrameError::Header(header.clone()))?;
    let len: usize = len_text
        .trim_end_matches('\r')
        .parse()
        .map_err(|_| FrameError::Header(len_text.to_string()))?;
    if len > MAX_FRAME_BYTES {
        return Err(FrameError::TooLarge(len));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FrameError::Closed,
        _ => FrameError::Io(e.to_string()),
    })?;
    String::from_utf8(buf).map_err(|_| FrameError::Malformed("payload is not UTF-8".into()))
}

/// Checks the version field, then decodes the body.
pub fn decode_payload<T: for<'de> Deserialize<'de>>(payload: &str) -> std::result::Result<T, FrameError> {
    let mut value: serde_json::Value =
        serde_json::from_str(payload).map_err(|e| FrameError::Malformed(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| FrameError::Malformed("payload is not an object".into()))?;
    match obj.remove("v") {
        Some(serde_json::Value::String(v)) if v == PROTOCOL_VERSION => {}
        Some(other) => return Err(FrameError::Version(other.as_str().map_or(other.to_string(), str::to_string))),
        None => return Err(FrameError::Version("(missing)".into())),
    }
    serde_json::from_value(value).map_err(|e| FrameError::Malformed(e.to_string()))
}

pub fn read_message<R: BufRead, T: for<'de> Deserialize<'de>>(r: &mut R) -> std::result::Result<T, FrameError> {
    decode_payload(&read_frame(r)?)
}

/// One logged command, stamped with the step boundary it was applied at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub time: f64,
    pub cmd: Command,
    /// Id assigned to a placed light.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub light_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub seed: u64,
    pub config_hash: String,
    pub entries: Vec<LogEntry>,
}

impl SessionLog {
    /// JSON lines: a header object, then one entry per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::json!({
            "v": PROTOCOL_VERSION,
            "seed": self.seed,
            "config_hash": self.config_hash,
        })
        .to_string();
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: serde_json::Value = serde_json::from_str(lines.next().ok_or_else(|| Error::Parse("empty session log".into()))?)
            .map_err(|e| Error::Parse(e.to_string()))?;
        if header.get("v").and_then(|v| v.as_str()) != Some(PROTOCOL_VERSION) {
            return Err(Error::Parse("session log version mismatch".into()));
        }
        let seed = header
            .get("seed")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Parse("session log header lacks a seed".into()))?;
        let config_hash = header.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        let entries = lines
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<LogEntry>>>()?;
        Ok(Self { seed, config_hash, entries })
    }

    /// The light commands as a cue list keyed on step index. Pause, resume
    /// and timescale changes do not affect the trajectory and are dropped.
    pub fn to_script(&self) -> Result<Script> {
        let mut cues: Vec<Cue> = Vec::new();
        for e in &self.entries {
            let action = match e.cmd {
                Command::PlaceLight { x, y } => LightAction::Place {
                    id: e.light_id.ok_or_else(|| Error::Parse("place_light entry lacks its light id".into()))?,
                    x,
                    y,
                },
                Command::ToggleLight { id } => LightAction::Toggle { id },
                Command::RemoveLight { id } => LightAction::Remove { id },
                Command::Reset { .. } => {
                    return Err(Error::Parse("a session log spans a reset; split it first".into()))
                }
                Command::Pause | Command::Resume | Command::SetTimescale { .. } => continue,
            };
            match cues.last_mut() {
                Some(c) if c.trigger == (Trigger::AtStep { step: e.step }) => c.actions.push(action),
                _ => cues.push(Cue {
                    trigger: Trigger::AtStep { step: e.step },
                    actions: vec![action],
                }),
            }
        }
        Ok(Script { cues })
    }
}

/// A single live simulation driven by operator commands.
pub struct Session {
    base: ScenarioConfig,
    sim: Simulation,
    recorder: Recorder,
    paused: bool,
    timescale: f64,
    log: SessionLog,
}

impl Session {
    /// Starts paused at t = 0.
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let sim = Simulation::new(cfg)?;
        let recorder = Recorder::start(&sim);
        Ok(Self {
            base: cfg.clone(),
            log: SessionLog {
                seed: cfg.rng_seed,
                config_hash: cfg.hash(),
                entries: Vec::new(),
            },
            sim,
            recorder,
            paused: true,
            timescale: 1.0,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.sim.cfg
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn timescale(&self) -> f64 {
        self.timescale
    }

    pub fn time(&self) -> f64 {
        self.sim.state.time
    }

    pub fn step_index(&self) -> u64 {
        self.sim.state.step
    }

    pub fn ended(&self) -> Option<TerminationReason> {
        self.recorder.finished()
    }

    /// Commands since the last reset.
    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    pub fn trajectory(&self) -> TrajectoryRecord {
        self.recorder.record(&self.sim.cfg)
    }

    fn next_light_id(&self) -> u32 {
        self.sim.lights.iter().map(|l| l.id).max().map_or(1, |m| m + 1)
    }

    /// Applies `cmd` at the current step boundary. Returns the id of a
    /// placed light. Refused commands change nothing and are not logged.
    pub fn handle(&mut self, cmd: &Command) -> std::result::Result<Option<u32>, String> {
        let mut light_id = None;
        match *cmd {
            Command::PlaceLight { x, y } => {
                let id = self.next_light_id();
                self.sim.apply(&LightAction::Place { id, x, y })?;
                light_id = Some(id);
            }
            Command::ToggleLight { id } => self.sim.apply(&LightAction::Toggle { id })?,
            Command::RemoveLight { id } => self.sim.apply(&LightAction::Remove { id })?,
            Command::Pause => self.paused = true,
            Command::Resume => {
                if self.ended().is_some() {
                    return Err("trial has ended; reset to start another".into());
                }
                self.paused = false;
            }
            Command::SetTimescale { k } => {
                if !(k > 0.0 && k <= MAX_TIMESCALE) {
                    return Err(format!("timescale must be in (0, {MAX_TIMESCALE}], got {k}"));
                }
                self.timescale = k;
            }
            Command::Reset { seed } => {
                let mut cfg = self.base.clone();
                cfg.rng_seed = seed;
                let sim = Simulation::new(&cfg).map_err(|e| e.to_string())?;
                self.recorder = Recorder::start(&sim);
                self.sim = sim;
                self.paused = true;
                self.log = SessionLog {
                    seed,
                    config_hash: cfg.hash(),
                    entries: Vec::new(),
                };
                return Ok(None);
            }
        }
        self.log.entries.push(LogEntry {
            step: self.sim.state.step,
            time: self.sim.state.time,
            cmd: cmd.clone(),
            light_id,
        });
        Ok(light_id)
    }

    /// One physics step unless paused or ended. Returns whether it stepped.
    /// On physics failure the session pauses and reports the error.
    pub fn step(&mut self) -> Result<bool> {
        if self.paused || self.ended().is_some() {
            return Ok(false);
        }
        let time = self.sim.state.time;
        if let Err(source) = self.sim.advance() {
            self.paused = true;
            return Err(Error::Trial { time, source });
        }
        self.recorder.observe(&self.sim);
        if self.ended().is_some() {
            self.paused = true;
        }
        Ok(true)
    }

    pub fn snapshot(&self) -> Snapshot {
        let e = &self.sim.state;
        Snapshot {
            time: e.time,
            step: e.step,
            ring_x: e.ring.center.x,
            ring_y: e.ring.center.y,
            ring_heading: e.ring.heading,
            ring_radius: e.ring.radius,
            plate_half_extent: self.sim.cfg.plate_half_extent,
            smarticles: e
                .smarticles
                .iter()
                .map(|s| SmarticleView {
                    id: s.id,
                    x: s.center_pos.x,
                    y: s.center_pos.y,
                    heading: s.heading,
                    alpha1: s.alpha1,
                    alpha2: s.alpha2,
                    active: s.active,
                })
                .collect(),
            lights: self
                .sim
                .lights
                .iter()
                .map(|l| LightView {
                    id: l.id,
                    x: l.position.x,
                    y: l.position.y,
                    on: l.on,
                })
                .collect(),
            paused: self.paused,
            ended: self.ended(),
        }
    }
}
