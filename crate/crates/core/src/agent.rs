//! Measurement-unit agent: streams one report per epoch slot to the
//! concentrator. Detections come from a simulated scenario or a replay file;
//! the agent ships raw class counts and never computes masses.
//!
//! Replay file, one line per epoch, `#` starts a comment:
//!
//! ```text
//! # epoch class:count ...
//! 0 2:1 3:1
//! 1 2:1
//! 2
//! ```

use std::fmt::Write as _;
use std::io::{self, Write};
use std::net::{Shutdown, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;

use crate::concentrator::{now_ms, EpochClock};
use crate::scenario::{generate_detections, simulate, Scenario};
use crate::synchro::{ClassId, Counts};
use crate::tmn::{CompartmentId, GeoPoint};
use crate::wire::{encode, AckStatus, FrameReader, HelloMessage, Message, ReportMessage, PROTOCOL_VERSION};

const HELLO_REPLY_TIMEOUT: Duration = Duration::from_secs(60);
const FIRST_BACKOFF_MS: u64 = 100;
const MAX_BACKOFF_MS: u64 = 2_000;
const ACK_DRAIN_MS: u64 = 1_000;

/// One line of a detection stream: the counts seen during an epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub epoch: u64,
    pub counts: Counts,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("replay line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unit {0} has no detection stream in the scenario")]
    NoSuchUnit(CompartmentId),
    #[error("concentrator unreachable after {attempts} attempts: {last}")]
    ConnectionRefused { attempts: u32, last: io::Error },
    #[error("concentrator rejected the connection: {0}")]
    Rejected(String),
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Scenario(#[from] crate::Error),
}

pub fn parse_replay(text: &str) -> Result<Vec<Frame>, AgentError> {
    let mut frames: Vec<Frame> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let bad = |reason: String| AgentError::Parse { line, reason };
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut fields = body.split_whitespace();
        let epoch: u64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("expected an epoch number, got {body:?}")))?;
        if frames.last().is_some_and(|f| f.epoch >= epoch) {
            return Err(bad(format!("epoch {epoch} is not after the previous line")));
        }
        let mut counts = Counts::new();
        for pair in fields {
            let (q, c) = pair
                .split_once(':')
                .ok_or_else(|| bad(format!("expected class:count, got {pair:?}")))?;
            let q: u32 = q.parse().map_err(|_| bad(format!("bad class id {q:?}")))?;
            let c: u32 = c.parse().map_err(|_| bad(format!("bad count {c:?}")))?;
            if c == 0 {
                return Err(bad(format!("class {q} has a zero count")));
            }
            if counts.insert(ClassId(q), c).is_some() {
                return Err(bad(format!("class {q} listed twice")));
            }
        }
        frames.push(Frame { epoch, counts });
    }
    Ok(frames)
}

pub fn load_replay(path: &Path) -> Result<Vec<Frame>, AgentError> {
    parse_replay(&std::fs::read_to_string(path)?)
}

pub fn format_replay(frames: &[Frame]) -> String {
    let mut out = String::from("# epoch class:count ...\n");
    for f in frames {
        let _ = write!(out, "{}", f.epoch);
        for (q, c) in &f.counts {
            let _ = write!(out, " {q}:{c}");
        }
        out.push('\n');
    }
    out
}

/// The detection stream of one unit under a scenario, one frame per epoch.
pub fn scenario_frames(sc: &Scenario, unit: CompartmentId) -> Result<Vec<Frame>, AgentError> {
    let trace = simulate(sc).map_err(crate::Error::from)?;
    let mut streams = generate_detections(&trace, sc);
    let reports = streams.remove(&unit).ok_or(AgentError::NoSuchUnit(unit))?;
    Ok(reports
        .into_iter()
        .map(|r| Frame {
            epoch: r.epoch,
            counts: r.counts,
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub unit: CompartmentId,
    pub location: Option<GeoPoint>,
    pub frames: Vec<Frame>,
    /// Expected slot length; the concentrator's announced period wins.
    pub period_ms: u64,
    pub connect: String,
    pub reg_hash: String,
    pub max_attempts: u32,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.period_ms == 0 {
            return Err(AgentError::InvalidConfig("report period must be > 0".into()));
        }
        if self.max_attempts == 0 {
            return Err(AgentError::InvalidConfig(
                "at least one connection attempt is needed".into(),
            ));
        }
        Ok(())
    }
}

/// Wall-clock report period that keeps one scenario sample per slot at the
/// given compression (simulated hours per wall second).
pub fn period_for_tick_scale(sample_time_h: f64, tick_scale: f64) -> Result<u64, AgentError> {
    if !(tick_scale > 0.0 && tick_scale.is_finite()) {
        return Err(AgentError::InvalidConfig("tick scale must be > 0".into()));
    }
    let ms = (sample_time_h / tick_scale * 1_000.0).round();
    if ms < 1.0 {
        return Err(AgentError::InvalidConfig(format!(
            "tick scale {tick_scale} squeezes a {sample_time_h} h sample below 1 ms"
        )));
    }
    Ok(ms as u64)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentSummary {
    pub reports_sent: u64,
    pub skipped: u64,
    pub reconnects: u64,
    pub acked: u64,
    pub late: u64,
    pub duplicates: u64,
}

#[derive(Default)]
struct AckCounters {
    acked: AtomicU64,
    late: AtomicU64,
    duplicates: AtomicU64,
    closed: AtomicBool,
}

struct Session {
    stream: TcpStream,
    clock: EpochClock,
    acks: Arc<AckCounters>,
    drain: thread::JoinHandle<()>,
}

fn send(stream: &mut TcpStream, msg: &Message) -> io::Result<()> {
    let bytes = encode(msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    stream.write_all(&bytes)
}

fn connect_with_backoff(cfg: &AgentConfig, shutdown: &AtomicBool) -> Result<TcpStream, AgentError> {
    let mut delay = FIRST_BACKOFF_MS;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match TcpStream::connect(&cfg.connect) {
            Ok(s) => return Ok(s),
            Err(e) if attempt >= cfg.max_attempts || shutdown.load(Ordering::Relaxed) => {
                return Err(AgentError::ConnectionRefused {
                    attempts: attempt,
                    last: e,
                })
            }
            Err(e) => {
                debug!("unit {}: connect attempt {attempt} failed: {e}", cfg.unit);
                thread::sleep(Duration::from_millis(delay));
                delay = (delay * 2).min(MAX_BACKOFF_MS);
            }
        }
    }
}

fn open_session(cfg: &AgentConfig, shutdown: &AtomicBool) -> Result<Session, AgentError> {
    let mut stream = connect_with_backoff(cfg, shutdown)?;
    stream.set_nodelay(true)?;
    let hello = Message::Hello(HelloMessage {
        protocol_version: PROTOCOL_VERSION,
        unit: cfg.unit,
        location: cfg.location,
        reg_hash: cfg.reg_hash.clone(),
        period_ms: None,
        origin_ms: None,
    });
    send(&mut stream, &hello)?;

    let read_half = stream.try_clone()?;
    read_half.set_read_timeout(Some(HELLO_REPLY_TIMEOUT))?;
    let mut reader = FrameReader::new(read_half);
    let reply = match reader.read_frame() {
        Ok(Some(Message::Hello(h))) => h,
        Ok(Some(other)) => return Err(AgentError::Rejected(format!("unexpected reply {other:?}"))),
        Ok(None) => {
            return Err(AgentError::Rejected(
                "connection closed before the session started".into(),
            ))
        }
        Err(e) => return Err(AgentError::Rejected(e.to_string())),
    };
    let (Some(period_ms), Some(origin_ms)) = (reply.period_ms, reply.origin_ms) else {
        return Err(AgentError::Rejected("reply lacks the session schedule".into()));
    };
    if period_ms == 0 {
        return Err(AgentError::Rejected("announced period is zero".into()));
    }
    if period_ms != cfg.period_ms {
        warn!(
            "unit {}: concentrator period {period_ms} ms overrides configured {} ms",
            cfg.unit, cfg.period_ms
        );
    }
    reader.get_ref().set_read_timeout(None)?;

    let acks = Arc::new(AckCounters::default());
    let drain = {
        let acks = acks.clone();
        let unit = cfg.unit;
        thread::spawn(move || loop {
            match reader.read_frame() {
                Ok(Some(Message::Ack(ack))) => {
                    acks.acked.fetch_add(1, Ordering::Relaxed);
                    match ack.status {
                        AckStatus::Accepted => {}
                        AckStatus::Late => {
                            acks.late.fetch_add(1, Ordering::Relaxed);
                            warn!("unit {unit}: epoch {} arrived after it closed", ack.epoch);
                        }
                        AckStatus::Duplicate => {
                            acks.duplicates.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
                Ok(Some(other)) => debug!("unit {unit}: ignoring {other:?}"),
                Ok(None) | Err(_) => {
                    acks.closed.store(true, Ordering::Relaxed);
                    return;
                }
            }
        })
    };
    info!("unit {} joined; epoch 0 starts at {origin_ms}", cfg.unit);
    Ok(Session {
        stream,
        clock: EpochClock {
            origin_ms,
            period_ms,
            grace_ms: 0,
        },
        acks,
        drain,
    })
}

fn close_session(session: Session, summary: &mut AgentSummary, wait_for: u64) {
    let deadline = now_ms() + ACK_DRAIN_MS;
    while session.acks.acked.load(Ordering::Relaxed) < wait_for
        && !session.acks.closed.load(Ordering::Relaxed)
        && now_ms() < deadline
    {
        thread::sleep(Duration::from_millis(2));
    }
    let _ = session.stream.shutdown(Shutdown::Both);
    let _ = session.drain.join();
    summary.acked += session.acks.acked.load(Ordering::Relaxed);
    summary.late += session.acks.late.load(Ordering::Relaxed);
    summary.duplicates += session.acks.duplicates.load(Ordering::Relaxed);
}

/// Sleeps until `at_ms` or until shutdown is requested; returns whether the
/// wait ran to completion.
fn sleep_until(at_ms: u64, shutdown: &AtomicBool) -> bool {
    loop {
        if shutdown.load(Ordering::Relaxed) {
            return false;
        }
        let now = now_ms();
        if now >= at_ms {
            return true;
        }
        thread::sleep(Duration::from_millis((at_ms - now).min(10)));
    }
}

/// Streams every frame in its epoch slot. Slots already over when the agent
/// gets to them are skipped. A shutdown request sends the pending frame at
/// once and stops. Returns once the stream is exhausted.
pub fn run_agent(cfg: &AgentConfig, shutdown: Arc<AtomicBool>) -> Result<AgentSummary, AgentError> {
    cfg.validate()?;
    let mut summary = AgentSummary::default();
    let mut session = open_session(cfg, &shutdown)?;
    let mut sent_this_session = 0u64;

    let mut i = 0;
    while i < cfg.frames.len() {
        let frame = &cfg.frames[i];
        let clock = session.clock;
        if now_ms() >= clock.slot_start(frame.epoch + 1) {
            debug!("unit {}: slot {} already over", cfg.unit, frame.epoch);
            summary.skipped += 1;
            i += 1;
            continue;
        }
        let on_time = sleep_until(clock.slot_start(frame.epoch), &shutdown);
        let report = Message::Report(ReportMessage {
            unit: cfg.unit,
            epoch: frame.epoch,
            ts_ms: clock.slot_start(frame.epoch),
            counts: frame.counts.clone(),
            confidences: None,
        });
        let outcome = if session.acks.closed.load(Ordering::Relaxed) {
            Err(io::Error::new(
                io::ErrorKind::ConnectionAborted,
                "concentrator closed the connection",
            ))
        } else {
            send(&mut session.stream, &report)
        };
        match outcome {
            Ok(()) => {
                summary.reports_sent += 1;
                sent_this_session += 1;
                i += 1;
            }
            Err(e) => {
                if shutdown.load(Ordering::Relaxed) {
                    break;
                }
                warn!("unit {}: send failed ({e}); reconnecting", cfg.unit);
                close_session(session, &mut summary, 0);
                session = open_session(cfg, &shutdown)?;
                summary.reconnects += 1;
                sent_this_session = 0;
                continue;
            }
        }
        if !on_time {
            info!("unit {}: stopping after epoch {}", cfg.unit, frame.epoch);
            break;
        }
    }
    close_session(session, &mut summary, sent_this_session);
    Ok(summary)
}
