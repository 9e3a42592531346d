//! Material data concentrator: accepts one connection per unit, aligns
//! reports by epoch, computes a snapshot per closed epoch and appends it to
//! the snapshot files.
//!
//! Connection readers run on their own threads and forward frames over a
//! channel; the ledger, the acks and the sinks are owned by the thread that
//! calls [`run`], so epochs close and persist strictly in order.

mod ledger;

pub use ledger::{AlignedEntry, AlignedSet, EpochClock, EpochLedger, LedgerError};

use std::collections::BTreeMap;
use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use thiserror::Error;

use crate::output::{self, CsvLayout, SnapshotSink, TimeAxis};
use crate::synchro::{CompositionRegistry, DetectionReport, SynchroSnapshot, UnitStatus};
use crate::tmn::{CompartmentId, TmnNetwork};
use crate::wire::{
    encode, AckMessage, AckStatus, FrameReader, HelloMessage, Message, ReportMessage, WireError, PROTOCOL_VERSION,
};

const HELLO_TIMEOUT: Duration = Duration::from_secs(10);
const WRITE_TIMEOUT: Duration = Duration::from_secs(2);
const IDLE_POLL: Duration = Duration::from_millis(20);

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone)]
pub struct ConcentratorConfig {
    pub listen: String,
    pub net: TmnNetwork,
    pub reg: CompositionRegistry,
    pub period_ms: u64,
    pub grace_ms: u64,
    pub max_staleness: u64,
    pub out_dir: PathBuf,
    /// Close epochs `0..epochs` and stop. Without a limit the service runs
    /// until shut down, or until every unit has disconnected.
    pub epochs: Option<u64>,
    /// How long to wait for every unit before starting the session anyway.
    pub start_timeout_ms: u64,
    /// Delay between session start and epoch 0, so agents can get ready.
    pub lead_ms: u64,
}

impl ConcentratorConfig {
    pub fn new(net: TmnNetwork, reg: CompositionRegistry, out_dir: PathBuf) -> Self {
        ConcentratorConfig {
            listen: format!("0.0.0.0:{}", crate::wire::DEFAULT_PORT),
            net,
            reg,
            period_ms: 1_000,
            grace_ms: 200,
            max_staleness: 3,
            out_dir,
            epochs: None,
            start_timeout_ms: 10_000,
            lead_ms: 500,
        }
    }

    pub fn validate(&self) -> Result<(), ConcentratorError> {
        if self.period_ms == 0 {
            return Err(ConcentratorError::InvalidConfig("period must be > 0".into()));
        }
        if self.max_staleness < 1 {
            return Err(ConcentratorError::InvalidConfig("max staleness must be >= 1".into()));
        }
        if self.grace_ms >= self.period_ms * self.max_staleness {
            return Err(ConcentratorError::InvalidConfig(format!(
                "grace window {} ms must be shorter than period x max staleness = {} ms",
                self.grace_ms,
                self.period_ms * self.max_staleness
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ConcentratorError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub epochs_closed: u64,
    pub accepted: u64,
    pub late: u64,
    pub duplicates: u64,
    pub rejected_connections: u64,
    /// Epochs where at least one unit was not fresh.
    pub degraded_epochs: u64,
    pub history: Vec<SynchroSnapshot>,
}

/// Turns an aligned set into a snapshot. A report naming a class missing
/// from the registry is dropped and its unit flagged quarantined.
pub fn compute_snapshot(aligned: &AlignedSet, net: &TmnNetwork, reg: &CompositionRegistry) -> SynchroSnapshot {
    let mut status = BTreeMap::new();
    let mut reports = Vec::new();
    for (&unit, entry) in &aligned.entries {
        let mut st = entry.status;
        if st != UnitStatus::Absent {
            if let Some(q) = entry.counts.keys().find(|q| reg.class(**q).is_none()) {
                warn!(
                    "epoch {}: unit {unit} reported unknown class {q}; report quarantined",
                    aligned.epoch
                );
                st = UnitStatus::Quarantined;
            } else {
                reports.push(DetectionReport::new(unit, aligned.epoch, entry.counts.clone()));
            }
        }
        status.insert(unit, st);
    }
    let mut snap =
        SynchroSnapshot::compute(net, reg, aligned.epoch, &reports).expect("reports are unique, known and placed");
    for (unit, st) in status {
        snap.status.insert(unit, st);
    }
    debug_assert_eq!(snap.check_identities(), Ok(()));
    snap
}

enum Event {
    Hello {
        conn: u64,
        hello: HelloMessage,
        stream: TcpStream,
    },
    Report {
        conn: u64,
        report: ReportMessage,
    },
    Closed {
        conn: u64,
        reason: String,
    },
}

struct Conn {
    unit: CompartmentId,
    writer: TcpStream,
    last_epoch: Option<u64>,
    answered: bool,
}

fn send(stream: &mut TcpStream, msg: &Message) -> io::Result<()> {
    let bytes = encode(msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    stream.write_all(&bytes)
}

fn read_connection(conn: u64, stream: TcpStream, tx: Sender<Event>) {
    let closed = |reason: String| Event::Closed { conn, reason };
    let writer = match stream.try_clone() {
        Ok(w) => w,
        Err(e) => {
            let _ = tx.send(closed(e.to_string()));
            return;
        }
    };
    let _ = stream.set_read_timeout(Some(HELLO_TIMEOUT));
    let mut reader = FrameReader::new(stream);
    match reader.read_frame() {
        Ok(Some(Message::Hello(hello))) => {
            if tx
                .send(Event::Hello {
                    conn,
                    hello,
                    stream: writer,
                })
                .is_err()
            {
                return;
            }
        }
        Ok(Some(_)) => {
            let _ = writer.shutdown(Shutdown::Both);
            let _ = tx.send(closed("first frame was not a hello".into()));
            return;
        }
        Ok(None) => {
            let _ = tx.send(closed("closed before hello".into()));
            return;
        }
        Err(e) => {
            let _ = writer.shutdown(Shutdown::Both);
            let _ = tx.send(closed(format!("bad hello: {e}")));
            return;
        }
    }
    let _ = reader.get_ref().set_read_timeout(None);
    loop {
        let event = match reader.read_frame() {
            Ok(Some(Message::Report(report))) => Event::Report { conn, report },
            Ok(Some(other)) => {
                debug!("connection {conn}: ignoring {other:?}");
                continue;
            }
            Ok(None) => closed("end of stream".into()),
            Err(WireError::Io(e)) => closed(e.to_string()),
            Err(e) => {
                warn!("connection {conn}: dropping frame: {e}");
                continue;
            }
        };
        let done = matches!(event, Event::Closed { .. });
        if tx.send(event).is_err() || done {
            return;
        }
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next_conn = 0u64;
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                next_conn += 1;
                debug!("connection {next_conn} from {peer}");
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let tx = tx.clone();
                let conn = next_conn;
                thread::spawn(move || read_connection(conn, stream, tx));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

struct Service<'a> {
    cfg: &'a ConcentratorConfig,
    reg_hash: String,
    ledger: EpochLedger,
    clock: Option<EpochClock>,
    conns: BTreeMap<u64, Conn>,
    ever_connected: bool,
    sink: SnapshotSink,
    summary: RunSummary,
}

impl Service<'_> {
    fn reject(&mut self, conn: u64, stream: TcpStream, why: String) {
        warn!("connection {conn} rejected: {why}");
        self.summary.rejected_connections += 1;
        let _ = stream.shutdown(Shutdown::Both);
    }

    fn reply_hello(&self, conn: &mut Conn, clock: EpochClock) -> io::Result<()> {
        let reply = Message::Hello(HelloMessage {
            protocol_version: PROTOCOL_VERSION,
            unit: conn.unit,
            location: self.cfg.net.location_of(conn.unit),
            reg_hash: self.reg_hash.clone(),
            period_ms: Some(clock.period_ms),
            origin_ms: Some(clock.origin_ms),
        });
        conn.answered = true;
        send(&mut conn.writer, &reply)
    }

    fn drop_conn(&mut self, conn: u64, why: &str) {
        if let Some(c) = self.conns.remove(&conn) {
            info!("unit {} disconnected: {why}", c.unit);
            let _ = c.writer.shutdown(Shutdown::Both);
        }
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Hello { conn, hello, stream } => {
                let unit = hello.unit;
                if !self.cfg.net.mmus().contains(&unit) {
                    return self.reject(conn, stream, format!("no unit placed at compartment {unit}"));
                }
                if hello.reg_hash != self.reg_hash {
                    return self.reject(
                        conn,
                        stream,
                        format!("unit {unit} registry hash {} differs", hello.reg_hash),
                    );
                }
                let stale: Vec<u64> = self
                    .conns
                    .iter()
                    .filter(|(_, c)| c.unit == unit)
                    .map(|(&id, _)| id)
                    .collect();
                for old in stale {
                    self.drop_conn(old, "replaced by a new connection");
                }
                let _ = stream.set_write_timeout(Some(WRITE_TIMEOUT));
                let mut c = Conn {
                    unit,
                    writer: stream,
                    last_epoch: None,
                    answered: false,
                };
                info!("unit {unit} connected");
                self.ever_connected = true;
                if let Some(clock) = self.clock {
                    if let Err(e) = self.reply_hello(&mut c, clock) {
                        warn!("unit {unit}: hello reply failed: {e}");
                        return;
                    }
                }
                self.conns.insert(conn, c);
            }
            Event::Report { conn, report } => {
                let Some(c) = self.conns.get_mut(&conn) else {
                    return;
                };
                if !c.answered {
                    debug!("unit {}: report before session start ignored", c.unit);
                    return;
                }
                if report.unit != c.unit {
                    let why = format!("report for unit {} on unit {}'s connection", report.unit, c.unit);
                    return self.drop_conn(conn, &why);
                }
                if c.last_epoch.is_some_and(|last| report.epoch < last) {
                    return self.drop_conn(conn, "epochs went backwards");
                }
                c.last_epoch = Some(report.epoch);
                let status = match self.ledger.submit(report.unit, report.epoch, report.counts) {
                    Ok(s) => s,
                    Err(e) => return self.drop_conn(conn, &e.to_string()),
                };
                match status {
                    AckStatus::Accepted => self.summary.accepted += 1,
                    AckStatus::Late => {
                        self.summary.late += 1;
                        warn!("unit {}: late report for closed epoch {}", report.unit, report.epoch);
                    }
                    AckStatus::Duplicate => self.summary.duplicates += 1,
                }
                let ack = Message::Ack(AckMessage {
                    epoch: report.epoch,
                    status,
                });
                let c = self.conns.get_mut(&conn).expect("checked above");
                if let Err(e) = send(&mut c.writer, &ack) {
                    self.drop_conn(conn, &format!("ack failed: {e}"));
                }
            }
            Event::Closed { conn, reason } => {
                if self.conns.contains_key(&conn) {
                    self.drop_conn(conn, &reason);
                } else {
                    debug!("connection {conn} closed: {reason}");
                }
            }
        }
    }

    fn all_units_connected(&self) -> bool {
        self.cfg
            .net
            .mmus()
            .iter()
            .all(|k| self.conns.values().any(|c| c.unit == *k))
    }

    fn start_session(&mut self) {
        let clock = EpochClock {
            origin_ms: now_ms() + self.cfg.lead_ms,
            period_ms: self.cfg.period_ms,
            grace_ms: self.cfg.grace_ms,
        };
        info!(
            "session starts at {} ({} connected units), period {} ms",
            output::iso_timestamp(clock.origin_ms),
            self.conns.len(),
            clock.period_ms
        );
        self.clock = Some(clock);
        let ids: Vec<u64> = self.conns.keys().copied().collect();
        for id in ids {
            let mut c = self.conns.remove(&id).expect("listed");
            match self.reply_hello(&mut c, clock) {
                Ok(()) => {
                    self.conns.insert(id, c);
                }
                Err(e) => warn!("unit {}: hello reply failed: {e}", c.unit),
            }
        }
    }

    fn close_epoch(&mut self, epoch: u64) {
        let aligned = self.ledger.align_epoch(epoch).expect("epochs close in order");
        let snap = compute_snapshot(&aligned, &self.cfg.net, &self.cfg.reg);
        if snap.status.values().any(|s| !s.is_fresh()) {
            self.summary.degraded_epochs += 1;
        }
        if let Err(e) = self.sink.persist(&snap, now_ms()) {
            warn!("{e}; {} snapshot(s) queued for retry", self.sink.backlog());
        }
        self.summary.epochs_closed += 1;
        self.summary.history.push(snap);
    }

    fn limit_reached(&self) -> bool {
        self.cfg.epochs.is_some_and(|n| self.ledger.next_open_epoch() >= n)
    }
}

/// Runs the concentrator until the epoch limit, a shutdown request, or (with
/// no limit) the departure of every unit. `on_ready` receives the bound
/// address before any connection is accepted.
pub fn run(
    cfg: &ConcentratorConfig,
    shutdown: Arc<AtomicBool>,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<RunSummary, ConcentratorError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let listener = TcpListener::bind(&cfg.listen)?;
    listener.set_nonblocking(true)?;
    on_ready(listener.local_addr()?);

    let mut sink = SnapshotSink::new(&cfg.out_dir, CsvLayout::new(&cfg.net, &cfg.reg));
    if let Err(e) = sink.open() {
        warn!("{e}");
    }
    let mut svc = Service {
        cfg,
        reg_hash: cfg.reg.content_hash(),
        ledger: EpochLedger::new(cfg.net.mmus().iter().copied(), cfg.max_staleness),
        clock: None,
        conns: BTreeMap::new(),
        ever_connected: false,
        sink,
        summary: RunSummary::default(),
    };
    if cfg.net.mmus().is_empty() {
        info!("no measurement units placed; nothing to concentrate");
        return Ok(svc.summary);
    }

    let (tx, rx): (Sender<Event>, Receiver<Event>) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let stop = stop.clone();
        thread::spawn(move || accept_loop(listener, tx, stop))
    };

    let started = Instant::now();
    loop {
        if shutdown.load(Ordering::Relaxed) {
            info!("shutdown requested");
            break;
        }
        let wait = match svc.clock {
            Some(clock) => {
                let deadline = clock.deadline(svc.ledger.next_open_epoch());
                Duration::from_millis(deadline.saturating_sub(now_ms())).min(IDLE_POLL)
            }
            None => IDLE_POLL,
        };
        match rx.recv_timeout(wait) {
            Ok(event) => {
                svc.handle(event);
                while let Ok(event) = rx.try_recv() {
                    svc.handle(event);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }

        if svc.clock.is_none()
            && (svc.all_units_connected() || started.elapsed() >= Duration::from_millis(cfg.start_timeout_ms))
        {
            svc.start_session();
        }
        if let Some(clock) = svc.clock {
            let now = now_ms();
            while !svc.limit_reached() && clock.is_due(svc.ledger.next_open_epoch(), now) {
                let n = svc.ledger.next_open_epoch();
                svc.close_epoch(n);
            }
        }
        if svc.limit_reached() {
            break;
        }
        if cfg.epochs.is_none() && svc.clock.is_some() && svc.ever_connected && svc.conns.is_empty() {
            if let Some(last) = svc.ledger.highest_pending() {
                while svc.ledger.next_open_epoch() <= last {
                    let n = svc.ledger.next_open_epoch();
                    svc.close_epoch(n);
                }
            }
            info!("all units disconnected");
            break;
        }
    }

    stop.store(true, Ordering::Relaxed);
    let ids: Vec<u64> = svc.conns.keys().copied().collect();
    for id in ids {
        svc.drop_conn(id, "concentrator stopping");
    }
    let _ = acceptor.join();
    if svc.sink.backlog() > 0 {
        if let Err(e) = svc.sink.open() {
            warn!("{e}; {} snapshot(s) could not be written", svc.sink.backlog());
        }
    }
    output::emit_plot_data(
        &svc.summary.history,
        &cfg.reg,
        &TimeAxis::seconds_from_ms(cfg.period_ms),
        &cfg.out_dir.join(output::PLOTS_DIR),
    )?;
    Ok(svc.summary)
}
