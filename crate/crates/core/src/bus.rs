//! Typed control-loop messages, their newline-delimited JSON encoding and a
//! small publish/subscribe transport (in-process or TCP).

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError, SyncSender};
use std::sync::{Arc, Mutex, Weak};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{SliceId, SlicingAction, UserKpi};
use crate::ran_sim::KpiReport;
use crate::verifier::{Escalation, EscalationReason, Verdict, VerdictFlags};

pub const DEFAULT_QUEUE_DEPTH: usize = 1024;
pub const BUS_ADDR_ENV: &str = "SLICE_VERIFY_BUS_ADDR";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown message type `{0}`")]
    UnknownMessage(String),
    #[error("missing field {0}")]
    MissingField(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
}

#[derive(Debug, Error)]
pub enum BusError {
    #[error("tcp mode requires an address")]
    MissingAddress,
    #[error("bad bus spec `{0}` (expected inproc or tcp://HOST:PORT)")]
    BadSpec(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("bus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bus closed")]
    Closed,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum BusMessage {
    KpiReport(KpiReport),
    Control { window_id: u64, action: SlicingAction },
    Verdict(Verdict),
    Escalation(Escalation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    KpiReport,
    Control,
    Verdict,
    Escalation,
}

impl MessageKind {
    pub const ALL: [MessageKind; 4] = [
        MessageKind::KpiReport,
        MessageKind::Control,
        MessageKind::Verdict,
        MessageKind::Escalation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::KpiReport => "kpi_report",
            MessageKind::Control => "control",
            MessageKind::Verdict => "verdict",
            MessageKind::Escalation => "escalation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl BusMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            BusMessage::KpiReport(_) => MessageKind::KpiReport,
            BusMessage::Control { .. } => MessageKind::Control,
            BusMessage::Verdict(_) => MessageKind::Verdict,
            BusMessage::Escalation(_) => MessageKind::Escalation,
        }
    }

    pub fn window_id(&self) -> u64 {
        match self {
            BusMessage::KpiReport(r) => r.window_id,
            BusMessage::Control { window_id, .. } => *window_id,
            BusMessage::Verdict(v) => v.window_id,
            BusMessage::Escalation(e) => e.window_id,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct WireUser {
    user_id: u32,
    slice: SliceId,
    tx_bitrate_mbps: f64,
    tx_packets: u64,
    dl_buffer_bytes: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Wire {
    KpiReport {
        window_id: u64,
        users: Vec<WireUser>,
    },
    Control {
        window_id: u64,
        allocations: SlicingAction,
    },
    Verdict {
        window_id: u64,
        user_id: u32,
        predicted_slice: SliceId,
        true_slice: SliceId,
        flags: VerdictFlags,
        latency_us: u64,
    },
    Escalation {
        reason: EscalationReason,
        window_id: u64,
    },
}

impl From<&BusMessage> for Wire {
    fn from(m: &BusMessage) -> Self {
        match m {
            BusMessage::KpiReport(r) => Wire::KpiReport {
                window_id: r.window_id,
                users: r
                    .users
                    .iter()
                    .map(|u| WireUser {
                        user_id: u.user_id,
                        slice: u.slice,
                        tx_bitrate_mbps: u.tx_bitrate_mbps,
                        tx_packets: u.tx_packets,
                        dl_buffer_bytes: u.dl_buffer_bytes,
                    })
                    .collect(),
            },
            BusMessage::Control { window_id, action } => Wire::Control {
                window_id: *window_id,
                allocations: *action,
            },
            BusMessage::Verdict(v) => Wire::Verdict {
                window_id: v.window_id,
                user_id: v.user_id,
                predicted_slice: v.predicted_slice,
                true_slice: v.true_slice,
                flags: v.flags,
                latency_us: v.latency_us,
            },
            BusMessage::Escalation(e) => Wire::Escalation {
                reason: e.reason,
                window_id: e.window_id,
            },
        }
    }
}

impl Wire {
    fn into_message(self) -> Result<BusMessage, DecodeError> {
        Ok(match self {
            Wire::KpiReport { window_id, users } => {
                let users = users
                    .into_iter()
                    .map(|u| UserKpi {
                        user_id: u.user_id,
                        slice: u.slice,
                        tx_bitrate_mbps: u.tx_bitrate_mbps,
                        tx_packets: u.tx_packets,
                        dl_buffer_bytes: u.dl_buffer_bytes,
                        window_id,
                    })
                    .collect::<Vec<_>>();
                if let Some(u) = users.iter().find(|u| !u.is_valid()) {
                    return Err(DecodeError::InvalidValue(format!(
                        "tx_bitrate_mbps {} for user {}",
                        u.tx_bitrate_mbps, u.user_id
                    )));
                }
                BusMessage::KpiReport(KpiReport { window_id, users })
            }
            Wire::Control { window_id, allocations } => BusMessage::Control {
                window_id,
                action: allocations,
            },
            Wire::Verdict {
                window_id,
                user_id,
                predicted_slice,
                true_slice,
                flags,
                latency_us,
            } => BusMessage::Verdict(Verdict {
                window_id,
                user_id,
                predicted_slice,
                true_slice,
                flags,
                latency_us,
            }),
            Wire::Escalation { reason, window_id } => BusMessage::Escalation(Escalation { reason, window_id }),
        })
    }
}

/// One JSON object with the `type` tag first, terminated by `\n`.
pub fn encode_msg(msg: &BusMessage) -> Vec<u8> {
    let mut out = serde_json::to_vec(&Wire::from(msg)).expect("bus messages always serialize");
    out.push(b'\n');
    out
}

pub fn encode_line(msg: &BusMessage) -> String {
    String::from_utf8(encode_msg(msg)).expect("json is utf-8")
}

fn classify(err: serde_json::Error) -> DecodeError {
    let text = err.to_string();
    if let Some(rest) = text.strip_prefix("missing field `") {
        let name = rest.split('`').next().unwrap_or_default();
        return DecodeError::MissingField(name.to_string());
    }
    let text = text.split(" at line ").next().unwrap_or(&text).to_string();
    DecodeError::InvalidValue(text)
}

pub fn decode_msg(bytes: &[u8]) -> Result<BusMessage, DecodeError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| DecodeError::Parse(e.to_string()))?;
    let Some(obj) = value.as_object() else {
        return Err(DecodeError::Parse("expected a JSON object".into()));
    };
    match obj.get("type") {
        None => return Err(DecodeError::MissingField("type".into())),
        Some(Value::String(t)) if MessageKind::parse(t).is_some() => {}
        Some(Value::String(t)) => return Err(DecodeError::UnknownMessage(t.clone())),
        Some(other) => return Err(DecodeError::UnknownMessage(other.to_string())),
    }
    let wire: Wire = serde_json::from_value(value).map_err(classify)?;
    wire.into_message()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BusMode {
    InProc,
    Tcp { address: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusConfig {
    pub mode: BusMode,
    pub queue_depth: usize,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            mode: BusMode::InProc,
            queue_depth: DEFAULT_QUEUE_DEPTH,
        }
    }
}

impl BusConfig {
    /// Parses `inproc` or `tcp://HOST:PORT` (`tcp` alone defers the address
    /// to the environment).
    pub fn parse(spec: &str) -> Result<Self, BusError> {
        let mode = match spec {
            "inproc" => BusMode::InProc,
            "tcp" | "tcp://" => BusMode::Tcp { address: None },
            s => match s.strip_prefix("tcp://") {
                Some(addr) => BusMode::Tcp {
                    address: Some(addr.to_string()),
                },
                None => return Err(BusError::BadSpec(spec.to_string())),
            },
        };
        Ok(BusConfig {
            mode,
            ..BusConfig::default()
        })
    }

    /// Address for tcp mode; `env_override` wins when set.
    pub fn resolve_address(&self, env_override: Option<String>) -> Result<Option<String>, BusError> {
        match &self.mode {
            BusMode::InProc => Ok(None),
            BusMode::Tcp { address } => env_override
                .filter(|s| !s.is_empty())
                .or_else(|| address.clone())
                .map(Some)
                .ok_or(BusError::MissingAddress),
        }
    }
}

struct Slot {
    id: u64,
    filter: Vec<MessageKind>,
    tx: SyncSender<BusMessage>,
}

struct Inner {
    queue_depth: usize,
    slots: Mutex<Vec<Slot>>,
    next_id: AtomicU64,
    peers: Mutex<Vec<TcpStream>>,
    dropped: AtomicU64,
    shutdown: AtomicBool,
    local_addr: Option<SocketAddr>,
}

impl Inner {
    fn new(queue_depth: usize, local_addr: Option<SocketAddr>) -> Self {
        Inner {
            queue_depth,
            slots: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(0),
            peers: Mutex::new(Vec::new()),
            dropped: AtomicU64::new(0),
            shutdown: AtomicBool::new(false),
            local_addr,
        }
    }

    fn deliver(&self, msg: &BusMessage) {
        let kind = msg.kind();
        let targets: Vec<(u64, SyncSender<BusMessage>)> = {
            let slots = self.slots.lock().expect("bus lock");
            slots
                .iter()
                .filter(|s| s.filter.is_empty() || s.filter.contains(&kind))
                .map(|s| (s.id, s.tx.clone()))
                .collect()
        };
        let mut gone = Vec::new();
        for (id, tx) in targets {
            // blocks while the subscriber's queue is full
            if tx.send(msg.clone()).is_err() {
                gone.push(id);
            }
        }
        if !gone.is_empty() {
            self.slots.lock().expect("bus lock").retain(|s| !gone.contains(&s.id));
        }
    }

    fn broadcast(&self, line: &[u8]) {
        let mut peers = self.peers.lock().expect("bus lock");
        peers.retain_mut(|p| p.write_all(line).is_ok());
    }
}

/// A bus endpoint; clones share the same subscribers.
#[derive(Clone)]
pub struct Endpoint {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint").field("local_addr", &self.inner.local_addr).finish()
    }
}

pub struct Subscription {
    rx: Receiver<BusMessage>,
}

impl Subscription {
    pub fn recv(&self) -> Option<BusMessage> {
        self.rx.recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<BusMessage, RecvTimeoutError> {
        self.rx.recv_timeout(timeout)
    }

    pub fn try_recv(&self) -> Option<BusMessage> {
        self.rx.try_recv().ok()
    }
}

impl Iterator for Subscription {
    type Item = BusMessage;

    fn next(&mut self) -> Option<BusMessage> {
        self.recv()
    }
}

pub fn open_endpoint(config: &BusConfig) -> Result<Endpoint, BusError> {
    let env = std::env::var(BUS_ADDR_ENV).ok();
    open_endpoint_with(config, env)
}

/// Like [`open_endpoint`] with an explicit address override in place of the
/// environment.
pub fn open_endpoint_with(config: &BusConfig, env_override: Option<String>) -> Result<Endpoint, BusError> {
    let depth = config.queue_depth.max(1);
    let Some(addr) = config.resolve_address(env_override)? else {
        return Ok(Endpoint {
            inner: Arc::new(Inner::new(depth, None)),
        });
    };
    let listener = TcpListener::bind(&addr).map_err(|source| BusError::Bind {
        addr: addr.clone(),
        source,
    })?;
    listener.set_nonblocking(true)?;
    let inner = Arc::new(Inner::new(depth, Some(listener.local_addr()?)));
    let weak = Arc::downgrade(&inner);
    thread::spawn(move || accept_loop(listener, weak));
    Ok(Endpoint { inner })
}

fn accept_loop(listener: TcpListener, inner: Weak<Inner>) {
    loop {
        let Some(strong) = inner.upgrade() else { return };
        if strong.shutdown.load(Ordering::Relaxed) {
            return;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                if let Ok(writer) = stream.try_clone() {
                    strong.peers.lock().expect("bus lock").push(writer);
                }
                let weak = Arc::downgrade(&strong);
                thread::spawn(move || read_loop(stream, weak));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                drop(strong);
                thread::sleep(Duration::from_millis(5));
            }
            Err(_) => return,
        }
    }
}

fn read_loop(stream: TcpStream, inner: Weak<Inner>) {
    let reader = BufReader::new(stream);
    for line in reader.split(b'\n') {
        let Ok(line) = line else { return };
        let Some(strong) = inner.upgrade() else { return };
        if strong.shutdown.load(Ordering::Relaxed) {
            return;
        }
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match decode_msg(&line) {
            Ok(msg) => strong.deliver(&msg),
            Err(_) => {
                strong.dropped.fetch_add(1, Ordering::SeqCst);
            }
        }
    }
}

impl Endpoint {
    pub fn in_process() -> Self {
        open_endpoint_with(&BusConfig::default(), None).expect("in-process endpoints cannot fail")
    }

    /// Subscribes to the listed kinds; an empty filter receives everything.
    pub fn subscribe(&self, filter: &[MessageKind]) -> Subscription {
        let (tx, rx) = std::sync::mpsc::sync_channel(self.inner.queue_depth);
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        self.inner.slots.lock().expect("bus lock").push(Slot {
            id,
            filter: filter.to_vec(),
            tx,
        });
        Subscription { rx }
    }

    pub fn publish(&self, msg: &BusMessage) {
        if self.inner.local_addr.is_some() {
            self.inner.broadcast(&encode_msg(msg));
        }
        self.inner.deliver(msg);
    }

    /// Lines that failed to decode on TCP connections.
    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::SeqCst)
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.inner.local_addr
    }

    pub fn subscriber_count(&self) -> usize {
        self.inner.slots.lock().expect("bus lock").len()
    }

    /// Stops accepting and reading TCP connections.
    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::Relaxed);
        for p in self.inner.peers.lock().expect("bus lock").drain(..) {
            let _ = p.shutdown(std::net::Shutdown::Both);
        }
    }
}

/// Client side of a TCP endpoint.
pub struct TcpClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl TcpClient {
    pub fn connect(addr: &str) -> Result<Self, BusError> {
        let stream = TcpStream::connect(addr)?;
        Ok(TcpClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    pub fn send(&mut self, msg: &BusMessage) -> Result<(), BusError> {
        self.writer.write_all(&encode_msg(msg))?;
        Ok(())
    }

    pub fn send_raw(&mut self, line: &str) -> Result<(), BusError> {
        self.writer.write_all(line.as_bytes())?;
        if !line.ends_with('\n') {
            self.writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> Result<(), BusError> {
        self.writer.set_read_timeout(timeout)?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<BusMessage, BusError> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(BusError::Closed);
        }
        Ok(decode_msg(line.as_bytes())?)
    }
}
