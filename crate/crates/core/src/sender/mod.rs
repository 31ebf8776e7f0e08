//! Heartbeat emission: per-interface streams driven by a schedule, stamped
//! with the shared HostID and optionally signed from one key chain.
//!
//! [`SenderEngine`] is a steppable core with no notion of wall time. It is
//! shared by [`run_sender`] and the simulator.

mod emit;

pub use emit::{EmitError, Emitter, FileEmitter, IcmpEmitter, MemoryEmitter, UdpEmitter};

use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity::{ChainConfig, ChainError, ChainState};
use crate::schedule::{lhb_ttl, Schedule, ScheduleError, ScheduleSpec};
use crate::wire::{Heartbeat, HeartbeatKind, HostId, TransportKind};

pub const DEFAULT_IHB_TTL: u8 = 64;
const NS_PER_S: u128 = 1_000_000_000;
const UHZ_PER_HZ: u128 = 1_000_000;

#[derive(Debug, Error)]
pub enum SenderError {
    #[error("invalid sender config: {0}")]
    Config(String),
    #[error("interface {interface}: {source}")]
    Schedule { interface: String, source: ScheduleError },
    #[error(transparent)]
    Chain(#[from] ChainError),
}

/// One schedule emitted from an interface at its own rate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub schedule: ScheduleSpec,
    pub rate_uhz: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceConfig {
    pub name: String,
    pub src_addr: Ipv4Addr,
    #[serde(default)]
    pub transport: TransportKind,
    pub streams: Vec<StreamConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SenderConfig {
    /// Initial HostID; drawn from the rotation RNG when absent.
    #[serde(default)]
    pub host_id: Option<HostId>,
    pub interfaces: Vec<InterfaceConfig>,
    #[serde(default)]
    pub pair_mode: bool,
    #[serde(default)]
    pub hostid_rotation_period_s: Option<u64>,
    /// Seeds HostID draws, so rotation is reproducible.
    #[serde(default)]
    pub hostid_seed: u64,
    #[serde(default)]
    pub integrity: Option<ChainConfig>,
    #[serde(default = "default_ttl")]
    pub ihb_ttl: u8,
}

fn default_ttl() -> u8 {
    DEFAULT_IHB_TTL
}

impl SenderConfig {
    /// Single interface, single stream, no rotation or signing.
    pub fn simple(name: &str, src_addr: Ipv4Addr, schedule: ScheduleSpec, rate_uhz: u32) -> Self {
        SenderConfig {
            host_id: Some(HostId(0)),
            interfaces: vec![InterfaceConfig {
                name: name.to_string(),
                src_addr,
                transport: TransportKind::default(),
                streams: vec![StreamConfig { schedule, rate_uhz }],
            }],
            pair_mode: false,
            hostid_rotation_period_s: None,
            hostid_seed: 0,
            integrity: None,
            ihb_ttl: DEFAULT_IHB_TTL,
        }
    }

    pub fn validate(&self) -> Result<(), SenderError> {
        if self.interfaces.is_empty() {
            return Err(SenderError::Config("no interfaces".into()));
        }
        if self.ihb_ttl == 0 {
            return Err(SenderError::Config("ihb_ttl must be at least 1".into()));
        }
        if self.hostid_rotation_period_s == Some(0) {
            return Err(SenderError::Config("hostid_rotation_period_s must be positive".into()));
        }
        for iface in &self.interfaces {
            if iface.streams.is_empty() {
                return Err(SenderError::Config(format!("interface {} has no streams", iface.name)));
            }
            for stream in &iface.streams {
                if stream.rate_uhz == 0 {
                    return Err(SenderError::Config(format!("interface {}: rate_uhz must be > 0", iface.name)));
                }
                stream.schedule.pool.validate().map_err(|source| SenderError::Schedule {
                    interface: iface.name.clone(),
                    source,
                })?;
            }
        }
        Ok(())
    }
}

/// One datagram handed to an emitter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Emission {
    pub send_time_ns: u64,
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    pub ttl: u8,
    pub transport: TransportKind,
    pub heartbeat: Heartbeat,
}

/// Identifies a stream inside an engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StreamId {
    pub interface: usize,
    pub stream: usize,
}

#[derive(Debug, Clone)]
struct StreamState {
    schedule: Schedule,
    rate_uhz: u32,
    base_ns: u64,
    slot: u64,
}

impl StreamState {
    fn due(&self, pair_mode: bool) -> u64 {
        let mult: u128 = if pair_mode { 2 } else { 1 };
        let offset = u128::from(self.slot) * NS_PER_S * UHZ_PER_HZ * mult / u128::from(self.rate_uhz);
        self.base_ns.saturating_add(u64::try_from(offset).unwrap_or(u64::MAX))
    }
}

#[derive(Debug, Clone)]
struct InterfaceState {
    src_addr: Ipv4Addr,
    transport: TransportKind,
    seq: u32,
    streams: Vec<StreamState>,
}

#[derive(Debug, Clone)]
struct Rotation {
    period_ns: u64,
    next_ns: u64,
}

/// Deterministic emission core.
#[derive(Debug, Clone)]
pub struct SenderEngine {
    host_id: HostId,
    pair_mode: bool,
    ihb_ttl: u8,
    rng: ChaCha8Rng,
    rotation: Option<Rotation>,
    chain: Option<ChainState>,
    interfaces: Vec<InterfaceState>,
}

impl SenderEngine {
    pub fn new(config: &SenderConfig, start_ns: u64) -> Result<Self, SenderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.hostid_seed);
        let host_id = config.host_id.unwrap_or_else(|| HostId(rng.gen()));
        let rotation = config.hostid_rotation_period_s.map(|s| {
            let period_ns = s.saturating_mul(1_000_000_000);
            Rotation { period_ns, next_ns: start_ns.saturating_add(period_ns) }
        });
        let chain = config.integrity.as_ref().map(ChainState::new).transpose()?;
        let interfaces = config
            .interfaces
            .iter()
            .map(|iface| {
                let streams = iface
                    .streams
                    .iter()
                    .map(|s| {
                        let schedule = Schedule::new(s.schedule).map_err(|source| SenderError::Schedule {
                            interface: iface.name.clone(),
                            source,
                        })?;
                        Ok(StreamState { schedule, rate_uhz: s.rate_uhz, base_ns: start_ns, slot: 0 })
                    })
                    .collect::<Result<Vec<_>, SenderError>>()?;
                Ok(InterfaceState { src_addr: iface.src_addr, transport: iface.transport, seq: 0, streams })
            })
            .collect::<Result<Vec<_>, SenderError>>()?;
        Ok(SenderEngine { host_id, pair_mode: config.pair_mode, ihb_ttl: config.ihb_ttl, rng, rotation, chain, interfaces })
    }

    pub fn host_id(&self) -> HostId {
        self.host_id
    }

    pub fn interface_addrs(&self) -> impl Iterator<Item = Ipv4Addr> + '_ {
        self.interfaces.iter().map(|i| i.src_addr)
    }

    pub fn stream_ids(&self) -> impl Iterator<Item = StreamId> + '_ {
        self.interfaces.iter().enumerate().flat_map(|(i, iface)| {
            (0..iface.streams.len()).map(move |s| StreamId { interface: i, stream: s })
        })
    }

    /// When `id` fires next.
    pub fn due(&self, id: StreamId) -> u64 {
        self.interfaces[id.interface].streams[id.stream].due(self.pair_mode)
    }

    /// Earliest pending slot over all streams; ties go to the lowest id.
    pub fn next_due(&self) -> (u64, StreamId) {
        self.stream_ids()
            .map(|id| (self.due(id), id))
            .min()
            .expect("config validation guarantees at least one stream")
    }

    /// Draws a fresh HostID and applies it to every interface at once.
    pub fn rotate_hostid(&mut self) -> HostId {
        self.host_id = rotate_hostid(&mut self.rng);
        self.host_id
    }

    /// Changes a stream's rate starting with its next slot.
    pub fn set_rate(&mut self, id: StreamId, rate_uhz: u32) -> Result<(), SenderError> {
        if rate_uhz == 0 {
            return Err(SenderError::Config("rate_uhz must be > 0".into()));
        }
        let pair_mode = self.pair_mode;
        let stream = &mut self.interfaces[id.interface].streams[id.stream];
        stream.base_ns = stream.due(pair_mode);
        stream.slot = 0;
        stream.rate_uhz = rate_uhz;
        Ok(())
    }

    /// Emits the current slot of `id` stamped with `now_ns` and advances it.
    /// Returns one emission, or two under pair mode.
    pub fn fire(&mut self, id: StreamId, now_ns: u64) -> Vec<Emission> {
        if let Some(rot) = self.rotation.as_mut() {
            let mut rotations = 0;
            while now_ns >= rot.next_ns {
                rot.next_ns = rot.next_ns.saturating_add(rot.period_ns);
                rotations += 1;
            }
            for _ in 0..rotations {
                self.host_id = rotate_hostid(&mut self.rng);
            }
        }
        let host_id = self.host_id;
        let ihb_ttl = self.ihb_ttl;
        let pair_mode = self.pair_mode;
        let iface = &mut self.interfaces[id.interface];
        let src = iface.src_addr;
        let seq = iface.seq;
        iface.seq = iface.seq.wrapping_add(1);
        let stream = &mut iface.streams[id.stream];
        stream.slot += 1;

        let local = stream.schedule.is_local();
        let mut dst = stream.schedule.next_destination();
        if local && dst == src {
            dst = stream.schedule.next_destination();
        }
        let (kind, ttl) = if local {
            (HeartbeatKind::Lhb, lhb_ttl(src, dst).unwrap_or(1))
        } else {
            (HeartbeatKind::Ihb, ihb_ttl)
        };
        let mut hb = Heartbeat::new(host_id, stream.rate_uhz, ttl, now_ns, seq);
        hb.kind = kind;
        hb.pool = stream.schedule.descriptor();
        let transport = iface.transport;

        let copies = if pair_mode { 2 } else { 1 };
        (0..copies)
            .map(|_| {
                let heartbeat = match self.chain.as_mut() {
                    Some(chain) => chain.sign(&hb, src).expect("engine builds valid heartbeats"),
                    None => hb.clone(),
                };
                Emission { send_time_ns: now_ns, src_addr: src, dst_addr: dst, ttl, transport, heartbeat }
            })
            .collect()
    }
}

/// A uniform 16-bit HostID.
pub fn rotate_hostid<R: Rng>(rng: &mut R) -> HostId {
    HostId(rng.gen())
}

/// Time source for [`run_sender`].
pub trait Clock {
    fn now_ns(&self) -> u64;
    /// Blocks until `t_ns`. Returns false if the clock ran out or `stop` was raised first.
    fn sleep_until(&mut self, t_ns: u64, stop: &AtomicBool) -> bool;
}

/// Virtual time over `[start, end)` that jumps instantly to each deadline.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    now: u64,
    end: u64,
}

impl VirtualClock {
    pub fn new(start_ns: u64, duration_ns: u64) -> Self {
        VirtualClock { now: start_ns, end: start_ns.saturating_add(duration_ns) }
    }
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> u64 {
        self.now
    }

    fn sleep_until(&mut self, t_ns: u64, stop: &AtomicBool) -> bool {
        if stop.load(Ordering::Relaxed) || t_ns >= self.end {
            return false;
        }
        self.now = self.now.max(t_ns);
        true
    }
}

/// Wall clock, with an optional deadline.
#[derive(Debug, Clone, Default)]
pub struct SystemClock {
    deadline_ns: Option<u64>,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock::default()
    }

    pub fn with_duration(duration: Duration) -> Self {
        let now = SystemClock::new().now_ns();
        SystemClock { deadline_ns: Some(now.saturating_add(duration.as_nanos() as u64)) }
    }
}

impl Clock for SystemClock {
    fn now_ns(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as u64).unwrap_or(0)
    }

    fn sleep_until(&mut self, t_ns: u64, stop: &AtomicBool) -> bool {
        if self.deadline_ns.is_some_and(|d| t_ns >= d) {
            return false;
        }
        loop {
            if stop.load(Ordering::Relaxed) {
                return false;
            }
            let now = self.now_ns();
            if now >= t_ns {
                return true;
            }
            std::thread::sleep(Duration::from_nanos((t_ns - now).min(50_000_000)));
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SendSummary {
    pub emitted: u64,
    pub failed: u64,
}

/// Runs every stream of `config` until the clock runs out or `stop` is raised.
pub fn run_sender<C: Clock, E: Emitter + ?Sized>(
    config: &SenderConfig,
    clock: &mut C,
    emitter: &mut E,
    stop: &AtomicBool,
) -> Result<SendSummary, SenderError> {
    let mut engine = SenderEngine::new(config, clock.now_ns())?;
    let mut summary = SendSummary::default();
    loop {
        let (due, id) = engine.next_due();
        if !clock.sleep_until(due, stop) {
            break;
        }
        for emission in engine.fire(id, clock.now_ns()) {
            match emitter.emit(&emission) {
                Ok(()) => summary.emitted += 1,
                Err(err) => {
                    log::warn!("emit to {} failed, slot skipped: {err}", emission.dst_addr);
                    summary.failed += 1;
                }
            }
        }
    }
    emitter.flush().map_err(|e| SenderError::Config(format!("flush failed: {e}")))?;
    Ok(summary)
}
