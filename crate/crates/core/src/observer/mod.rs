//! Per-(source, HostID) state built from heartbeats seen through a lens.

mod capture;
mod pcap;
mod records;

pub use capture::LiveCapture;
pub use pcap::{load_pcap, load_pcap_from, PcapError, PcapLoad, PcapPacket, PcapReader, PcapStats};
pub use records::{
    read_records, read_snapshot, write_records, write_snapshot, RecordError, SnapshotFile, SNAPSHOT_FORMAT,
};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;
use std::sync::Arc;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{
    classify, decode, parse_ipv4, Classification, HostId, ObservedHeartbeat, TransportHeader, TransportKind,
};

pub const DEFAULT_CAPACITY: usize = 1 << 20;
pub const DEFAULT_RING: usize = 1024;
pub const DEFAULT_WINDOW_S: u64 = 600;
pub const DEFAULT_MAX_WINDOWS: usize = 1024;
pub const DEFAULT_TTL_JUMP: u16 = 3;
/// Pair members may share a seq if they agree on everything but the instant.
const PAIR_TOLERANCE_NS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObserveError {
    #[error("destination {dst} is outside the lens {lens}")]
    OutOfLens { dst: Ipv4Addr, lens: Ipv4Net },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceKey {
    pub src_addr: Ipv4Addr,
    pub host_id: HostId,
}

impl std::fmt::Display for SourceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.src_addr, self.host_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreConfig {
    pub lens: Ipv4Net,
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default = "default_ring")]
    pub ring: usize,
    #[serde(default = "default_window")]
    pub window_s: u64,
    #[serde(default = "default_max_windows")]
    pub max_windows: usize,
    #[serde(default = "default_ttl_jump")]
    pub ttl_jump: u16,
}

fn default_capacity() -> usize {
    DEFAULT_CAPACITY
}
fn default_ring() -> usize {
    DEFAULT_RING
}
fn default_window() -> u64 {
    DEFAULT_WINDOW_S
}
fn default_max_windows() -> usize {
    DEFAULT_MAX_WINDOWS
}
fn default_ttl_jump() -> u16 {
    DEFAULT_TTL_JUMP
}

impl StoreConfig {
    pub fn new(lens: Ipv4Net) -> Self {
        StoreConfig {
            lens: lens.trunc(),
            capacity: DEFAULT_CAPACITY,
            ring: DEFAULT_RING,
            window_s: DEFAULT_WINDOW_S,
            max_windows: DEFAULT_MAX_WINDOWS,
            ttl_jump: DEFAULT_TTL_JUMP,
        }
    }

    pub fn lens_mask(&self) -> u8 {
        self.lens.prefix_len()
    }

    pub fn window_ns(&self) -> u64 {
        self.window_s.saturating_mul(1_000_000_000).max(1)
    }
}

/// One arrival as kept in a source's ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub recv_time_ns: u64,
    pub seq: u32,
    pub arrival_ttl: u8,
    pub orig_ttl: u8,
    pub timestamp_ns: u64,
    pub rate_uhz: u32,
    pub dst_addr: Ipv4Addr,
}

impl Arrival {
    /// `orig_ttl - arrival_ttl`; negative means the TTL grew, which honest
    /// traffic cannot do.
    pub fn hops(&self) -> i16 {
        i16::from(self.orig_ttl) - i16::from(self.arrival_ttl)
    }

    /// Raw `recv - send` delta; only changes of it are meaningful.
    pub fn clock_offset_ns(&self) -> i64 {
        (i128::from(self.recv_time_ns) - i128::from(self.timestamp_ns)).clamp(i64::MIN as i128, i64::MAX as i128)
            as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopBin {
    pub hops: i16,
    pub count: u64,
    pub first_ns: u64,
    pub last_ns: u64,
}

/// Hop-count histogram of one window `[index*w, (index+1)*w)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopWindow {
    pub index: u64,
    /// Sorted by `hops`.
    pub bins: Vec<HopBin>,
}

impl HopWindow {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    fn add(&mut self, hops: i16, t: u64) {
        match self.bins.binary_search_by_key(&hops, |b| b.hops) {
            Ok(i) => {
                let b = &mut self.bins[i];
                b.count += 1;
                b.first_ns = b.first_ns.min(t);
                b.last_ns = b.last_ns.max(t);
            }
            Err(i) => self.bins.insert(i, HopBin { hops, count: 1, first_ns: t, last_ns: t }),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalyCounts {
    pub rate_conflicts: u64,
    pub seq_regressions: u64,
    pub duplicate_seqs: u64,
    pub ttl_jumps: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceState {
    pub key: SourceKey,
    /// Last declared rate.
    pub rate_uhz: u32,
    pub first_seen_ns: u64,
    pub last_seen_ns: u64,
    pub total_arrivals: u64,
    /// Arrivals pushed out of the ring.
    pub ring_dropped: u64,
    pub arrivals: VecDeque<Arrival>,
    pub windows: VecDeque<HopWindow>,
    pub hop_min: i16,
    pub hop_max: i16,
    pub anomalies: AnomalyCounts,
}

impl SourceState {
    fn new(key: SourceKey, a: &Arrival) -> Self {
        SourceState {
            key,
            rate_uhz: a.rate_uhz,
            first_seen_ns: a.recv_time_ns,
            last_seen_ns: a.recv_time_ns,
            total_arrivals: 0,
            ring_dropped: 0,
            arrivals: VecDeque::new(),
            windows: VecDeque::new(),
            hop_min: a.hops(),
            hop_max: a.hops(),
            anomalies: AnomalyCounts::default(),
        }
    }

    pub fn last(&self) -> Option<&Arrival> {
        self.arrivals.back()
    }

    /// Clock-offset series, oldest first.
    pub fn clock_offsets(&self) -> impl Iterator<Item = (u64, i64)> + '_ {
        self.arrivals.iter().map(|a| (a.recv_time_ns, a.clock_offset_ns()))
    }

    fn check(&self, a: &Arrival, ttl_jump: u16) -> Vec<AnomalyKind> {
        let mut found = Vec::new();
        let Some(last) = self.last() else { return found };
        if a.rate_uhz != self.rate_uhz {
            found.push(AnomalyKind::DeclaredRateConflict { previous: self.rate_uhz, declared: a.rate_uhz });
        }
        let delta = a.seq.wrapping_sub(last.seq) as i32;
        if delta < 0 {
            found.push(AnomalyKind::SeqRegression { previous: last.seq, seq: a.seq });
        } else if delta == 0 {
            let pair_member = a.orig_ttl == last.orig_ttl
                && a.rate_uhz == last.rate_uhz
                && a.timestamp_ns.abs_diff(last.timestamp_ns) <= PAIR_TOLERANCE_NS;
            if !pair_member {
                found.push(AnomalyKind::DuplicateSeq { seq: a.seq });
            }
        }
        let (from, to) = (last.hops(), a.hops());
        if from.abs_diff(to) >= ttl_jump {
            found.push(AnomalyKind::TtlJump { from_hops: from, to_hops: to });
        }
        found
    }

    fn record(&mut self, a: Arrival, config: &StoreConfig) {
        self.rate_uhz = a.rate_uhz;
        self.first_seen_ns = self.first_seen_ns.min(a.recv_time_ns);
        self.last_seen_ns = self.last_seen_ns.max(a.recv_time_ns);
        self.hop_min = self.hop_min.min(a.hops());
        self.hop_max = self.hop_max.max(a.hops());
        self.total_arrivals += 1;
        self.arrivals.push_back(a);
        while self.arrivals.len() > config.ring {
            self.arrivals.pop_front();
            self.ring_dropped += 1;
        }

        let index = a.recv_time_ns / config.window_ns();
        match self.windows.iter().rposition(|w| w.index <= index) {
            Some(pos) if self.windows[pos].index == index => self.windows[pos].add(a.hops(), a.recv_time_ns),
            pos => {
                let at = pos.map_or(0, |p| p + 1);
                let too_old = self.windows.len() >= config.max_windows && at == 0;
                if !too_old {
                    let mut w = HopWindow { index, bins: Vec::new() };
                    w.add(a.hops(), a.recv_time_ns);
                    self.windows.insert(at, w);
                }
            }
        }
        while self.windows.len() > config.max_windows {
            self.windows.pop_front();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "anomaly", rename_all = "snake_case")]
pub enum AnomalyKind {
    DeclaredRateConflict { previous: u32, declared: u32 },
    SeqRegression { previous: u32, seq: u32 },
    DuplicateSeq { seq: u32 },
    TtlJump { from_hops: i16, to_hops: i16 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomaly {
    pub key: SourceKey,
    pub recv_time_ns: u64,
    #[serde(flatten)]
    pub kind: AnomalyKind,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreCounters {
    /// Heartbeats accepted by `ingest`.
    pub ingested: u64,
    pub out_of_lens: u64,
    /// Heartbeat-looking datagrams that failed to decode.
    pub malformed: u64,
    pub evicted_states: u64,
    /// Arrivals that left with an evicted state.
    pub evicted_arrivals: u64,
}

/// Single-writer state store. Snapshots share unchanged states by `Arc`.
#[derive(Debug, Clone)]
pub struct StateStore {
    config: StoreConfig,
    states: BTreeMap<SourceKey, Arc<SourceState>>,
    lru: BTreeSet<(u64, SourceKey)>,
    counters: StoreCounters,
}

impl StateStore {
    pub fn new(config: StoreConfig) -> Self {
        StateStore { config, states: BTreeMap::new(), lru: BTreeSet::new(), counters: StoreCounters::default() }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn counters(&self) -> StoreCounters {
        self.counters
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn get(&self, key: &SourceKey) -> Option<&SourceState> {
        self.states.get(key).map(Arc::as_ref)
    }

    pub fn note_malformed(&mut self) {
        self.counters.malformed += 1;
    }

    pub fn ingest(&mut self, obs: &ObservedHeartbeat) -> Result<Vec<Anomaly>, ObserveError> {
        if !self.config.lens.contains(&obs.dst_addr) {
            self.counters.out_of_lens += 1;
            return Err(ObserveError::OutOfLens { dst: obs.dst_addr, lens: self.config.lens });
        }
        let key = SourceKey { src_addr: obs.src_addr, host_id: obs.body.host_id };
        let arrival = Arrival {
            recv_time_ns: obs.recv_time_ns,
            seq: obs.body.seq,
            arrival_ttl: obs.arrival_ttl,
            orig_ttl: obs.body.orig_ttl,
            timestamp_ns: obs.body.timestamp_ns,
            rate_uhz: obs.body.rate_uhz,
            dst_addr: obs.dst_addr,
        };
        if !self.states.contains_key(&key) {
            while self.states.len() >= self.config.capacity.max(1) {
                self.evict_oldest();
            }
            self.states.insert(key, Arc::new(SourceState::new(key, &arrival)));
        } else {
            let last_seen = self.states[&key].last_seen_ns;
            self.lru.remove(&(last_seen, key));
        }
        let entry = self.states.get_mut(&key).expect("inserted above");
        let state = Arc::make_mut(entry);
        let kinds = state.check(&arrival, self.config.ttl_jump);
        for kind in &kinds {
            match kind {
                AnomalyKind::DeclaredRateConflict { .. } => state.anomalies.rate_conflicts += 1,
                AnomalyKind::SeqRegression { .. } => state.anomalies.seq_regressions += 1,
                AnomalyKind::DuplicateSeq { .. } => state.anomalies.duplicate_seqs += 1,
                AnomalyKind::TtlJump { .. } => state.anomalies.ttl_jumps += 1,
            }
        }
        state.record(arrival, &self.config);
        self.lru.insert((state.last_seen_ns, key));
        self.counters.ingested += 1;
        Ok(kinds.into_iter().map(|kind| Anomaly { key, recv_time_ns: obs.recv_time_ns, kind }).collect())
    }

    fn evict_oldest(&mut self) {
        if let Some((_, key)) = self.lru.pop_first() {
            if let Some(state) = self.states.remove(&key) {
                self.counters.evicted_states += 1;
                self.counters.evicted_arrivals += state.total_arrivals;
            }
        }
    }

    /// Point-in-time view. Later ingests do not affect it.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot { config: self.config.clone(), counters: self.counters, states: self.states.clone() }
    }

    pub fn from_snapshot(snapshot: Snapshot) -> Self {
        let lru = snapshot.states.iter().map(|(k, s)| (s.last_seen_ns, *k)).collect();
        StateStore { config: snapshot.config, states: snapshot.states, lru, counters: snapshot.counters }
    }
}

/// Immutable, thread-safe view of a store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub config: StoreConfig,
    pub counters: StoreCounters,
    pub states: BTreeMap<SourceKey, Arc<SourceState>>,
}

impl Snapshot {
    pub fn get(&self, key: &SourceKey) -> Option<&SourceState> {
        self.states.get(key).map(Arc::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SourceState> {
        self.states.values().map(Arc::as_ref)
    }

    /// Arrivals still held in rings plus those dropped from rings.
    pub fn retained_arrivals(&self) -> u64 {
        self.iter().map(|s| s.arrivals.len() as u64 + s.ring_dropped).sum()
    }
}

/// What became of one captured IPv4 datagram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PacketOutcome {
    Heartbeat(ObservedHeartbeat),
    NotHeartbeat,
    OutOfLens,
    /// Classified as a heartbeat but did not decode, or the IP framing was broken.
    Malformed,
}

/// Classifies and decodes one IPv4 datagram seen at `recv_time_ns`.
pub fn observe_ipv4(bytes: &[u8], recv_time_ns: u64, lens: &Ipv4Net, udp_port: u16) -> PacketOutcome {
    let Ok(dgram) = parse_ipv4(bytes) else {
        return PacketOutcome::NotHeartbeat;
    };
    if classify(&dgram.summary(), udp_port) == Classification::NotHeartbeat {
        return PacketOutcome::NotHeartbeat;
    }
    if !lens.contains(&dgram.dst) {
        return PacketOutcome::OutOfLens;
    }
    let transport = match dgram.transport {
        TransportHeader::Icmp { .. } => TransportKind::Icmp,
        TransportHeader::Udp { dst_port } => TransportKind::Udp { port: dst_port },
        _ => return PacketOutcome::NotHeartbeat,
    };
    match decode(dgram.payload) {
        Ok(body) => PacketOutcome::Heartbeat(ObservedHeartbeat {
            recv_time_ns,
            src_addr: dgram.src,
            dst_addr: dgram.dst,
            arrival_ttl: dgram.ttl,
            transport,
            body,
        }),
        Err(_) => PacketOutcome::Malformed,
    }
}
