//! Deterministic discrete-event simulation of heartbeat senders seen through
//! a prefix lens, with scripted outages, path changes and spoofers.

mod evaluate;
mod truth;

pub use evaluate::{evaluate, median, AliasMetrics, EvaluateError, Metrics, OutageMetric, PathMetrics, SpoofMetrics};
pub use truth::{read_truth, write_truth, Attribution, GroundTruth, Totals, TruthError, TruthRecord};

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::integrity::ChainConfig;
use crate::observer::write_records;
use crate::schedule::{mix64, OrderSpec, PoolSpec, ScheduleSpec};
use crate::sender::{InterfaceConfig, SenderConfig, SenderEngine, SenderError, StreamConfig, DEFAULT_IHB_TTL};
use crate::wire::{Heartbeat, HostId, ObservedHeartbeat, TransportKind};

const NS: u64 = 1_000_000_000;
pub const DEFAULT_START_UNIX_S: u64 = 1_500_000_000;
pub const DEFAULT_PER_HOP_DELAY_MS: f64 = 5.0;
pub const DEFAULT_HOPS: u8 = 10;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario: {0}")]
    Invalid(String),
    #[error("host {index} ({name}): {reason}")]
    Host { index: usize, name: String, reason: String },
    #[error("event {index} ({kind}): {reason}")]
    Event { index: usize, kind: &'static str, reason: String },
    #[error("host {name}: {source}")]
    Sender { name: String, source: SenderError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderChoice {
    #[default]
    PureRandom,
    Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSegment {
    pub start_s: u64,
    pub hops: u8,
}

fn default_path() -> Vec<PathSegment> {
    vec![PathSegment { start_s: 0, hops: DEFAULT_HOPS }]
}

fn full_v4() -> PoolSpec {
    PoolSpec::FullV4
}

fn default_ttl() -> u8 {
    DEFAULT_IHB_TTL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub name: String,
    /// One interface per address, all sharing the HostID.
    pub addresses: Vec<Ipv4Addr>,
    pub rate_uhz: u32,
    #[serde(default)]
    pub host_id: Option<HostId>,
    #[serde(default)]
    pub rotation_period_s: Option<u64>,
    #[serde(default = "full_v4")]
    pub pool: PoolSpec,
    /// Keys and seeds are derived from the scenario seed.
    #[serde(default)]
    pub order: OrderChoice,
    /// Scripted hop counts; the first segment starts at 0.
    #[serde(default = "default_path")]
    pub path: Vec<PathSegment>,
    #[serde(default)]
    pub pair_mode: bool,
    #[serde(default)]
    pub integrity: Option<ChainConfig>,
    #[serde(default = "default_ttl")]
    pub ihb_ttl: u8,
    #[serde(default = "default_transport")]
    pub transport: TransportKind,
    /// Label only: hosts behind one NAT share an address.
    #[serde(default)]
    pub nat_group: Option<String>,
}

fn default_transport() -> TransportKind {
    TransportKind::Icmp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpoofSeq {
    /// Own counter starting at 0.
    #[default]
    Counter,
    /// Copies the seq of the victim's latest heartbeat sent into the lens.
    EchoVictim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Event {
    /// Heartbeats from sources inside `prefix` are dropped during `[start_s, end_s)`.
    OutagePrefix { prefix: Ipv4Net, start_s: u64, end_s: u64 },
    /// Adds `delta_hops` to every path from inside `prefix` from `start_s` on.
    RouteShift { prefix: Ipv4Net, start_s: u64, delta_hops: i16 },
    /// Each heartbeat takes `hop_a` with probability `split`, else `hop_b`.
    LoadBalance {
        host: String,
        hop_a: u8,
        hop_b: u8,
        split: f64,
        #[serde(default)]
        start_s: u64,
        #[serde(default)]
        end_s: Option<u64>,
    },
    /// Forged heartbeats aimed straight at the lens.
    Spoofer {
        forged_src: Ipv4Addr,
        host_id: HostId,
        hop_count: u8,
        rate_uhz: u32,
        #[serde(default)]
        declared_rate_uhz: Option<u32>,
        start_s: u64,
        end_s: u64,
        #[serde(default = "default_ttl")]
        orig_ttl: u8,
        #[serde(default)]
        seq: SpoofSeq,
    },
}

impl Event {
    pub fn name(&self) -> &'static str {
        match self {
            Event::OutagePrefix { .. } => "outage-prefix",
            Event::RouteShift { .. } => "route-shift",
            Event::LoadBalance { .. } => "load-balance",
            Event::Spoofer { .. } => "spoofer",
        }
    }
}

fn default_start() -> u64 {
    DEFAULT_START_UNIX_S
}

fn default_delay() -> f64 {
    DEFAULT_PER_HOP_DELAY_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    pub duration_s: u64,
    /// The lens; its prefix length is the mask `m`.
    pub lens: Ipv4Net,
    #[serde(default = "default_start")]
    pub start_unix_s: u64,
    #[serde(default = "default_delay")]
    pub per_hop_delay_ms: f64,
    #[serde(default)]
    pub hosts: Vec<HostSpec>,
    #[serde(default)]
    pub events: Vec<Event>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn start_ns(&self) -> u64 {
        self.start_unix_s * NS
    }

    pub fn end_ns(&self) -> u64 {
        (self.start_unix_s + self.duration_s) * NS
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.digest().as_bytes());
        h.update(self.seed.to_be_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.duration_s == 0 {
            return Err(ScenarioError::Invalid("duration_s must be positive".into()));
        }
        if self.start_unix_s.checked_add(self.duration_s).and_then(|s| s.checked_mul(NS)).is_none() {
            return Err(ScenarioError::Invalid("start_unix_s + duration_s overflows nanoseconds".into()));
        }
        if !(self.per_hop_delay_ms.is_finite() && self.per_hop_delay_ms >= 0.0) {
            return Err(ScenarioError::Invalid("per_hop_delay_ms must be non-negative".into()));
        }
        let mut names = BTreeMap::new();
        for (index, h) in self.hosts.iter().enumerate() {
            let bad = |reason: String| ScenarioError::Host { index, name: h.name.clone(), reason };
            if names.insert(h.name.as_str(), index).is_some() {
                return Err(bad("duplicate host name".into()));
            }
            if h.addresses.is_empty() {
                return Err(bad("needs at least one address".into()));
            }
            if matches!(h.pool, PoolSpec::Local { .. }) {
                return Err(bad("local pools are not simulated".into()));
            }
            if h.path.first().map(|p| p.start_s) != Some(0) {
                return Err(bad("path must start with a segment at 0".into()));
            }
            if h.path.windows(2).any(|w| w[1].start_s <= w[0].start_s) {
                return Err(bad("path segments must have increasing start_s".into()));
            }
            if h.path.iter().any(|p| p.start_s > self.duration_s) {
                return Err(bad("path segment starts after the run".into()));
            }
            self.sender_config(index).validate().map_err(|e| bad(e.to_string()))?;
            for &addr in &h.addresses {
                for t in self.breakpoints(h, addr) {
                    let hops = self.scripted_hops(h, addr, t);
                    if hops < 0 || hops >= i32::from(h.ihb_ttl) {
                        return Err(bad(format!("{addr}: hop count {hops} at {t} s outside [0, ihb_ttl)")));
                    }
                }
            }
        }
        for (index, e) in self.events.iter().enumerate() {
            let bad = |reason: String| ScenarioError::Event { index, kind: e.name(), reason };
            let within = |t: u64| t <= self.duration_s;
            match e {
                Event::OutagePrefix { start_s, end_s, .. } => {
                    if !(within(*start_s) && within(*end_s) && start_s < end_s) {
                        return Err(bad(format!("window [{start_s}, {end_s}) not inside [0, {}]", self.duration_s)));
                    }
                }
                Event::RouteShift { start_s, .. } => {
                    if !within(*start_s) {
                        return Err(bad(format!("start_s {start_s} after the run")));
                    }
                }
                Event::LoadBalance { host, hop_a, hop_b, split, start_s, end_s } => {
                    let Some(&hi) = names.get(host.as_str()) else {
                        return Err(bad(format!("unknown host {host}")));
                    };
                    if !(0.0..=1.0).contains(split) {
                        return Err(bad(format!("split {split} outside [0, 1]")));
                    }
                    let ttl = self.hosts[hi].ihb_ttl;
                    if *hop_a >= ttl || *hop_b >= ttl {
                        return Err(bad("hop counts must be below the host's ihb_ttl".into()));
                    }
                    if !within(*start_s) || end_s.is_some_and(|e| !within(e) || e <= *start_s) {
                        return Err(bad("window not inside the run".into()));
                    }
                }
                Event::Spoofer { hop_count, rate_uhz, start_s, end_s, orig_ttl, declared_rate_uhz, .. } => {
                    if !(within(*start_s) && within(*end_s) && start_s < end_s) {
                        return Err(bad(format!("window [{start_s}, {end_s}) not inside [0, {}]", self.duration_s)));
                    }
                    if *rate_uhz == 0 || *declared_rate_uhz == Some(0) {
                        return Err(bad("rates must be positive".into()));
                    }
                    if hop_count >= orig_ttl {
                        return Err(bad("hop_count must be below orig_ttl".into()));
                    }
                }
            }
        }
        Ok(())
    }

    fn host_base(&self, index: usize) -> u64 {
        mix64(self.seed ^ mix64(index as u64 + 1))
    }

    /// Sender configuration the simulator runs for host `index`.
    pub fn sender_config(&self, index: usize) -> SenderConfig {
        let h = &self.hosts[index];
        let base = self.host_base(index);
        let interfaces = h
            .addresses
            .iter()
            .enumerate()
            .map(|(i, &src_addr)| {
                let k = mix64(base ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9));
                let order = match h.order {
                    OrderChoice::PureRandom => OrderSpec::PureRandom { seed: k },
                    OrderChoice::Permutation => {
                        OrderSpec::Permutation { key: k, epoch: 0, cursor: 0, rekey_each_epoch: false }
                    }
                };
                InterfaceConfig {
                    name: format!("if{i}"),
                    src_addr,
                    transport: h.transport,
                    streams: vec![StreamConfig { schedule: ScheduleSpec { pool: h.pool, order }, rate_uhz: h.rate_uhz }],
                }
            })
            .collect();
        SenderConfig {
            host_id: h.host_id,
            interfaces,
            pair_mode: h.pair_mode,
            hostid_rotation_period_s: h.rotation_period_s,
            hostid_seed: mix64(base ^ 0x4057_1d00),
            integrity: h.integrity.clone(),
            ihb_ttl: h.ihb_ttl,
        }
    }

    /// When host `index` starts its first slot: a seeded phase inside
    /// the first period, so hosts are not in lockstep.
    pub fn host_start_ns(&self, index: usize) -> u64 {
        let rate = u128::from(self.hosts[index].rate_uhz.max(1));
        let period = (u128::from(NS) * 1_000_000 / rate).max(1);
        let phase = u128::from(mix64(self.host_base(index) ^ 0x00f5_e7)) % period;
        self.start_ns() + phase as u64
    }

    fn breakpoints(&self, h: &HostSpec, addr: Ipv4Addr) -> Vec<u64> {
        let mut ts: Vec<u64> = h.path.iter().map(|p| p.start_s).collect();
        for e in &self.events {
            if let Event::RouteShift { prefix, start_s, .. } = e {
                if prefix.contains(&addr) {
                    ts.push(*start_s);
                }
            }
        }
        ts.sort_unstable();
        ts.dedup();
        ts
    }

    /// Scripted hop count (segments plus route shifts) at `t_s` seconds
    /// into the run, ignoring load balancing.
    pub fn scripted_hops(&self, h: &HostSpec, addr: Ipv4Addr, t_s: u64) -> i32 {
        self.scripted_hops_ns(h, addr, t_s * NS)
    }

    fn scripted_hops_ns(&self, h: &HostSpec, addr: Ipv4Addr, offset_ns: u64) -> i32 {
        let seg = h.path.iter().take_while(|p| p.start_s * NS <= offset_ns).last().map_or(DEFAULT_HOPS, |p| p.hops);
        let shift: i32 = self
            .events
            .iter()
            .filter_map(|e| match e {
                Event::RouteShift { prefix, start_s, delta_hops }
                    if prefix.contains(&addr) && start_s * NS <= offset_ns =>
                {
                    Some(i32::from(*delta_hops))
                }
                _ => None,
            })
            .sum();
        i32::from(seg) + shift
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub trace: Vec<ObservedHeartbeat>,
    pub truth: GroundTruth,
}

struct HostRun {
    engine: SenderEngine,
    totals: Totals,
    last_host_id: Option<HostId>,
    balance: Vec<(u8, u8, f64, u64, u64)>,
}

struct SpooferRun {
    next_slot: u64,
    start_ns: u64,
    end_ns: u64,
    period_ns: u128,
    seq: u32,
    rng: ChaCha8Rng,
    totals: Totals,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Source {
    Host(usize),
    Spoofer(usize),
}

fn outage_active(outages: &[(Ipv4Net, u64, u64)], addr: Ipv4Addr, t: u64) -> bool {
    outages.iter().any(|(p, s, e)| p.contains(&addr) && *s <= t && t < *e)
}

/// Runs `scenario` to completion.
pub fn run(scenario: &Scenario) -> Result<Simulation, ScenarioError> {
    scenario.validate()?;
    let start = scenario.start_ns();
    let end = scenario.end_ns();
    let delay_ns = (scenario.per_hop_delay_ms * 1e6).round() as u64;
    let lens = scenario.lens.trunc();
    let lens_size = 1u64 << (32 - lens.prefix_len());
    let mut path_rng = ChaCha8Rng::seed_from_u64(mix64(scenario.seed ^ 0x9a7));

    let outages: Vec<(Ipv4Net, u64, u64)> = scenario
        .events
        .iter()
        .filter_map(|e| match e {
            Event::OutagePrefix { prefix, start_s, end_s } => Some((*prefix, start + start_s * NS, start + end_s * NS)),
            _ => None,
        })
        .collect();

    let mut hosts = Vec::with_capacity(scenario.hosts.len());
    for (i, h) in scenario.hosts.iter().enumerate() {
        let engine = SenderEngine::new(&scenario.sender_config(i), scenario.host_start_ns(i))
            .map_err(|source| ScenarioError::Sender { name: h.name.clone(), source })?;
        let balance = scenario
            .events
            .iter()
            .filter_map(|e| match e {
                Event::LoadBalance { host, hop_a, hop_b, split, start_s, end_s } if *host == h.name => {
                    Some((*hop_a, *hop_b, *split, start + start_s * NS, start + end_s.unwrap_or(scenario.duration_s) * NS))
                }
                _ => None,
            })
            .collect();
        hosts.push(HostRun { engine, totals: Totals::new(&h.name), last_host_id: None, balance });
    }
    let mut spoofers: Vec<(usize, SpooferRun)> = scenario
        .events
        .iter()
        .enumerate()
        .filter_map(|(i, e)| match e {
            Event::Spoofer { rate_uhz, start_s, end_s, .. } => Some((
                i,
                SpooferRun {
                    next_slot: 0,
                    start_ns: start + start_s * NS,
                    end_ns: start + end_s * NS,
                    period_ns: (u128::from(NS) * 1_000_000 / u128::from(*rate_uhz)).max(1),
                    seq: 0,
                    rng: ChaCha8Rng::seed_from_u64(mix64(scenario.seed ^ mix64(0x5200 + i as u64))),
                    totals: Totals::new(&format!("spoofer-{i}")),
                },
            )),
            _ => None,
        })
        .collect();

    let mut queue: BinaryHeap<Reverse<(u64, Source)>> = BinaryHeap::new();
    for (i, h) in hosts.iter().enumerate() {
        queue.push(Reverse((h.engine.next_due().0, Source::Host(i))));
    }
    for (i, (_, s)) in spoofers.iter().enumerate() {
        queue.push(Reverse((s.start_ns, Source::Spoofer(i))));
    }

    let mut records = Vec::new();
    let mut arrivals: Vec<(ObservedHeartbeat, Attribution)> = Vec::new();
    let mut victim_seq: BTreeMap<Ipv4Addr, u32> = BTreeMap::new();

    while let Some(Reverse((t, source))) = queue.pop() {
        if t >= end {
            continue;
        }
        match source {
            Source::Host(i) => {
                let spec = &scenario.hosts[i];
                let run = &mut hosts[i];
                let (_, id) = run.engine.next_due();
                for em in run.engine.fire(id, t) {
                    if run.last_host_id != Some(em.heartbeat.host_id) {
                        run.last_host_id = Some(em.heartbeat.host_id);
                        records.push(TruthRecord::HostId { host: spec.name.clone(), host_id: em.heartbeat.host_id, from_ns: t });
                    }
                    run.totals.emitted += 1;
                    if outage_active(&outages, em.src_addr, t) {
                        run.totals.suppressed += 1;
                        continue;
                    }
                    if !lens.contains(&em.dst_addr) {
                        run.totals.out_of_lens += 1;
                        continue;
                    }
                    run.totals.in_lens += 1;
                    let hops = match run.balance.iter().find(|b| b.3 <= t && t < b.4) {
                        Some(&(a, b, split, _, _)) => {
                            if path_rng.gen_bool(split) {
                                a
                            } else {
                                b
                            }
                        }
                        None => scenario.scripted_hops_ns(spec, em.src_addr, t - start) as u8,
                    };
                    victim_seq.insert(em.src_addr, em.heartbeat.seq);
                    let obs = ObservedHeartbeat {
                        recv_time_ns: t + u64::from(hops) * delay_ns,
                        src_addr: em.src_addr,
                        dst_addr: em.dst_addr,
                        arrival_ttl: em.ttl - hops,
                        transport: em.transport,
                        body: em.heartbeat,
                    };
                    arrivals.push((obs, Attribution { index: 0, origin: spec.name.clone(), spoofed: false, hops }));
                }
                queue.push(Reverse((run.engine.next_due().0, source)));
            }
            Source::Spoofer(i) => {
                let (event_index, run) = &mut spoofers[i];
                let Event::Spoofer { forged_src, host_id, hop_count, rate_uhz, declared_rate_uhz, orig_ttl, seq, .. } =
                    &scenario.events[*event_index]
                else {
                    unreachable!("spoofer runs are built from spoofer events")
                };
                if t >= run.end_ns {
                    continue;
                }
                let seq = match seq {
                    SpoofSeq::EchoVictim => victim_seq.get(forged_src).copied().unwrap_or(run.seq),
                    SpoofSeq::Counter => run.seq,
                };
                run.seq = run.seq.wrapping_add(1);
                let dst = Ipv4Addr::from(u32::from(lens.network()) + run.rng.gen_range(0..lens_size) as u32);
                let body = Heartbeat::new(*host_id, declared_rate_uhz.unwrap_or(*rate_uhz), *orig_ttl, t, seq);
                run.totals.emitted += 1;
                run.totals.in_lens += 1;
                let obs = ObservedHeartbeat {
                    recv_time_ns: t + u64::from(*hop_count) * delay_ns,
                    src_addr: *forged_src,
                    dst_addr: dst,
                    arrival_ttl: orig_ttl - hop_count,
                    transport: TransportKind::Icmp,
                    body,
                };
                arrivals.push((
                    obs,
                    Attribution { index: 0, origin: run.totals.source.clone(), spoofed: true, hops: *hop_count },
                ));
                run.next_slot += 1;
                let next = run.start_ns as u128 + u128::from(run.next_slot) * run.period_ns;
                queue.push(Reverse((u64::try_from(next).unwrap_or(u64::MAX), source)));
            }
        }
    }

    arrivals.sort_by_key(|(o, _)| o.recv_time_ns);
    let (trace, mut attributions): (Vec<_>, Vec<_>) = arrivals.into_iter().unzip();
    for (i, a) in attributions.iter_mut().enumerate() {
        a.index = i as u64;
    }

    let mut truth = vec![TruthRecord::Run {
        run_id: scenario.run_id(),
        seed: scenario.seed,
        scenario_digest: scenario.digest(),
        trace_digest: trace_digest(&trace),
        arrivals: trace.len() as u64,
        lens,
        start_ns: start,
        end_ns: end,
    }];
    for h in &scenario.hosts {
        truth.push(TruthRecord::Host {
            name: h.name.clone(),
            addresses: h.addresses.clone(),
            rate_uhz: h.rate_uhz,
            nat_group: h.nat_group.clone(),
        });
    }
    truth.extend(event_records(scenario));
    truth.extend(path_records(scenario));
    truth.extend(records);
    truth.extend(hosts.into_iter().map(|h| TruthRecord::Totals(h.totals)));
    truth.extend(spoofers.into_iter().map(|(_, s)| TruthRecord::Totals(s.totals)));
    truth.extend(attributions.into_iter().map(TruthRecord::Arrival));
    Ok(Simulation { trace, truth: GroundTruth { records: truth } })
}

/// SHA-256 of the trace as written by [`write_records`].
pub fn trace_digest(trace: &[ObservedHeartbeat]) -> String {
    let mut buf = Vec::new();
    write_records(&mut buf, trace).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}

fn event_records(scenario: &Scenario) -> Vec<TruthRecord> {
    let start = scenario.start_ns();
    scenario
        .events
        .iter()
        .enumerate()
        .map(|(index, e)| match e {
            Event::OutagePrefix { prefix, start_s, end_s } => TruthRecord::Outage {
                index,
                prefix: *prefix,
                start_ns: start + start_s * NS,
                end_ns: start + end_s * NS,
                addresses: scenario
                    .hosts
                    .iter()
                    .flat_map(|h| h.addresses.iter().copied())
                    .filter(|a| prefix.contains(a))
                    .collect(),
            },
            Event::RouteShift { prefix, start_s, delta_hops } => {
                TruthRecord::RouteShift { index, prefix: *prefix, at_ns: start + start_s * NS, delta_hops: *delta_hops }
            }
            Event::LoadBalance { host, hop_a, hop_b, split, start_s, end_s } => TruthRecord::LoadBalance {
                index,
                host: host.clone(),
                addresses: scenario
                    .hosts
                    .iter()
                    .find(|h| h.name == *host)
                    .map(|h| h.addresses.clone())
                    .unwrap_or_default(),
                hop_a: *hop_a,
                hop_b: *hop_b,
                split: *split,
                start_ns: start + start_s * NS,
                end_ns: start + end_s.unwrap_or(scenario.duration_s) * NS,
            },
            Event::Spoofer { forged_src, host_id, hop_count, start_s, end_s, .. } => TruthRecord::Spoofer {
                index,
                forged_src: *forged_src,
                host_id: *host_id,
                hop_count: *hop_count,
                start_ns: start + start_s * NS,
                end_ns: start + end_s * NS,
            },
        })
        .collect()
}

fn path_records(scenario: &Scenario) -> Vec<TruthRecord> {
    let mut out = Vec::new();
    for h in &scenario.hosts {
        for &addr in &h.addresses {
            let mut prev = scenario.scripted_hops(h, addr, 0);
            for t in scenario.breakpoints(h, addr).into_iter().filter(|t| *t > 0 && *t < scenario.duration_s) {
                let now = scenario.scripted_hops(h, addr, t);
                if now != prev {
                    out.push(TruthRecord::PathChange {
                        addr,
                        at_ns: scenario.start_ns() + t * NS,
                        before: prev as i16,
                        after: now as i16,
                    });
                }
                prev = now;
            }
        }
    }
    out
}
