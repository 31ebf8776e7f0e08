//! End-to-end analysis of an observed trace: replay in receive order with
//! periodic outage ticks, then path, shared-fate, alias and NAT analysis over
//! the final state.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use super::{
    alias_candidates, correlate_shared_fate, detect_path_events, merge_episodes, nat_estimates, outage_assessment,
    AliasCandidateSet, NatEstimate, OutageAssessment, OutageTarget, PathChangeEvent, PathConfig, PathEventKind,
    Report, SharedFateGroup, SpoofAlert, SpoofConfig, SpoofDetector, SpoofEpisode, SpoofEvidence,
    DEFAULT_OUTAGE_THRESHOLD, MAX_SILENCE_MASK,
};
use crate::integrity::{Verdict, VerifierState};
use crate::observer::{Anomaly, Snapshot, SourceKey, SourceState, StateStore, StoreConfig};
use crate::wire::ObservedHeartbeat;

const NS: u64 = 1_000_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_threshold")]
    pub outage_threshold: f64,
    /// Outage assessments run on a grid of this spacing.
    #[serde(default = "default_tick")]
    pub tick_s: u64,
    #[serde(default = "default_tau")]
    pub tau_s: u64,
    /// NAT estimates look at this much time before the end of the trace.
    #[serde(default = "default_nat_window")]
    pub nat_window_s: u64,
    #[serde(default)]
    pub path: PathConfig,
    #[serde(default)]
    pub spoof: SpoofConfig,
    #[serde(default = "default_true")]
    pub verify_integrity: bool,
}

fn default_threshold() -> f64 {
    DEFAULT_OUTAGE_THRESHOLD
}
fn default_tick() -> u64 {
    300
}
fn default_tau() -> u64 {
    60
}
fn default_nat_window() -> u64 {
    3600
}
fn default_true() -> bool {
    true
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            outage_threshold: default_threshold(),
            tick_s: default_tick(),
            tau_s: default_tau(),
            nat_window_s: default_nat_window(),
            path: PathConfig::default(),
            spoof: SpoofConfig::default(),
            verify_integrity: true,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.outage_threshold) {
            return Err(format!("outage_threshold {} outside [0, 1]", self.outage_threshold));
        }
        if self.tick_s == 0 {
            return Err("tick_s must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.path.major_fraction) || self.path.major_fraction == 0.0 {
            return Err(format!("path.major_fraction {} outside (0, 1]", self.path.major_fraction));
        }
        if self.path.persist_windows == 0 || self.path.load_balance_windows == 0 {
            return Err("path window counts must be positive".into());
        }
        if self.spoof.margin < 0 {
            return Err("spoof.margin must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityCounts {
    /// Messages whose MAC checked out once their key was disclosed.
    pub authenticated: u64,
    /// Messages whose key was disclosed but whose MAC did not match.
    pub rejected: u64,
    /// Still waiting for a disclosure at the end of the trace.
    pub buffered: u64,
    pub forged: u64,
    pub unsigned: u64,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub snapshot: Snapshot,
    pub anomalies: Vec<Anomaly>,
    /// Every tick assessment, per /24 with at least one participant.
    pub outages: Vec<OutageAssessment>,
    /// Alerts that survived reconciliation with shared-fate groups.
    pub spoof_alerts: Vec<SpoofAlert>,
    pub spoof_episodes: Vec<SpoofEpisode>,
    pub path_events: Vec<PathChangeEvent>,
    pub shared_fate: Vec<SharedFateGroup>,
    pub aliases: Vec<AliasCandidateSet>,
    pub nat: Vec<NatEstimate>,
    pub integrity: IntegrityCounts,
    pub start_ns: u64,
    pub end_ns: u64,
}

fn slash24(addr: Ipv4Addr) -> Ipv4Net {
    Ipv4Net::new(addr, 24).expect("valid prefix").trunc()
}

/// Latest state per address in `prefix`. An address that rotated HostID
/// is represented by its current key only.
fn prefix_states<'a>(store: &'a StateStore, members: &BTreeSet<SourceKey>) -> Vec<&'a SourceState> {
    let mut latest: BTreeMap<Ipv4Addr, &SourceState> = BTreeMap::new();
    for key in members {
        if let Some(s) = store.get(key) {
            let slot = latest.entry(key.src_addr).or_insert(s);
            if s.last_seen_ns > slot.last_seen_ns {
                *slot = s;
            }
        }
    }
    latest.into_values().collect()
}

/// Replays `trace` (any order; it is sorted by receive time) through a fresh
/// store. Outage ticks continue up to `end_ns`.
pub fn analyze_trace(
    trace: &[ObservedHeartbeat],
    store_config: StoreConfig,
    config: &AnalysisConfig,
    end_ns: u64,
) -> Analysis {
    let mut order: Vec<&ObservedHeartbeat> = trace.iter().collect();
    order.sort_by_key(|o| o.recv_time_ns);
    let mask = store_config.lens_mask();
    let mut store = StateStore::new(store_config);
    let mut detector = SpoofDetector::new(config.spoof.clone());
    let mut verifiers: BTreeMap<SourceKey, VerifierState> = BTreeMap::new();
    let mut participants: BTreeMap<Ipv4Net, BTreeSet<SourceKey>> = BTreeMap::new();
    let mut anomalies = Vec::new();
    let mut raw_alerts = Vec::new();
    let mut outages = Vec::new();
    let mut integrity = IntegrityCounts::default();

    let tick_ns = config.tick_s.max(1) * NS;
    let start_ns = order.first().map_or(end_ns, |o| o.recv_time_ns);
    let mut next_tick = (start_ns / tick_ns + 1) * tick_ns;
    let mut run_ticks = |until: u64, inclusive: bool, store: &StateStore, participants: &BTreeMap<Ipv4Net, BTreeSet<SourceKey>>, outages: &mut Vec<OutageAssessment>| {
        while next_tick < until || (inclusive && next_tick == until) {
            if mask <= MAX_SILENCE_MASK {
                for members in participants.values() {
                    let states = prefix_states(store, members);
                    if let Ok(a) = outage_assessment(&states, next_tick, mask, config.outage_threshold) {
                        outages.push(a);
                    }
                }
            }
            next_tick += tick_ns;
        }
    };

    for obs in order {
        run_ticks(obs.recv_time_ns, false, &store, &participants, &mut outages);
        let Ok(found) = store.ingest(obs) else { continue };
        let key = SourceKey { src_addr: obs.src_addr, host_id: obs.body.host_id };
        participants.entry(slash24(obs.src_addr)).or_default().insert(key);
        raw_alerts.extend(detector.check(obs, &found));
        anomalies.extend(found);
        if config.verify_integrity {
            if obs.body.integrity.is_none() {
                integrity.unsigned += 1;
            } else {
                match verifiers.entry(key).or_default().verify(obs.src_addr, &obs.body) {
                    Verdict::Authenticated { verified, rejected } => {
                        integrity.authenticated += verified.len() as u64;
                        integrity.rejected += rejected.len() as u64;
                    }
                    Verdict::Buffered => {}
                    Verdict::Forged(_) => integrity.forged += 1,
                }
            }
        }
    }
    run_ticks(end_ns, true, &store, &participants, &mut outages);
    integrity.buffered = verifiers.values().map(|v| v.buffered() as u64).sum();

    let snapshot = store.snapshot();
    let window_ns = snapshot.config.window_ns();
    let mut path_events: Vec<PathChangeEvent> =
        snapshot.iter().flat_map(|s| detect_path_events(s, window_ns, &config.path)).collect();
    let tau_ns = config.tau_s * NS;
    let shared_fate = correlate_shared_fate(&path_events, tau_ns);

    let spoof_alerts = reconcile_spoof(raw_alerts, &path_events, &shared_fate, tau_ns, config.spoof.margin);
    drop_spoofed_path_events(&mut path_events, &spoof_alerts);
    let spoof_episodes = merge_episodes(&spoof_alerts, config.spoof.episode_gap_s * NS);

    let aliases = alias_candidates(&snapshot, start_ns, end_ns.saturating_add(1));
    let nat = nat_estimates(&snapshot, end_ns.saturating_sub(config.nat_window_s * NS), end_ns.saturating_add(1));

    Analysis {
        snapshot,
        anomalies,
        outages,
        spoof_alerts,
        spoof_episodes,
        path_events,
        shared_fate,
        aliases,
        nat,
        integrity,
        start_ns,
        end_ns,
    }
}

/// Drops shrunken-hop alerts explained by a shrinking shared-fate group the
/// key belongs to: onset no later than the alert (within tau) and the new hop
/// count within margin of the route change's new mode.
fn reconcile_spoof(
    alerts: Vec<SpoofAlert>,
    events: &[PathChangeEvent],
    groups: &[SharedFateGroup],
    tau_ns: u64,
    margin: i16,
) -> Vec<SpoofAlert> {
    alerts
        .into_iter()
        .filter(|alert| {
            let SpoofEvidence::HopCountShrunk { observed, .. } = alert.evidence else { return true };
            let explained = groups.iter().filter(|g| g.delta_sign < 0 && g.members.contains(&alert.key)).any(|g| {
                events.iter().any(|e| {
                    e.kind == PathEventKind::RouteChange
                        && e.key == Some(alert.key)
                        && e.onset_ns >= g.first_onset_ns
                        && e.onset_ns <= g.last_onset_ns
                        && e.onset_ns <= alert.recv_time_ns.saturating_add(tau_ns)
                        && e.after.first().is_some_and(|after| observed >= after - margin)
                })
            });
            !explained
        })
        .collect()
}

/// A path event on a spoofed key that involves a spoofed hop value says
/// nothing about the real path.
fn drop_spoofed_path_events(events: &mut Vec<PathChangeEvent>, alerts: &[SpoofAlert]) {
    let mut spoofed: BTreeMap<SourceKey, BTreeSet<i16>> = BTreeMap::new();
    for a in alerts {
        if let SpoofEvidence::HopCountShrunk { observed, .. } = a.evidence {
            spoofed.entry(a.key).or_default().insert(observed);
        }
    }
    events.retain(|e| {
        let Some(hops) = e.key.and_then(|k| spoofed.get(&k)) else { return true };
        !e.before.iter().chain(&e.after).any(|h| hops.contains(h))
    });
}

impl Analysis {
    /// Outage assessments where a target's verdict changed, plus each
    /// target's last assessment.
    pub fn outage_transitions(&self) -> Vec<OutageAssessment> {
        let mut last: BTreeMap<String, &OutageAssessment> = BTreeMap::new();
        let mut out = Vec::new();
        for a in &self.outages {
            let id = target_id(&a.target);
            match last.get(&id) {
                Some(prev) if prev.verdict == a.verdict => {}
                _ => out.push(a.clone()),
            }
            last.insert(id, a);
        }
        for a in last.values() {
            if !out.iter().any(|o| o == *a) {
                out.push((*a).clone());
            }
        }
        out.sort_by(|x, y| x.at_ns.cmp(&y.at_ns).then_with(|| target_id(&x.target).cmp(&target_id(&y.target))));
        out
    }

    pub fn reports(&self, selector: ReportSelector) -> Vec<Report> {
        match selector {
            ReportSelector::Outage => self.outage_transitions().into_iter().map(Report::Outage).collect(),
            ReportSelector::Paths => self
                .path_events
                .iter()
                .cloned()
                .map(Report::PathEvent)
                .chain(self.shared_fate.iter().cloned().map(Report::SharedFate))
                .collect(),
            ReportSelector::Spoof => self.spoof_episodes.iter().cloned().map(Report::Spoof).collect(),
            ReportSelector::Alias => self.aliases.iter().cloned().map(Report::Alias).collect(),
            ReportSelector::Nat => self.nat.iter().cloned().map(Report::Nat).collect(),
            ReportSelector::Integrity => vec![Report::Integrity(self.integrity)],
        }
    }
}

fn target_id(t: &OutageTarget) -> String {
    match t {
        OutageTarget::Source { key } => key.to_string(),
        OutageTarget::Prefix { prefix } => prefix.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSelector {
    Outage,
    Paths,
    Spoof,
    Alias,
    Nat,
    Integrity,
}
