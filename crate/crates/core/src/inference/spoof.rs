//! Spoofing evidence: arrivals that got topologically closer than any honest
//! copy ever did, and meta-data conflicts inside one source key.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::observer::{Anomaly, AnomalyKind, SourceKey, SourceState};
use crate::wire::ObservedHeartbeat;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpoofConfig {
    #[serde(default = "default_margin")]
    pub margin: i16,
    #[serde(default = "default_min_samples")]
    pub min_samples: u64,
    /// Alerts closer than this are merged into one episode.
    #[serde(default = "default_gap")]
    pub episode_gap_s: u64,
}

fn default_margin() -> i16 {
    3
}
fn default_min_samples() -> u64 {
    10
}
fn default_gap() -> u64 {
    3600
}

impl Default for SpoofConfig {
    fn default() -> Self {
        SpoofConfig { margin: default_margin(), min_samples: default_min_samples(), episode_gap_s: default_gap() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "evidence", rename_all = "snake_case")]
pub enum SpoofEvidence {
    HopCountShrunk { baseline_min: i16, observed: i16 },
    MetaConflict { anomaly: AnomalyKind },
    /// Reserved; needs non-heartbeat traffic from the same source.
    CrossProtocolTtlMismatch,
}

impl SpoofEvidence {
    pub fn name(&self) -> &'static str {
        match self {
            SpoofEvidence::HopCountShrunk { .. } => "hop_count_shrunk",
            SpoofEvidence::MetaConflict { .. } => "meta_conflict",
            SpoofEvidence::CrossProtocolTtlMismatch => "cross_protocol_ttl_mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpoofAlert {
    pub key: SourceKey,
    pub recv_time_ns: u64,
    pub evidence: SpoofEvidence,
}

fn hops_of(obs: &ObservedHeartbeat) -> i16 {
    i16::from(obs.body.orig_ttl) - i16::from(obs.arrival_ttl)
}

/// Checks `obs` against the hop history already in `state`.
pub fn detect_spoof(state: &SourceState, obs: &ObservedHeartbeat, config: &SpoofConfig) -> Option<SpoofAlert> {
    if state.total_arrivals < config.min_samples {
        return None;
    }
    let observed = hops_of(obs);
    (observed < state.hop_min - config.margin).then(|| SpoofAlert {
        key: SourceKey { src_addr: obs.src_addr, host_id: obs.body.host_id },
        recv_time_ns: obs.recv_time_ns,
        evidence: SpoofEvidence::HopCountShrunk { baseline_min: state.hop_min, observed },
    })
}

#[derive(Debug, Clone, Copy)]
struct Baseline {
    min: i16,
    samples: u64,
}

/// Streaming detector. Hop baselines are kept per source address, across
/// HostIDs, and flagged arrivals never lower them.
#[derive(Debug, Clone, Default)]
pub struct SpoofDetector {
    config: SpoofConfig,
    baselines: BTreeMap<Ipv4Addr, Baseline>,
}

impl SpoofDetector {
    pub fn new(config: SpoofConfig) -> Self {
        SpoofDetector { config, baselines: BTreeMap::new() }
    }

    /// `anomalies` are what the observer reported for this same arrival.
    pub fn check(&mut self, obs: &ObservedHeartbeat, anomalies: &[Anomaly]) -> Vec<SpoofAlert> {
        let key = SourceKey { src_addr: obs.src_addr, host_id: obs.body.host_id };
        let observed = hops_of(obs);
        let mut alerts = Vec::new();
        let baseline = self.baselines.entry(obs.src_addr).or_insert(Baseline { min: observed, samples: 0 });
        if baseline.samples >= self.config.min_samples && observed < baseline.min - self.config.margin {
            alerts.push(SpoofAlert {
                key,
                recv_time_ns: obs.recv_time_ns,
                evidence: SpoofEvidence::HopCountShrunk { baseline_min: baseline.min, observed },
            });
        } else {
            baseline.min = baseline.min.min(observed);
            baseline.samples += 1;
        }
        for a in anomalies {
            if matches!(a.kind, AnomalyKind::DeclaredRateConflict { .. } | AnomalyKind::DuplicateSeq { .. }) {
                alerts.push(SpoofAlert {
                    key: a.key,
                    recv_time_ns: a.recv_time_ns,
                    evidence: SpoofEvidence::MetaConflict { anomaly: a.kind.clone() },
                });
            }
        }
        alerts
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpoofEpisode {
    pub key: SourceKey,
    pub evidence: String,
    pub first_ns: u64,
    pub last_ns: u64,
    pub alerts: u64,
    /// Evidence of the first alert in the episode.
    pub example: SpoofEvidence,
}

/// Collapses alerts of one kind on one key that are within `gap_ns` of each other.
pub fn merge_episodes(alerts: &[SpoofAlert], gap_ns: u64) -> Vec<SpoofEpisode> {
    let mut sorted: Vec<&SpoofAlert> = alerts.iter().collect();
    sorted.sort_by_key(|a| (a.key, a.evidence.name(), a.recv_time_ns));
    let mut episodes: Vec<SpoofEpisode> = Vec::new();
    for a in sorted {
        match episodes.last_mut() {
            Some(e) if e.key == a.key && e.evidence == a.evidence.name() && a.recv_time_ns - e.last_ns <= gap_ns => {
                e.last_ns = a.recv_time_ns;
                e.alerts += 1;
            }
            _ => episodes.push(SpoofEpisode {
                key: a.key,
                evidence: a.evidence.name().to_string(),
                first_ns: a.recv_time_ns,
                last_ns: a.recv_time_ns,
                alerts: 1,
                example: a.evidence.clone(),
            }),
        }
    }
    episodes.sort_by_key(|e| (e.first_ns, e.key));
    episodes
}
