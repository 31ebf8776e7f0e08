//! Scores an [`Analysis`] of a simulated trace against its ground truth.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{trace_digest, GroundTruth, TruthRecord};
use crate::inference::{Analysis, OutageTarget, OutageVerdict, PathEventKind};
use crate::wire::ObservedHeartbeat;

const NS: u64 = 1_000_000_000;
/// Spoof episodes may trail their spoofer by this much, since victims'
/// honest heartbeats keep conflicting with the forged ones for a while.
pub const SPOOF_SLACK_NS: u64 = 3600 * NS;
/// Route changes must be detected within this many observation windows.
pub const PATH_WINDOWS: u64 = 2;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("truth log has no run record")]
    MissingRun,
    #[error("trace does not belong to run {run_id}: {reason}")]
    Mismatch { run_id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageMetric {
    pub index: usize,
    pub start_ns: u64,
    pub end_ns: u64,
    pub detected: bool,
    pub latency_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpoofMetrics {
    pub spoofers: u64,
    pub detected_spoofers: u64,
    pub episodes: u64,
    pub true_episodes: u64,
    /// None when nothing was flagged.
    pub precision: Option<f64>,
    /// None without scripted spoofers.
    pub recall: Option<f64>,
    pub episodes_by_evidence: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasMetrics {
    pub truth_sets: u64,
    pub candidates: u64,
    pub matched_candidates: u64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathMetrics {
    pub truth_changes: u64,
    pub matched_changes: u64,
    pub spurious_changes: u64,
    pub accuracy: Option<f64>,
    pub load_balanced_truth: u64,
    pub load_balanced_detected: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub run_id: String,
    pub outages: Vec<OutageMetric>,
    pub detection_rate: Option<f64>,
    pub median_latency_s: Option<f64>,
    /// Assessments whose silence interval overlaps no scripted outage.
    pub healthy_assessments: u64,
    pub false_positives: u64,
    pub false_positive_rate: Option<f64>,
    pub spoof: SpoofMetrics,
    pub alias: AliasMetrics,
    pub paths: PathMetrics,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

fn covers(target: &OutageTarget, addr: &Ipv4Addr) -> bool {
    match target {
        OutageTarget::Source { key } => key.src_addr == *addr,
        OutageTarget::Prefix { prefix } => prefix.contains(addr),
    }
}

pub fn evaluate(trace: &[ObservedHeartbeat], truth: &GroundTruth, analysis: &Analysis) -> Result<Metrics, EvaluateError> {
    let (run_id, digest, arrivals) = truth.run_header().ok_or(EvaluateError::MissingRun)?;
    let mismatch = |reason: String| EvaluateError::Mismatch { run_id: run_id.to_string(), reason };
    if trace.len() as u64 != arrivals {
        return Err(mismatch(format!("{} arrivals, truth has {arrivals}", trace.len())));
    }
    if trace_digest(trace) != digest {
        return Err(mismatch("trace digest differs".into()));
    }
    let c = analysis.snapshot.counters;
    if c.ingested + c.out_of_lens != arrivals {
        return Err(mismatch(format!("analysis saw {} arrivals", c.ingested + c.out_of_lens)));
    }

    let outages: Vec<(usize, u64, u64, &Vec<Ipv4Addr>)> = truth
        .records
        .iter()
        .filter_map(|r| match r {
            TruthRecord::Outage { index, start_ns, end_ns, addresses, .. } => Some((*index, *start_ns, *end_ns, addresses)),
            _ => None,
        })
        .collect();

    let outage_metrics: Vec<OutageMetric> = outages
        .iter()
        .filter(|o| !o.3.is_empty())
        .map(|&(index, start_ns, end_ns, addrs)| {
            let flag = analysis
                .outages
                .iter()
                .filter(|a| a.verdict == OutageVerdict::SuspectedOutage)
                .filter(|a| a.at_ns >= start_ns && a.at_ns <= end_ns)
                .find(|a| addrs.iter().any(|x| covers(&a.target, x)));
            OutageMetric {
                index,
                start_ns,
                end_ns,
                detected: flag.is_some(),
                latency_s: flag.map(|a| (a.at_ns - start_ns) as f64 / NS as f64),
            }
        })
        .collect();
    let detected = outage_metrics.iter().filter(|o| o.detected).count() as u64;
    let mut latencies: Vec<f64> = outage_metrics.iter().filter_map(|o| o.latency_s).collect();

    let mut healthy = 0;
    let mut false_positives = 0;
    for a in &analysis.outages {
        let last_seen = a.at_ns.saturating_sub((a.silence_s * NS as f64).round() as u64);
        let disturbed = outages.iter().any(|&(_, s, e, addrs)| {
            addrs.iter().any(|x| covers(&a.target, x)) && last_seen < e && a.at_ns >= s
        });
        if !disturbed {
            healthy += 1;
            if a.verdict == OutageVerdict::SuspectedOutage {
                false_positives += 1;
            }
        }
    }

    Ok(Metrics {
        run_id: run_id.to_string(),
        detection_rate: ratio(detected, outage_metrics.len() as u64),
        median_latency_s: median(&mut latencies),
        outages: outage_metrics,
        healthy_assessments: healthy,
        false_positives,
        false_positive_rate: ratio(false_positives, healthy),
        spoof: spoof_metrics(truth, analysis),
        alias: alias_metrics(truth, analysis),
        paths: path_metrics(truth, analysis),
    })
}

fn spoof_metrics(truth: &GroundTruth, analysis: &Analysis) -> SpoofMetrics {
    let spoofers: Vec<(Ipv4Addr, u64, u64)> = truth
        .records
        .iter()
        .filter_map(|r| match r {
            TruthRecord::Spoofer { forged_src, start_ns, end_ns, .. } => Some((*forged_src, *start_ns, *end_ns)),
            _ => None,
        })
        .collect();
    let matches = |src: Ipv4Addr, first: u64, last: u64, (addr, s, e): (Ipv4Addr, u64, u64)| {
        addr == src && first <= e.saturating_add(SPOOF_SLACK_NS) && last >= s
    };
    let mut by_evidence = BTreeMap::new();
    let mut true_episodes = 0;
    for ep in &analysis.spoof_episodes {
        *by_evidence.entry(ep.evidence.clone()).or_insert(0) += 1;
        if spoofers.iter().any(|s| matches(ep.key.src_addr, ep.first_ns, ep.last_ns, *s)) {
            true_episodes += 1;
        }
    }
    let detected = spoofers
        .iter()
        .filter(|s| analysis.spoof_episodes.iter().any(|ep| matches(ep.key.src_addr, ep.first_ns, ep.last_ns, **s)))
        .count() as u64;
    let episodes = analysis.spoof_episodes.len() as u64;
    SpoofMetrics {
        spoofers: spoofers.len() as u64,
        detected_spoofers: detected,
        episodes,
        true_episodes,
        precision: ratio(true_episodes, episodes),
        recall: ratio(detected, spoofers.len() as u64),
        episodes_by_evidence: by_evidence,
    }
}

fn alias_metrics(truth: &GroundTruth, analysis: &Analysis) -> AliasMetrics {
    let sets = truth.multi_interface_hosts();
    let matched = analysis.aliases.iter().filter(|c| sets.contains(&c.members)).count() as u64;
    let found = sets.iter().filter(|s| analysis.aliases.iter().any(|c| c.members == **s)).count() as u64;
    AliasMetrics {
        truth_sets: sets.len() as u64,
        candidates: analysis.aliases.len() as u64,
        matched_candidates: matched,
        precision: ratio(matched, analysis.aliases.len() as u64),
        recall: ratio(found, sets.len() as u64),
    }
}

fn path_metrics(truth: &GroundTruth, analysis: &Analysis) -> PathMetrics {
    let tolerance = PATH_WINDOWS * analysis.snapshot.config.window_ns();
    let changes: Vec<(Ipv4Addr, u64, i16, i16)> = truth
        .records
        .iter()
        .filter_map(|r| match r {
            TruthRecord::PathChange { addr, at_ns, before, after } => Some((*addr, *at_ns, *before, *after)),
            _ => None,
        })
        .collect();
    let detected: Vec<_> = analysis.path_events.iter().filter(|e| e.kind == PathEventKind::RouteChange).collect();
    let hit = |e: &crate::inference::PathChangeEvent, &(addr, at, before, after): &(Ipv4Addr, u64, i16, i16)| {
        e.key.is_some_and(|k| k.src_addr == addr)
            && e.before == [before]
            && e.after == [after]
            && e.onset_ns.abs_diff(at) <= tolerance
    };
    let matched = changes.iter().filter(|c| detected.iter().any(|e| hit(e, c))).count() as u64;
    let spurious = detected.iter().filter(|e| !changes.iter().any(|c| hit(e, c))).count() as u64;

    let mut balanced: BTreeMap<Ipv4Addr, (u8, u8)> = BTreeMap::new();
    for r in &truth.records {
        if let TruthRecord::LoadBalance { addresses, hop_a, hop_b, .. } = r {
            for a in addresses {
                balanced.insert(*a, (*hop_a, *hop_b));
            }
        }
    }
    let lb_found = balanced
        .iter()
        .filter(|(addr, (a, b))| {
            analysis.path_events.iter().any(|e| {
                e.kind == PathEventKind::LoadBalanced
                    && e.key.is_some_and(|k| k.src_addr == **addr)
                    && e.after.contains(&i16::from(*a))
                    && e.after.contains(&i16::from(*b))
            })
        })
        .count() as u64;

    PathMetrics {
        truth_changes: changes.len() as u64,
        matched_changes: matched,
        spurious_changes: spurious,
        accuracy: ratio(matched, changes.len() as u64),
        load_balanced_truth: balanced.len() as u64,
        load_balanced_detected: lb_found,
    }
}
