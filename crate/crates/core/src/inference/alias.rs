//! Interface aliasing from shared HostIDs, and host counts behind NATs from
//! distinct HostIDs per address.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::{nat_estimate_real, DEFAULT_HOSTID_SPACE};
use crate::observer::{Snapshot, SourceState};
use crate::wire::HostId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AliasConfidence {
    /// Seen together under one HostID only.
    Low,
    /// Seen together under two HostIDs, so they rotated together once.
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasCandidateSet {
    /// Most recent HostID shared by the members.
    pub host_id: HostId,
    /// Every HostID under which exactly these members co-occurred.
    pub host_ids: Vec<HostId>,
    pub members: Vec<Ipv4Addr>,
    pub confidence: AliasConfidence,
}

fn active(s: &SourceState, start_ns: u64, end_ns: u64) -> bool {
    s.first_seen_ns < end_ns && s.last_seen_ns >= start_ns
}

/// Sets of two or more addresses that shared a HostID during
/// `[start_ns, end_ns)`, ranked by how many HostIDs they have shared overall.
pub fn alias_candidates(snapshot: &Snapshot, start_ns: u64, end_ns: u64) -> Vec<AliasCandidateSet> {
    let mut all: BTreeMap<HostId, BTreeSet<Ipv4Addr>> = BTreeMap::new();
    let mut in_window: BTreeMap<HostId, (BTreeSet<Ipv4Addr>, u64)> = BTreeMap::new();
    for s in snapshot.iter() {
        all.entry(s.key.host_id).or_default().insert(s.key.src_addr);
        if active(s, start_ns, end_ns) {
            let entry = in_window.entry(s.key.host_id).or_default();
            entry.0.insert(s.key.src_addr);
            entry.1 = entry.1.max(s.last_seen_ns);
        }
    }
    let mut by_members: BTreeMap<Vec<Ipv4Addr>, (HostId, u64)> = BTreeMap::new();
    for (host_id, (members, last)) in in_window {
        if members.len() < 2 {
            continue;
        }
        let members: Vec<Ipv4Addr> = members.into_iter().collect();
        let slot = by_members.entry(members).or_insert((host_id, last));
        if last > slot.1 {
            *slot = (host_id, last);
        }
    }
    by_members
        .into_iter()
        .map(|(members, (host_id, _))| {
            let host_ids: Vec<HostId> = all
                .iter()
                .filter(|(_, addrs)| members.iter().all(|m| addrs.contains(m)))
                .map(|(h, _)| *h)
                .collect();
            let confidence = match host_ids.len() {
                0 | 1 => AliasConfidence::Low,
                2 => AliasConfidence::Medium,
                _ => AliasConfidence::High,
            };
            AliasCandidateSet { host_id, host_ids, members, confidence }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NatEstimate {
    pub src_addr: Ipv4Addr,
    pub distinct_hostids: u64,
    pub estimate: f64,
    pub window_start_ns: u64,
    pub window_end_ns: u64,
}

/// One estimate per address that carried two or more HostIDs in the window.
pub fn nat_estimates(snapshot: &Snapshot, start_ns: u64, end_ns: u64) -> Vec<NatEstimate> {
    let mut ids: BTreeMap<Ipv4Addr, BTreeSet<HostId>> = BTreeMap::new();
    for s in snapshot.iter().filter(|s| active(s, start_ns, end_ns)) {
        ids.entry(s.key.src_addr).or_default().insert(s.key.host_id);
    }
    ids.into_iter()
        .filter(|(_, set)| set.len() >= 2)
        .map(|(src_addr, set)| {
            let d = set.len() as u64;
            NatEstimate {
                src_addr,
                distinct_hostids: d,
                estimate: nat_estimate_real(d as f64, DEFAULT_HOSTID_SPACE as f64),
                window_start_ns: start_ns,
                window_end_ns: end_ns,
            }
        })
        .collect()
}
