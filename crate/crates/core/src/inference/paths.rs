//! Route changes and load balancing from per-window hop-count histograms,
//! and grouping of simultaneous route changes into shared-fate groups.

use serde::{Deserialize, Serialize};

use crate::observer::{HopWindow, SourceKey, SourceState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    /// Windows with fewer arrivals are ignored.
    #[serde(default = "default_min_samples")]
    pub min_samples: u64,
    /// Share of a window a hop value needs to count as one of its modes.
    #[serde(default = "default_major")]
    pub major_fraction: f64,
    /// A hop signature must hold this many consecutive windows to be stable.
    #[serde(default = "default_persist")]
    pub persist_windows: usize,
    #[serde(default = "default_lb_windows")]
    pub load_balance_windows: usize,
}

fn default_min_samples() -> u64 {
    10
}
fn default_major() -> f64 {
    0.25
}
fn default_persist() -> usize {
    2
}
fn default_lb_windows() -> usize {
    3
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            min_samples: default_min_samples(),
            major_fraction: default_major(),
            persist_windows: default_persist(),
            load_balance_windows: default_lb_windows(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathEventKind {
    RouteChange,
    LoadBalanced,
    SharedFateGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathChangeEvent {
    pub kind: PathEventKind,
    pub key: Option<SourceKey>,
    pub window_start_ns: u64,
    pub window_end_ns: u64,
    /// First arrival on the new path (route changes) or window start.
    pub onset_ns: u64,
    /// Modal hop count before a route change.
    pub before: Vec<i16>,
    /// Modal hop count after a route change, or the balanced hop values.
    pub after: Vec<i16>,
    pub members: Vec<SourceKey>,
}

impl PathChangeEvent {
    fn delta(&self) -> Option<i16> {
        match (self.before.as_slice(), self.after.as_slice()) {
            ([b], [a]) => Some(a - b),
            _ => None,
        }
    }
}

struct Run<'a> {
    signature: Vec<i16>,
    windows: Vec<&'a HopWindow>,
}

fn signature(w: &HopWindow, major: f64) -> Vec<i16> {
    let total = w.total() as f64;
    w.bins.iter().filter(|b| b.count as f64 >= major * total).map(|b| b.hops).collect()
}

/// Route changes and load balancing seen in one source's windows.
pub fn detect_path_events(state: &SourceState, window_ns: u64, config: &PathConfig) -> Vec<PathChangeEvent> {
    let mut runs: Vec<Run<'_>> = Vec::new();
    for w in state.windows.iter().filter(|w| w.total() >= config.min_samples) {
        let sig = signature(w, config.major_fraction);
        match runs.last_mut() {
            Some(run) if run.signature == sig => run.windows.push(w),
            _ => runs.push(Run { signature: sig, windows: vec![w] }),
        }
    }
    let span = |run: &Run<'_>| {
        let first = run.windows.first().expect("runs are nonempty").index;
        let last = run.windows.last().expect("runs are nonempty").index;
        (first * window_ns, (last + 1) * window_ns)
    };

    let mut events = Vec::new();
    let stable: Vec<&Run<'_>> = runs.iter().filter(|r| r.windows.len() >= config.persist_windows).collect();
    for run in &stable {
        if run.signature.len() >= 2 && run.windows.len() >= config.load_balance_windows {
            let (start, end) = span(run);
            events.push(PathChangeEvent {
                kind: PathEventKind::LoadBalanced,
                key: Some(state.key),
                window_start_ns: start,
                window_end_ns: end,
                onset_ns: start,
                before: Vec::new(),
                after: run.signature.clone(),
                members: Vec::new(),
            });
        }
    }
    for pair in stable.windows(2) {
        let (prev, next) = (pair[0], pair[1]);
        let ([before], [after]) = (prev.signature.as_slice(), next.signature.as_slice()) else { continue };
        if before == after {
            continue;
        }
        let search_from = prev.windows.last().expect("runs are nonempty").index;
        let onset = state
            .windows
            .iter()
            .filter(|w| w.index >= search_from)
            .flat_map(|w| w.bins.iter())
            .filter(|b| b.hops == *after)
            .map(|b| b.first_ns)
            .min()
            .unwrap_or(span(next).0);
        let (_, prev_end) = span(prev);
        let (next_start, _) = span(next);
        events.push(PathChangeEvent {
            kind: PathEventKind::RouteChange,
            key: Some(state.key),
            window_start_ns: prev_end - window_ns,
            window_end_ns: next_start + window_ns,
            onset_ns: onset,
            before: vec![*before],
            after: vec![*after],
            members: Vec::new(),
        });
    }
    events.sort_by_key(|e| (e.onset_ns, e.kind as u8));
    events
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedFateGroup {
    pub members: Vec<SourceKey>,
    pub first_onset_ns: u64,
    pub last_onset_ns: u64,
    /// +1 when paths grew, -1 when they shrank.
    pub delta_sign: i8,
}

impl SharedFateGroup {
    pub fn to_event(&self) -> PathChangeEvent {
        PathChangeEvent {
            kind: PathEventKind::SharedFateGroup,
            key: None,
            window_start_ns: self.first_onset_ns,
            window_end_ns: self.last_onset_ns,
            onset_ns: self.first_onset_ns,
            before: Vec::new(),
            after: Vec::new(),
            members: self.members.clone(),
        }
    }
}

/// Groups route changes whose onsets all lie within `tau_ns` of each other
/// and whose hop deltas share a sign. Groups need at least two sources.
pub fn correlate_shared_fate(events: &[PathChangeEvent], tau_ns: u64) -> Vec<SharedFateGroup> {
    let mut groups = Vec::new();
    for sign in [-1i8, 1] {
        let mut changes: Vec<(u64, SourceKey)> = events
            .iter()
            .filter(|e| e.kind == PathEventKind::RouteChange)
            .filter_map(|e| Some((e.onset_ns, e.key?, e.delta()?)))
            .filter(|(_, _, d)| d.signum() == i16::from(sign))
            .map(|(t, k, _)| (t, k))
            .collect();
        changes.sort();
        let mut i = 0;
        while i < changes.len() {
            let start = changes[i].0;
            let mut j = i;
            while j < changes.len() && changes[j].0 - start <= tau_ns {
                j += 1;
            }
            let mut members: Vec<SourceKey> = changes[i..j].iter().map(|(_, k)| *k).collect();
            members.sort();
            members.dedup();
            if members.len() >= 2 {
                groups.push(SharedFateGroup {
                    members,
                    first_onset_ns: start,
                    last_onset_ns: changes[j - 1].0,
                    delta_sign: sign,
                });
            }
            i = j;
        }
    }
    groups.sort_by_key(|g| g.first_onset_ns);
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observer::{StateStore, StoreConfig};
    use crate::wire::{Heartbeat, HostId, ObservedHeartbeat, TransportKind};
    use std::net::Ipv4Addr;

    const S: u64 = 1_000_000_000;
    const W: u64 = 600 * S;

    fn state_with(hops_at: impl Fn(u64, u64) -> u8, secs: u64, every: u64) -> SourceState {
        let mut st = StateStore::new(StoreConfig::new("44.0.0.0/8".parse().unwrap()));
        let mut seq = 0;
        for t in (0..secs).step_by(every as usize) {
            let hops = hops_at(t, seq as u64);
            st.ingest(&ObservedHeartbeat {
                recv_time_ns: t * S,
                src_addr: Ipv4Addr::new(10, 0, 0, 1),
                dst_addr: Ipv4Addr::new(44, 0, 0, 1),
                arrival_ttl: 64 - hops,
                transport: TransportKind::Icmp,
                body: Heartbeat::new(HostId(1), 1_000_000, 64, t * S, seq),
            })
            .unwrap();
            seq += 1;
        }
        st.snapshot().iter().next().unwrap().clone()
    }

    #[test]
    fn constant_path_has_no_events() {
        let s = state_with(|_, _| 10, 6000, 5);
        assert!(detect_path_events(&s, W, &PathConfig::default()).is_empty());
    }

    #[test]
    fn route_change_mid_window() {
        let s = state_with(|t, _| if t < 3300 { 10 } else { 12 }, 9000, 5);
        let ev = detect_path_events(&s, W, &PathConfig::default());
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, PathEventKind::RouteChange);
        assert_eq!((ev[0].before.clone(), ev[0].after.clone()), (vec![10], vec![12]));
        assert_eq!(ev[0].onset_ns, 3300 * S);
    }

    #[test]
    fn alternating_paths_are_load_balanced() {
        let s = state_with(|_, seq| if seq % 2 == 0 { 10 } else { 11 }, 6000, 5);
        let ev = detect_path_events(&s, W, &PathConfig::default());
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].kind, PathEventKind::LoadBalanced);
        assert_eq!(ev[0].after, vec![10, 11]);
    }

    #[test]
    fn sparse_windows_yield_nothing() {
        let s = state_with(|t, _| if t < 3000 { 10 } else { 12 }, 9000, 100);
        assert!(detect_path_events(&s, W, &PathConfig::default()).is_empty());
    }

    fn change(host: u16, onset_s: u64, before: i16, after: i16) -> PathChangeEvent {
        PathChangeEvent {
            kind: PathEventKind::RouteChange,
            key: Some(SourceKey { src_addr: Ipv4Addr::new(10, 0, 0, host as u8), host_id: HostId(host) }),
            window_start_ns: 0,
            window_end_ns: 0,
            onset_ns: onset_s * S,
            before: vec![before],
            after: vec![after],
            members: Vec::new(),
        }
    }

    #[test]
    fn shared_fate_grouping() {
        let events = vec![change(1, 3000, 10, 12), change(2, 3010, 10, 12), change(3, 3030, 8, 9), change(4, 6600, 10, 12)];
        let groups = correlate_shared_fate(&events, 60 * S);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].members.len(), 3);
        assert_eq!(groups[0].delta_sign, 1);
        assert!(correlate_shared_fate(&[], 60 * S).is_empty());
        let opposite = vec![change(1, 3000, 10, 12), change(2, 3010, 12, 10)];
        assert!(correlate_shared_fate(&opposite, 60 * S).is_empty());
    }
}
