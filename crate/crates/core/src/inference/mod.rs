//! Closed-form inference over observer state: outage likelihood, load model,
//! hop counts, NAT sizing and fault localization. Path, spoofing and alias
//! analyses live in the submodules.

mod alias;
mod analysis;
mod paths;
mod report;
mod spoof;

pub use alias::{alias_candidates, nat_estimates, AliasCandidateSet, AliasConfidence, NatEstimate};
pub use analysis::{analyze_trace, Analysis, AnalysisConfig, IntegrityCounts, ReportSelector};
pub use paths::{correlate_shared_fate, detect_path_events, PathChangeEvent, PathConfig, PathEventKind, SharedFateGroup};
pub use report::{Report, ReportRecord, REPORT_SCHEMA};
pub use spoof::{detect_spoof, merge_episodes, SpoofAlert, SpoofConfig, SpoofDetector, SpoofEpisode, SpoofEvidence};

use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observer::{SourceKey, SourceState};

pub const DEFAULT_OUTAGE_THRESHOLD: f64 = 0.05;
/// Largest lens mask for which silence arithmetic is supported.
pub const MAX_SILENCE_MASK: u8 = 24;
pub const DEFAULT_HOSTID_SPACE: u64 = 1 << 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("lens mask {mask} exceeds the supported maximum {max}")]
    LensTooNarrow { mask: u8, max: u8 },
    #[error("negative or non-finite silence {0}")]
    BadSilence(f64),
    #[error("no source states given")]
    EmptySet,
    #[error("sources span more than one /24: {0} and {1}")]
    MixedPrefix(Ipv4Net, Ipv4Net),
    #[error("{distinct} distinct IDs saturate an ID space of {space}")]
    Saturated { distinct: u64, space: u64 },
    #[error("probability {0} outside [0, 1]")]
    BadProbability(f64),
}

fn check_mask(m: u8) -> Result<(), InferenceError> {
    if m > MAX_SILENCE_MASK {
        return Err(InferenceError::LensTooNarrow { mask: m, max: MAX_SILENCE_MASK });
    }
    Ok(())
}

fn miss_log(m: u8) -> f64 {
    (-(2f64).powi(-i32::from(m))).ln_1p()
}

/// Probability that a live source at `rate_uhz` produced no arrival in a
/// lens of mask `m` during `silence_s` seconds: `(1 - 2^-m)^floor(rate*t)`.
pub fn silence_consistency(rate_uhz: u32, m: u8, silence_s: f64) -> Result<f64, InferenceError> {
    check_mask(m)?;
    if !(silence_s >= 0.0) || !silence_s.is_finite() {
        return Err(InferenceError::BadSilence(silence_s));
    }
    let sends = (f64::from(rate_uhz) * silence_s / 1e6).floor();
    Ok((sends * miss_log(m)).exp())
}

/// Same as [`silence_consistency`] with the silence in nanoseconds, counting
/// send opportunities in exact integer arithmetic.
pub fn silence_consistency_ns(rate_uhz: u32, m: u8, silence_ns: u64) -> Result<f64, InferenceError> {
    check_mask(m)?;
    let sends = u128::from(rate_uhz) * u128::from(silence_ns) / 1_000_000_000_000_000;
    Ok((sends as f64 * miss_log(m)).exp())
}

/// Poisson alternative `exp(-r t 2^-m)`, defined for fractional send counts.
pub fn silence_consistency_poisson(rate_uhz: u32, m: u8, silence_s: f64) -> Result<f64, InferenceError> {
    check_mask(m)?;
    if !(silence_s >= 0.0) || !silence_s.is_finite() {
        return Err(InferenceError::BadSilence(silence_s));
    }
    Ok((-(f64::from(rate_uhz) / 1e6) * silence_s * (2f64).powi(-i32::from(m))).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutageVerdict {
    Reachable,
    SuspectedOutage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutageTarget {
    Source { key: SourceKey },
    Prefix { prefix: Ipv4Net },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageAssessment {
    pub target: OutageTarget,
    pub at_ns: u64,
    /// Time since the most recent arrival from the target.
    pub silence_s: f64,
    pub p_consistent: f64,
    pub verdict: OutageVerdict,
    pub threshold: f64,
}

fn slash24(addr: Ipv4Addr) -> Ipv4Net {
    Ipv4Net::new(addr, 24).expect("24 is a valid prefix").trunc()
}

/// Joint silence consistency of all `states`, which must share one /24.
pub fn outage_assessment(
    states: &[&SourceState],
    now_ns: u64,
    m: u8,
    threshold: f64,
) -> Result<OutageAssessment, InferenceError> {
    let first = states.first().ok_or(InferenceError::EmptySet)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(InferenceError::BadProbability(threshold));
    }
    let prefix = slash24(first.key.src_addr);
    let mut p = 1.0;
    let mut latest = 0u64;
    for s in states {
        let other = slash24(s.key.src_addr);
        if other != prefix {
            return Err(InferenceError::MixedPrefix(prefix, other));
        }
        p *= silence_consistency_ns(s.rate_uhz, m, now_ns.saturating_sub(s.last_seen_ns))?;
        latest = latest.max(s.last_seen_ns);
    }
    let target = match states {
        [one] => OutageTarget::Source { key: one.key },
        _ => OutageTarget::Prefix { prefix },
    };
    Ok(OutageAssessment {
        target,
        at_ns: now_ns,
        silence_s: now_ns.saturating_sub(latest) as f64 / 1e9,
        p_consistent: p,
        verdict: if p < threshold { OutageVerdict::SuspectedOutage } else { OutageVerdict::Reachable },
        threshold,
    })
}

/// Expected heartbeats per second reaching a lens of mask `m`: `n r / 2^m`.
pub fn expected_arrival_rate(participants: f64, rate_pps: f64, m: u8) -> f64 {
    participants * rate_pps / (2f64).powi(i32::from(m))
}

/// Half-range heuristic for sends between lens hits: `2^m / 2`.
pub fn expected_interprobe_hits(m: u8) -> Result<f64, InferenceError> {
    check_mask(m)?;
    Ok((2f64).powi(i32::from(m)) / 2.0)
}

/// Median of the geometric number of sends until the first hit, about
/// `2^m ln 2`. A different statistic from [`expected_interprobe_hits`].
pub fn median_interprobe_hits(m: u8) -> Result<f64, InferenceError> {
    check_mask(m)?;
    Ok(-std::f64::consts::LN_2 / miss_log(m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "hops", rename_all = "snake_case")]
pub enum HopCount {
    Hops(u8),
    /// The TTL grew in flight; only forged or misconfigured traffic does that.
    Implausible(i16),
}

impl HopCount {
    pub fn value(self) -> i16 {
        match self {
            HopCount::Hops(h) => i16::from(h),
            HopCount::Implausible(h) => h,
        }
    }
}

pub fn hop_count(orig_ttl: u8, arrival_ttl: u8) -> HopCount {
    match orig_ttl.checked_sub(arrival_ttl) {
        Some(h) => HopCount::Hops(h),
        None => HopCount::Implausible(i16::from(orig_ttl) - i16::from(arrival_ttl)),
    }
}

/// Hosts behind one address given `distinct` HostIDs drawn from `space`:
/// inverts `E[d] = K (1 - (1 - 1/K)^n)`.
pub fn nat_estimate(distinct: u64, space: u64) -> Result<f64, InferenceError> {
    if distinct >= space {
        return Err(InferenceError::Saturated { distinct, space });
    }
    Ok(nat_estimate_real(distinct as f64, space as f64))
}

/// Real-valued form of [`nat_estimate`], for averaged distinct counts.
pub fn nat_estimate_real(distinct: f64, space: f64) -> f64 {
    if distinct <= 0.0 {
        return 0.0;
    }
    (-distinct / space).ln_1p() / (-1.0 / space).ln_1p()
}

/// What a home gateway can see.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpeView {
    pub outbound_lhb_seen: bool,
    pub outbound_ihb_seen: bool,
    /// LHBs from the provider-side subnet are still arriving.
    #[serde(default = "yes")]
    pub provider_lhb_seen: bool,
    #[serde(default)]
    pub inbound_global_p_consistent: Option<f64>,
    #[serde(default)]
    pub inbound_target_prefix_p_consistent: Option<f64>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultVerdict {
    LocalLan,
    AccessLink,
    Provider,
    RemoteNetwork,
    Healthy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultLocalization {
    pub verdict: FaultVerdict,
    pub evidence: String,
}

pub fn localize_fault(view: &CpeView, threshold: f64) -> Result<FaultLocalization, InferenceError> {
    for p in [view.inbound_global_p_consistent, view.inbound_target_prefix_p_consistent].into_iter().flatten() {
        if !(0.0..=1.0).contains(&p) {
            return Err(InferenceError::BadProbability(p));
        }
    }
    let (verdict, evidence) = if !view.outbound_lhb_seen && !view.outbound_ihb_seen {
        (FaultVerdict::LocalLan, "no outbound heartbeats from the LAN".to_string())
    } else if let Some(g) = view.inbound_global_p_consistent.filter(|g| *g < threshold) {
        if view.provider_lhb_seen {
            (FaultVerdict::AccessLink, format!("inbound heartbeats silent (p={g:.3e}), provider subnet still heard"))
        } else {
            (FaultVerdict::Provider, format!("inbound heartbeats silent (p={g:.3e}) and provider subnet silent"))
        }
    } else if let Some(t) = view.inbound_target_prefix_p_consistent.filter(|t| *t < threshold) {
        (FaultVerdict::RemoteNetwork, format!("global inbound healthy, target prefix silent (p={t:.3e})"))
    } else {
        (FaultVerdict::Healthy, "all consistency checks above threshold".to_string())
    };
    Ok(FaultLocalization { verdict, evidence })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn silence_anchors() {
        assert!((silence_consistency(1_000_000, 8, 100.0).unwrap() - 0.677).abs() < 0.005);
        assert!((silence_consistency(1_000_000, 8, 900.0).unwrap() - 0.030).abs() < 0.005);
        assert_eq!(silence_consistency(1_000_000, 8, 0.0).unwrap(), 1.0);
        assert!(silence_consistency(1_000_000, 25, 1.0).is_err());
        assert!(silence_consistency(1_000_000, 8, -1.0).is_err());
        assert_eq!(
            silence_consistency(1_000_000, 8, 900.0).unwrap(),
            silence_consistency_ns(1_000_000, 8, 900_000_000_000).unwrap()
        );
    }

    #[test]
    fn poisson_close_to_bernoulli() {
        let b = silence_consistency(1_000_000, 8, 900.0).unwrap();
        let p = silence_consistency_poisson(1_000_000, 8, 900.0).unwrap();
        assert!((b - p).abs() < 0.001);
    }

    fn state(addr: [u8; 4], last_seen_s: u64) -> SourceState {
        use crate::observer::{StateStore, StoreConfig};
        use crate::wire::{Heartbeat, HostId, ObservedHeartbeat, TransportKind};
        let mut st = StateStore::new(StoreConfig::new("44.0.0.0/8".parse().unwrap()));
        let obs = ObservedHeartbeat {
            recv_time_ns: last_seen_s * 1_000_000_000,
            src_addr: Ipv4Addr::from(addr),
            dst_addr: Ipv4Addr::new(44, 0, 0, 1),
            arrival_ttl: 50,
            transport: TransportKind::Icmp,
            body: Heartbeat::new(HostId(1), 1_000_000, 64, 0, 0),
        };
        st.ingest(&obs).unwrap();
        st.snapshot().iter().next().unwrap().clone()
    }

    #[test]
    fn outage_assessment_examples() {
        let s = 1_000_000_000u64;
        let one = state([10, 0, 0, 1], 0);
        let a = outage_assessment(&[&one], 900 * s, 8, DEFAULT_OUTAGE_THRESHOLD).unwrap();
        assert_eq!(a.verdict, OutageVerdict::SuspectedOutage);
        assert!((a.p_consistent - 0.030).abs() < 0.005);

        let two = state([10, 0, 0, 2], 0);
        let b = outage_assessment(&[&one, &two], 100 * s, 8, DEFAULT_OUTAGE_THRESHOLD).unwrap();
        let single = silence_consistency(1_000_000, 8, 100.0).unwrap();
        assert!((b.p_consistent - single * single).abs() < 1e-12);
        assert!((b.p_consistent - 0.458).abs() < 0.005);
        assert_eq!(b.verdict, OutageVerdict::Reachable);
        assert!(matches!(b.target, OutageTarget::Prefix { .. }));

        let c = outage_assessment(&[&one], s, 8, DEFAULT_OUTAGE_THRESHOLD).unwrap();
        assert!((c.p_consistent - 0.996).abs() < 0.001);
        assert_eq!(c.verdict, OutageVerdict::Reachable);

        assert_eq!(outage_assessment(&[], s, 8, 0.05), Err(InferenceError::EmptySet));
        let far = state([10, 0, 1, 1], 0);
        assert!(matches!(outage_assessment(&[&one, &far], s, 8, 0.05), Err(InferenceError::MixedPrefix(..))));
    }

    #[test]
    fn arrival_rate_anchors() {
        let n = (1u64 << 30) as f64;
        assert_eq!(expected_arrival_rate(n, 0.125, 32), 0.03125);
        assert_eq!(expected_arrival_rate(n, 0.125, 8), 524_288.0);
        assert_eq!(expected_arrival_rate(0.0, 1.0, 8), 0.0);
    }

    #[test]
    fn interprobe() {
        assert_eq!(expected_interprobe_hits(8).unwrap(), 128.0);
        assert_eq!(expected_interprobe_hits(9).unwrap(), 256.0);
        let median = median_interprobe_hits(8).unwrap();
        assert!((median - 256.0 * std::f64::consts::LN_2).abs() < 0.5);
    }

    #[test]
    fn interprobe_monte_carlo_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut draws: Vec<u32> = (0..1_000_000)
            .map(|_| {
                let mut k = 1;
                while rng.gen_range(0..256u32) != 0 {
                    k += 1;
                }
                k
            })
            .collect();
        draws.sort_unstable();
        let median = f64::from(draws[draws.len() / 2]);
        assert!((median - median_interprobe_hits(8).unwrap()).abs() <= 2.0, "{median}");
        assert!((median - 128.0).abs() > 40.0);
    }

    #[test]
    fn hop_counts() {
        assert_eq!(hop_count(64, 57), HopCount::Hops(7));
        assert_eq!(hop_count(64, 64), HopCount::Hops(0));
        assert_eq!(hop_count(64, 70), HopCount::Implausible(-6));
    }

    #[test]
    fn nat_examples() {
        assert_eq!(nat_estimate(0, 1 << 16).unwrap(), 0.0);
        assert!((nat_estimate(8, 16).unwrap() - 10.74).abs() < 0.01);
        assert!((nat_estimate(5, 1 << 16).unwrap() - 5.0).abs() < 0.001);
        assert!(matches!(nat_estimate(16, 16), Err(InferenceError::Saturated { .. })));
    }

    #[test]
    fn fault_table() {
        let v = |lhb, ihb, prov, g, t| CpeView {
            outbound_lhb_seen: lhb,
            outbound_ihb_seen: ihb,
            provider_lhb_seen: prov,
            inbound_global_p_consistent: g,
            inbound_target_prefix_p_consistent: t,
        };
        let verdict = |view| localize_fault(&view, 0.05).unwrap().verdict;
        assert_eq!(verdict(v(false, false, true, None, None)), FaultVerdict::LocalLan);
        assert_eq!(verdict(v(true, true, false, Some(0.01), None)), FaultVerdict::Provider);
        assert_eq!(verdict(v(true, true, true, Some(0.01), None)), FaultVerdict::AccessLink);
        assert_eq!(verdict(v(true, true, true, Some(0.9), Some(0.01))), FaultVerdict::RemoteNetwork);
        assert_eq!(verdict(v(true, false, true, Some(0.9), Some(0.5))), FaultVerdict::Healthy);
        assert!(localize_fault(&v(true, true, true, Some(1.5), None), 0.05).is_err());
    }

    proptest! {
        #[test]
        fn silence_monotone(rate in 1u32..10_000_000, m in 0u8..=24, t in 0.0f64..1e5, dt in 0.0f64..1e4) {
            let a = silence_consistency(rate, m, t).unwrap();
            let b = silence_consistency(rate, m, t + dt).unwrap();
            let c = silence_consistency(rate.saturating_mul(2), m, t).unwrap();
            prop_assert!(b <= a);
            prop_assert!(c <= a);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn k_identical_hosts_multiply(k in 1usize..6, silence in 0u64..2000) {
            let states: Vec<SourceState> = (0..k).map(|i| state([10, 0, 0, i as u8 + 1], 0)).collect();
            let refs: Vec<&SourceState> = states.iter().collect();
            let a = outage_assessment(&refs, silence * 1_000_000_000, 8, 0.05).unwrap();
            let single = silence_consistency(1_000_000, 8, silence as f64).unwrap();
            prop_assert!((a.p_consistent - single.powi(k as i32)).abs() < 1e-12);
        }

        #[test]
        fn arrival_rate_linear(n in 0.0f64..1e9, r in 0.0f64..100.0, m in 0u8..32) {
            let a = expected_arrival_rate(n, r, m);
            prop_assert_eq!(expected_arrival_rate(n, r, m + 1), a / 2.0);
            prop_assert!((expected_arrival_rate(2.0 * n, r, m) - 2.0 * a).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn hop_roundtrip(orig in 1u8..=255, h in 0u8..=255) {
            prop_assume!(h <= orig);
            prop_assert_eq!(hop_count(orig, orig - h), HopCount::Hops(h));
        }

        #[test]
        fn nat_estimate_at_least_distinct(d in 0u64..60_000) {
            prop_assert!(nat_estimate(d, 1 << 16).unwrap() >= d as f64);
        }
    }

    #[test]
    fn silence_tends_to_zero() {
        assert!(silence_consistency(1_000_000, 8, 1e6).unwrap() < 1e-300);
    }
}
