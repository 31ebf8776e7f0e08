//! Destination pools and orderings, plus the closed-form coverage arithmetic
//! that follows from them.

mod permutation;

pub use permutation::permutation_at;
pub(crate) use permutation::mix64;

use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{OrderKind, PoolDescriptor, PoolKind, MAX_POOL_EPOCH};

pub const LHB_TTL_MIN: u8 = 1;
pub const LHB_TTL_MAX: u8 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("local pool prefix length {0} outside [8, 30]")]
    PrefixLength(u8),
    #[error("pool size {0} is not a power of two")]
    NotPowerOfTwo(u64),
    #[error("index {index} outside pool of size {size}")]
    IndexOutOfRange { index: u64, size: u64 },
    #[error("source and destination are the same address")]
    SameAddress,
    #[error("lens mask {mask} exceeds {max} for this pool")]
    LensTooNarrow { mask: u8, max: u8 },
    #[error("hit probability is undefined for local pools")]
    LocalPool,
    #[error("at least one cooperating sender is required")]
    NoSenders,
}

/// Where destinations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PoolSpec {
    /// All 2^32 IPv4 addresses.
    FullV4,
    /// All 2^24 /24 blocks; the low octet is drawn independently at random.
    Per24,
    /// The sender's own subnet, used for local heartbeats.
    Local { subnet: Ipv4Net },
}

impl PoolSpec {
    pub fn size(&self) -> u64 {
        match self {
            PoolSpec::FullV4 => 1 << 32,
            PoolSpec::Per24 => 1 << 24,
            PoolSpec::Local { subnet } => 1 << (32 - subnet.prefix_len()),
        }
    }

    pub fn kind(&self) -> PoolKind {
        match self {
            PoolSpec::FullV4 => PoolKind::FullV4,
            PoolSpec::Per24 => PoolKind::Per24,
            PoolSpec::Local { .. } => PoolKind::Local,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if let PoolSpec::Local { subnet } = self {
            let len = subnet.prefix_len();
            if !(8..=30).contains(&len) {
                return Err(ScheduleError::PrefixLength(len));
            }
        }
        Ok(())
    }
}

/// In which order the pool is walked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OrderSpec {
    PureRandom {
        seed: u64,
    },
    /// Keyed full-cycle shuffle. Without `rekey_each_epoch` every epoch repeats
    /// the same sequence.
    Permutation {
        key: u64,
        #[serde(default)]
        epoch: u32,
        #[serde(default)]
        cursor: u64,
        #[serde(default)]
        rekey_each_epoch: bool,
    },
}

impl OrderSpec {
    pub fn kind(&self) -> OrderKind {
        match self {
            OrderSpec::PureRandom { .. } => OrderKind::Random,
            OrderSpec::Permutation { .. } => OrderKind::Permutation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub pool: PoolSpec,
    pub order: OrderSpec,
}

/// Key actually driving the permutation in `epoch`.
pub fn epoch_key(key: u64, epoch: u32, rekey_each_epoch: bool) -> u64 {
    if rekey_each_epoch {
        mix64(key ^ mix64(u64::from(epoch).wrapping_add(0x5eed)))
    } else {
        key
    }
}

/// A pool plus ordering state, advanced one destination at a time.
#[derive(Debug, Clone)]
pub struct Schedule {
    spec: ScheduleSpec,
    rng: ChaCha8Rng,
}

impl Schedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self, ScheduleError> {
        spec.pool.validate()?;
        let rng_seed = match spec.order {
            OrderSpec::PureRandom { seed } => seed,
            OrderSpec::Permutation { key, cursor, .. } => {
                let size = spec.pool.size();
                if cursor >= size {
                    return Err(ScheduleError::IndexOutOfRange { index: cursor, size });
                }
                mix64(key ^ 0x0c7e_7a1e_5eed_0001)
            }
        };
        Ok(Schedule { spec, rng: ChaCha8Rng::seed_from_u64(rng_seed) })
    }

    /// Current state, including the permutation cursor and epoch.
    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn descriptor(&self) -> PoolDescriptor {
        let epoch = match self.spec.order {
            OrderSpec::Permutation { epoch, .. } => epoch & MAX_POOL_EPOCH,
            OrderSpec::PureRandom { .. } => 0,
        };
        PoolDescriptor { pool: self.spec.pool.kind(), order: self.spec.order.kind(), epoch }
    }

    pub fn is_local(&self) -> bool {
        matches!(self.spec.pool, PoolSpec::Local { .. })
    }

    pub fn next_destination(&mut self) -> Ipv4Addr {
        let size = self.spec.pool.size();
        let element = match &mut self.spec.order {
            OrderSpec::PureRandom { .. } => self.rng.gen_range(0..size),
            OrderSpec::Permutation { key, epoch, cursor, rekey_each_epoch } => {
                let k = epoch_key(*key, *epoch, *rekey_each_epoch);
                let v = permutation_at(k, size, *cursor).expect("cursor kept in range");
                *cursor += 1;
                if *cursor == size {
                    *cursor = 0;
                    *epoch = epoch.wrapping_add(1);
                }
                v
            }
        };
        let addr = match self.spec.pool {
            PoolSpec::FullV4 => element as u32,
            PoolSpec::Per24 => ((element as u32) << 8) | u32::from(self.rng.gen::<u8>()),
            PoolSpec::Local { subnet } => u32::from(subnet.network()) | element as u32,
        };
        Ipv4Addr::from(addr)
    }
}

pub fn common_prefix_len(a: Ipv4Addr, b: Ipv4Addr) -> u32 {
    (u32::from(a) ^ u32::from(b)).leading_zeros()
}

/// TTL for a local heartbeat: fewer shared leading bits, more hops allowed.
pub fn lhb_ttl(src: Ipv4Addr, dst: Ipv4Addr) -> Result<u8, ScheduleError> {
    if src == dst {
        return Err(ScheduleError::SameAddress);
    }
    let ttl = 32 - common_prefix_len(src, dst) as i64;
    Ok(ttl.clamp(i64::from(LHB_TTL_MIN), i64::from(LHB_TTL_MAX)) as u8)
}

/// Probability that one heartbeat lands inside a lens of mask `m`.
pub fn hit_probability(pool: &PoolSpec, m: u8) -> Result<f64, ScheduleError> {
    let max = match pool {
        PoolSpec::FullV4 => 32,
        PoolSpec::Per24 => 24,
        PoolSpec::Local { .. } => return Err(ScheduleError::LocalPool),
    };
    if m > max {
        return Err(ScheduleError::LensTooNarrow { mask: m, max });
    }
    Ok(0.5f64.powi(i32::from(m)))
}

/// `H(n) = 1 + 1/2 + ... + 1/n`.
pub fn harmonic(n: u64) -> f64 {
    const EXACT_LIMIT: u64 = 1 << 20;
    if n <= EXACT_LIMIT {
        (1..=n).rev().map(|k| 1.0 / k as f64).sum()
    } else {
        let x = n as f64;
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        x.ln() + EULER_GAMMA + 1.0 / (2.0 * x) - 1.0 / (12.0 * x * x)
    }
}

/// Expected messages per sender until `senders` cooperating hosts cover the pool.
///
/// A permutation splits the pool exactly; pure random draws pay the
/// coupon-collector factor `H(pool_size)`.
pub fn coverage_estimate(pool_size: u64, senders: u64, order: OrderKind) -> Result<f64, ScheduleError> {
    if senders == 0 {
        return Err(ScheduleError::NoSenders);
    }
    let n = pool_size as f64;
    Ok(match order {
        OrderKind::Permutation => n / senders as f64,
        OrderKind::Random => n * harmonic(pool_size) / senders as f64,
    })
}

/// Messages needed for every participant to reach every pool element once.
pub fn all_pairs_total(participants: u64, pool_size: u64) -> u128 {
    u128::from(participants) * u128::from(pool_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn local(net: &str, key: u64) -> ScheduleSpec {
        ScheduleSpec {
            pool: PoolSpec::Local { subnet: net.parse().unwrap() },
            order: OrderSpec::Permutation { key, epoch: 0, cursor: 0, rekey_each_epoch: false },
        }
    }

    #[test]
    fn local_permutation_visits_every_address_once() {
        let mut s = Schedule::new(local("192.168.0.0/24", 77)).unwrap();
        let mut seen: Vec<Ipv4Addr> = (0..256).map(|_| s.next_destination()).collect();
        seen.sort();
        let expected: Vec<Ipv4Addr> = (0..256u32).map(|i| Ipv4Addr::from(0xc0a8_0000 | i)).collect();
        assert_eq!(seen, expected);
        match s.spec().order {
            OrderSpec::Permutation { epoch, cursor, .. } => assert_eq!((epoch, cursor), (1, 0)),
            _ => unreachable!(),
        }
    }

    #[test]
    fn epochs_repeat_unless_rekeyed() {
        let mut s = Schedule::new(local("10.0.0.0/28", 5)).unwrap();
        let first: Vec<_> = (0..16).map(|_| s.next_destination()).collect();
        let second: Vec<_> = (0..16).map(|_| s.next_destination()).collect();
        assert_eq!(first, second);
        let mut spec = local("10.0.0.0/28", 5);
        if let OrderSpec::Permutation { rekey_each_epoch, .. } = &mut spec.order {
            *rekey_each_epoch = true;
        }
        let mut s = Schedule::new(spec).unwrap();
        let first: Vec<_> = (0..16).map(|_| s.next_destination()).collect();
        let second: Vec<_> = (0..16).map(|_| s.next_destination()).collect();
        assert_ne!(first, second);
        assert_eq!(s.descriptor().epoch, 2);
    }

    #[test]
    fn per24_matches_stateless_accessor() {
        let key = 0xfeed;
        let spec = ScheduleSpec {
            pool: PoolSpec::Per24,
            order: OrderSpec::Permutation { key, epoch: 0, cursor: 0, rekey_each_epoch: false },
        };
        let mut s = Schedule::new(spec).unwrap();
        for cursor in 0..2000 {
            let dst = u32::from(s.next_destination());
            assert_eq!(u64::from(dst >> 8), permutation_at(key, 1 << 24, cursor).unwrap());
        }
    }

    #[test]
    fn pure_random_is_seeded() {
        let spec = ScheduleSpec { pool: PoolSpec::FullV4, order: OrderSpec::PureRandom { seed: 11 } };
        let a: Vec<_> = {
            let mut s = Schedule::new(spec).unwrap();
            (0..100).map(|_| s.next_destination()).collect()
        };
        let mut s = Schedule::new(spec).unwrap();
        let b: Vec<_> = (0..100).map(|_| s.next_destination()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pure_random_lens_fraction_chi_square() {
        let spec = ScheduleSpec { pool: PoolSpec::FullV4, order: OrderSpec::PureRandom { seed: 2024 } };
        let mut s = Schedule::new(spec).unwrap();
        let n = 1_000_000u32;
        let hits = (0..n).filter(|_| s.next_destination().octets()[0] == 10).count() as f64;
        let expected = f64::from(n) / 256.0;
        let miss_expected = f64::from(n) - expected;
        let chi2 = (hits - expected).powi(2) / expected + (hits - expected).powi(2) / miss_expected;
        // 1 degree of freedom, p = 0.001
        assert!(chi2 < 10.828, "chi2 = {chi2}");
    }

    #[test]
    fn validation() {
        let bad = ScheduleSpec {
            pool: PoolSpec::Local { subnet: "10.0.0.0/31".parse().unwrap() },
            order: OrderSpec::PureRandom { seed: 0 },
        };
        assert_eq!(Schedule::new(bad).unwrap_err(), ScheduleError::PrefixLength(31));
        let mut spec = local("10.0.0.0/24", 0);
        if let OrderSpec::Permutation { cursor, .. } = &mut spec.order {
            *cursor = 256;
        }
        assert!(matches!(Schedule::new(spec), Err(ScheduleError::IndexOutOfRange { .. })));
    }

    #[test]
    fn lhb_ttl_examples() {
        let ip = |s: &str| s.parse::<Ipv4Addr>().unwrap();
        assert_eq!(lhb_ttl(ip("192.168.0.1"), ip("192.168.0.2")), Ok(2));
        assert_eq!(lhb_ttl(ip("10.0.0.1"), ip("11.0.0.1")), Ok(16));
        assert_eq!(lhb_ttl(ip("10.1.0.0"), ip("10.1.128.0")), Ok(16));
        assert_eq!(lhb_ttl(ip("10.1.0.0"), ip("10.1.0.1")), Ok(1));
        assert_eq!(lhb_ttl(ip("10.0.0.1"), ip("10.0.0.1")), Err(ScheduleError::SameAddress));
    }

    #[test]
    fn hit_probability_examples() {
        assert_eq!(hit_probability(&PoolSpec::FullV4, 8), Ok(1.0 / 256.0));
        assert_eq!(hit_probability(&PoolSpec::FullV4, 32), Ok(2f64.powi(-32)));
        // a /8 holds 2^16 of the 2^24 /24 blocks
        assert_eq!(hit_probability(&PoolSpec::Per24, 8), Ok(f64::from(1u32 << 16) / f64::from(1u32 << 24)));
        assert!(hit_probability(&PoolSpec::Per24, 25).is_err());
        let local = PoolSpec::Local { subnet: "10.0.0.0/24".parse().unwrap() };
        assert_eq!(hit_probability(&local, 8), Err(ScheduleError::LocalPool));
    }

    #[test]
    fn coverage_anchors() {
        assert_eq!(coverage_estimate(1 << 24, 32, OrderKind::Permutation), Ok(524_288.0));
        assert_eq!(coverage_estimate(1 << 24, 1, OrderKind::Permutation), Ok(16_777_216.0));
        assert_eq!(all_pairs_total(1 << 32, 1 << 32), 1u128 << 64);
        let h16: f64 = (1..=16).map(|k| 1.0 / f64::from(k)).sum();
        assert!((coverage_estimate(16, 1, OrderKind::Random).unwrap() - 16.0 * h16).abs() < 1e-12);
        assert_eq!(coverage_estimate(16, 0, OrderKind::Random), Err(ScheduleError::NoSenders));
    }

    #[test]
    fn harmonic_asymptote_matches_sum() {
        let n = (1u64 << 20) + 1;
        let exact: f64 = (1..=n).rev().map(|k| 1.0 / k as f64).sum();
        assert!((harmonic(n) - exact).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn lhb_ttl_symmetric(a: u32, b: u32) {
            prop_assume!(a != b);
            let (a, b) = (Ipv4Addr::from(a), Ipv4Addr::from(b));
            prop_assert_eq!(lhb_ttl(a, b), lhb_ttl(b, a));
        }

        #[test]
        fn lhb_ttl_monotone_in_shared_bits(a: u32, k in 0u32..31) {
            // flip bit (31 - k) and bit (31 - k - 1): first shares k bits, second k + 1 bits
            let near = a ^ (1 << (30 - k));
            let far = a ^ (1 << (31 - k));
            let src = Ipv4Addr::from(a);
            prop_assert!(lhb_ttl(src, Ipv4Addr::from(near)).unwrap() <= lhb_ttl(src, Ipv4Addr::from(far)).unwrap());
        }

        #[test]
        fn hit_probability_pool_agnostic_below_24(m in 0u8..=24) {
            prop_assert_eq!(hit_probability(&PoolSpec::FullV4, m), hit_probability(&PoolSpec::Per24, m));
        }
    }
}
