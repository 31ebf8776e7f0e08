//! Heartbeat message, its fixed binary layout, and cheap datagram classification.
//!
//! Every heartbeat encodes to one of two fixed sizes. All multi-byte fields are
//! big-endian:
//!
//! ```text
//! offset  size  field
//!      0     3  magic "IHB"
//!      3     1  version (1)
//!      4     1  kind (0 = IHB, 1 = LHB)
//!      5     2  host_id
//!      7     1  orig_ttl
//!      8     4  rate_uhz
//!     12     4  seq
//!     16     8  timestamp_ns
//!     24     4  pool descriptor: pool kind (4 bits) | order (4 bits) | epoch (24 bits)
//!     28     1  integrity flag (0 or 1)
//!     29    38  integrity block, present iff flag = 1:
//!               chain_epoch (2) | key_index (4) | mac (16) | disclosed_key (16)
//! ```
//!
//! Version 1 fixes the integrity primitives to SHA-256 (chain hash) and
//! HMAC-SHA-256 (tag), both truncated to 16 bytes.

mod packet;

pub use packet::{
    build_ipv4, encapsulate, internet_checksum, parse_ethernet, parse_ipv4, Ipv4Datagram,
    PacketError, IPPROTO_ICMP, IPPROTO_TCP, IPPROTO_UDP,
};

use std::fmt;
use std::net::Ipv4Addr;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity::{IntegrityBlock, KEY_LEN};

pub const MAGIC: [u8; 3] = *b"IHB";
pub const VERSION: u8 = 1;
/// Encoded length without an integrity block.
pub const BASE_LEN: usize = 29;
pub const INTEGRITY_LEN: usize = 38;
/// Encoded length with an integrity block.
pub const SIGNED_LEN: usize = BASE_LEN + INTEGRITY_LEN;
/// Byte range of the MAC inside a signed encoding.
pub const MAC_RANGE: Range<usize> = 35..51;

/// RFC 4727 experimental ICMP type.
pub const ICMP_TYPE_EXPERIMENTAL: u8 = 253;
pub const ICMP_CODE_HEARTBEAT: u8 = 0;
pub const DEFAULT_UDP_PORT: u16 = 48000;
/// Largest permutation epoch representable in the 24-bit descriptor field.
pub const MAX_POOL_EPOCH: u32 = (1 << 24) - 1;
/// Classification never looks further into the payload than this.
pub const CLASSIFY_PREFIX: usize = 8;

/// Small random per-host identifier. Only meaningful together with a source address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub u16);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#06x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeartbeatKind {
    #[serde(rename = "IHB")]
    Ihb,
    #[serde(rename = "LHB")]
    Lhb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolKind {
    FullV4,
    Per24,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderKind {
    Random,
    Permutation,
}

/// How the sender picks destinations, advertised so observers can set expectations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolDescriptor {
    pub pool: PoolKind,
    pub order: OrderKind,
    /// Permutation epoch, 24 bits on the wire.
    pub epoch: u32,
}

impl Default for PoolDescriptor {
    fn default() -> Self {
        PoolDescriptor { pool: PoolKind::FullV4, order: OrderKind::Random, epoch: 0 }
    }
}

impl PoolDescriptor {
    fn pack(&self) -> u32 {
        let pool = match self.pool {
            PoolKind::FullV4 => 0u32,
            PoolKind::Per24 => 1,
            PoolKind::Local => 2,
        };
        let order = match self.order {
            OrderKind::Random => 0u32,
            OrderKind::Permutation => 1,
        };
        (pool << 28) | (order << 24) | (self.epoch & MAX_POOL_EPOCH)
    }

    fn unpack(raw: u32) -> Result<Self, DecodeError> {
        let pool = match raw >> 28 {
            0 => PoolKind::FullV4,
            1 => PoolKind::Per24,
            2 => PoolKind::Local,
            _ => return Err(DecodeError::Malformed("unknown pool kind")),
        };
        let order = match (raw >> 24) & 0xf {
            0 => OrderKind::Random,
            1 => OrderKind::Permutation,
            _ => return Err(DecodeError::Malformed("unknown order kind")),
        };
        Ok(PoolDescriptor { pool, order, epoch: raw & MAX_POOL_EPOCH })
    }
}

/// The protocol message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub version: u8,
    pub kind: HeartbeatKind,
    pub host_id: HostId,
    /// Declared sending rate in micro-heartbeats per second (1 pps = 1_000_000).
    pub rate_uhz: u32,
    pub orig_ttl: u8,
    pub timestamp_ns: u64,
    pub pool: PoolDescriptor,
    pub seq: u32,
    #[serde(default)]
    pub integrity: Option<IntegrityBlock>,
}

impl Heartbeat {
    /// A version-1 IHB with a full-address-space random pool and no integrity block.
    pub fn new(host_id: HostId, rate_uhz: u32, orig_ttl: u8, timestamp_ns: u64, seq: u32) -> Self {
        Heartbeat {
            version: VERSION,
            kind: HeartbeatKind::Ihb,
            host_id,
            rate_uhz,
            orig_ttl,
            timestamp_ns,
            pool: PoolDescriptor::default(),
            seq,
            integrity: None,
        }
    }

    pub fn encoded_len(&self) -> usize {
        if self.integrity.is_some() {
            SIGNED_LEN
        } else {
            BASE_LEN
        }
    }

    /// Declared rate in packets per second.
    pub fn rate_pps(&self) -> f64 {
        self.rate_uhz as f64 / 1e6
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.version != VERSION {
            return Err(ValidationError::new("version", "only version 1 is emitted"));
        }
        if self.rate_uhz == 0 {
            return Err(ValidationError::new("rate_uhz", "must be positive"));
        }
        if self.orig_ttl == 0 {
            return Err(ValidationError::new("orig_ttl", "must be at least 1"));
        }
        if self.kind == HeartbeatKind::Lhb && self.pool.pool != PoolKind::Local {
            return Err(ValidationError::new("kind", "LHB requires a local pool"));
        }
        if self.pool.epoch > MAX_POOL_EPOCH {
            return Err(ValidationError::new("pool.epoch", "exceeds 24 bits"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid heartbeat field `{field}`: {reason}")]
pub struct ValidationError {
    pub field: &'static str,
    pub reason: &'static str,
}

impl ValidationError {
    fn new(field: &'static str, reason: &'static str) -> Self {
        ValidationError { field, reason }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("not a heartbeat")]
    NotHeartbeat,
    #[error("malformed heartbeat: {0}")]
    Malformed(&'static str),
    #[error("unsupported heartbeat version {0}")]
    UnsupportedVersion(u8),
}

/// Serializes a heartbeat into its canonical fixed layout.
pub fn encode(hb: &Heartbeat) -> Result<Vec<u8>, ValidationError> {
    hb.validate()?;
    let mut out = Vec::with_capacity(hb.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(hb.version);
    out.push(match hb.kind {
        HeartbeatKind::Ihb => 0,
        HeartbeatKind::Lhb => 1,
    });
    out.extend_from_slice(&hb.host_id.0.to_be_bytes());
    out.push(hb.orig_ttl);
    out.extend_from_slice(&hb.rate_uhz.to_be_bytes());
    out.extend_from_slice(&hb.seq.to_be_bytes());
    out.extend_from_slice(&hb.timestamp_ns.to_be_bytes());
    out.extend_from_slice(&hb.pool.pack().to_be_bytes());
    match &hb.integrity {
        None => out.push(0),
        Some(block) => {
            out.push(1);
            out.extend_from_slice(&block.chain_epoch.to_be_bytes());
            out.extend_from_slice(&block.key_index.to_be_bytes());
            out.extend_from_slice(&block.mac);
            out.extend_from_slice(&block.disclosed_key);
        }
    }
    debug_assert_eq!(out.len(), hb.encoded_len());
    Ok(out)
}

/// Encoding used as MAC input: the canonical bytes with the MAC field zeroed.
pub fn encode_for_mac(hb: &Heartbeat) -> Result<Vec<u8>, ValidationError> {
    let mut bytes = encode(hb)?;
    if bytes.len() == SIGNED_LEN {
        bytes[MAC_RANGE].fill(0);
    }
    Ok(bytes)
}

fn be_u16(b: &[u8]) -> u16 {
    u16::from_be_bytes([b[0], b[1]])
}

fn be_u32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

/// Strict inverse of [`encode`]. Trailing bytes are rejected.
pub fn decode(bytes: &[u8]) -> Result<Heartbeat, DecodeError> {
    if bytes.len() < MAGIC.len() || bytes[..3] != MAGIC {
        return Err(DecodeError::NotHeartbeat);
    }
    let Some(&version) = bytes.get(3) else {
        return Err(DecodeError::Malformed("truncated"));
    };
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    if bytes.len() < BASE_LEN {
        return Err(DecodeError::Malformed("truncated"));
    }
    let kind = match bytes[4] {
        0 => HeartbeatKind::Ihb,
        1 => HeartbeatKind::Lhb,
        _ => return Err(DecodeError::Malformed("unknown kind")),
    };
    let pool = PoolDescriptor::unpack(be_u32(&bytes[24..28]))?;
    let expected = match bytes[28] {
        0 => BASE_LEN,
        1 => SIGNED_LEN,
        _ => return Err(DecodeError::Malformed("bad integrity flag")),
    };
    if bytes.len() < expected {
        return Err(DecodeError::Malformed("truncated"));
    }
    if bytes.len() > expected {
        return Err(DecodeError::Malformed("trailing bytes"));
    }
    let integrity = (expected == SIGNED_LEN).then(|| {
        let b = &bytes[BASE_LEN..];
        let mut mac = [0u8; KEY_LEN];
        let mut disclosed_key = [0u8; KEY_LEN];
        mac.copy_from_slice(&b[6..22]);
        disclosed_key.copy_from_slice(&b[22..38]);
        IntegrityBlock { chain_epoch: be_u16(&b[0..2]), key_index: be_u32(&b[2..6]), mac, disclosed_key }
    });
    let mut ts = [0u8; 8];
    ts.copy_from_slice(&bytes[16..24]);
    let hb = Heartbeat {
        version,
        kind,
        host_id: HostId(be_u16(&bytes[5..7])),
        orig_ttl: bytes[7],
        rate_uhz: be_u32(&bytes[8..12]),
        seq: be_u32(&bytes[12..16]),
        timestamp_ns: u64::from_be_bytes(ts),
        pool,
        integrity,
    };
    hb.validate().map_err(|e| DecodeError::Malformed(e.field))?;
    Ok(hb)
}

/// Encapsulation used to carry heartbeats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TransportKind {
    /// ICMP type 253, code 0, heartbeat after the 8-byte ICMP header.
    Icmp,
    Udp {
        #[serde(default = "default_udp_port")]
        port: u16,
    },
}

fn default_udp_port() -> u16 {
    DEFAULT_UDP_PORT
}

impl Default for TransportKind {
    fn default() -> Self {
        TransportKind::Udp { port: DEFAULT_UDP_PORT }
    }
}

/// Transport header fields visible to a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportHeader {
    Icmp { icmp_type: u8, code: u8 },
    Udp { dst_port: u16 },
    Tcp,
    Other(u8),
}

/// Minimal view of a captured datagram.
#[derive(Debug, Clone, Copy)]
pub struct DatagramSummary<'a> {
    pub transport: TransportHeader,
    pub payload_prefix: &'a [u8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Heartbeat,
    NotHeartbeat,
}

/// Decides from transport header fields and the first payload bytes alone
/// whether a datagram carries a heartbeat.
pub fn classify(raw: &DatagramSummary<'_>, udp_port: u16) -> Classification {
    let transport_ok = match raw.transport {
        TransportHeader::Icmp { icmp_type, code } => {
            icmp_type == ICMP_TYPE_EXPERIMENTAL && code == ICMP_CODE_HEARTBEAT
        }
        TransportHeader::Udp { dst_port } => dst_port == udp_port,
        TransportHeader::Tcp | TransportHeader::Other(_) => false,
    };
    let prefix = &raw.payload_prefix[..raw.payload_prefix.len().min(CLASSIFY_PREFIX)];
    if transport_ok && prefix.starts_with(&MAGIC) {
        Classification::Heartbeat
    } else {
        Classification::NotHeartbeat
    }
}

/// A heartbeat as seen by an observation point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedHeartbeat {
    pub recv_time_ns: u64,
    pub src_addr: Ipv4Addr,
    pub dst_addr: Ipv4Addr,
    /// TTL from the IP header at capture. Exceeding `body.orig_ttl` is a spoofing signal.
    pub arrival_ttl: u8,
    pub transport: TransportKind,
    pub body: Heartbeat,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Heartbeat {
        Heartbeat::new(HostId(0), 1, 1, 0, 0)
    }

    #[test]
    fn minimal_layout() {
        let bytes = encode(&minimal()).unwrap();
        assert_eq!(bytes.len(), BASE_LEN);
        assert_eq!(&bytes[..4], &[0x49, 0x48, 0x42, 0x01]);
        assert_eq!(decode(&bytes).unwrap(), minimal());
    }

    #[test]
    fn zero_rate_rejected() {
        let mut hb = minimal();
        hb.rate_uhz = 0;
        assert_eq!(encode(&hb).unwrap_err().field, "rate_uhz");
    }

    #[test]
    fn zero_ttl_and_lhb_pool_rejected() {
        let mut hb = minimal();
        hb.orig_ttl = 0;
        assert_eq!(encode(&hb).unwrap_err().field, "orig_ttl");
        let mut hb = minimal();
        hb.kind = HeartbeatKind::Lhb;
        assert_eq!(encode(&hb).unwrap_err().field, "kind");
        hb.pool.pool = PoolKind::Local;
        assert!(encode(&hb).is_ok());
    }

    #[test]
    fn decode_error_classes() {
        assert_eq!(decode(&[]), Err(DecodeError::NotHeartbeat));
        assert_eq!(decode(b"IH"), Err(DecodeError::NotHeartbeat));
        assert_eq!(decode(b"IHB"), Err(DecodeError::Malformed("truncated")));
        let mut bytes = encode(&minimal()).unwrap();
        bytes[3] = 9;
        assert_eq!(decode(&bytes), Err(DecodeError::UnsupportedVersion(9)));
        let mut bytes = encode(&minimal()).unwrap();
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(DecodeError::Malformed("trailing bytes")));
        let bytes = encode(&minimal()).unwrap();
        assert_eq!(decode(&bytes[..20]), Err(DecodeError::Malformed("truncated")));
        let mut bytes = encode(&minimal()).unwrap();
        bytes[28] = 1;
        assert_eq!(decode(&bytes), Err(DecodeError::Malformed("truncated")));
        let mut bytes = encode(&minimal()).unwrap();
        bytes[8..12].fill(0);
        assert_eq!(decode(&bytes), Err(DecodeError::Malformed("rate_uhz")));
    }

    #[test]
    fn classify_cases() {
        let udp = |payload: &'static [u8]| DatagramSummary {
            transport: TransportHeader::Udp { dst_port: 48000 },
            payload_prefix: payload,
        };
        assert_eq!(classify(&udp(&[0x49, 0x48, 0x42]), 48000), Classification::Heartbeat);
        assert_eq!(classify(&udp(&[0x00]), 48000), Classification::NotHeartbeat);
        assert_eq!(classify(&udp(&[0x49, 0x48, 0x42]), 48001), Classification::NotHeartbeat);
        let tcp = DatagramSummary { transport: TransportHeader::Tcp, payload_prefix: b"IHB\x01" };
        assert_eq!(classify(&tcp, 48000), Classification::NotHeartbeat);
        let icmp = DatagramSummary {
            transport: TransportHeader::Icmp { icmp_type: 253, code: 0 },
            payload_prefix: b"IHB\x01",
        };
        assert_eq!(classify(&icmp, 48000), Classification::Heartbeat);
        let echo = DatagramSummary {
            transport: TransportHeader::Icmp { icmp_type: 8, code: 0 },
            payload_prefix: b"IHB\x01",
        };
        assert_eq!(classify(&echo, 48000), Classification::NotHeartbeat);
    }

    #[test]
    fn pool_descriptor_packing() {
        let d = PoolDescriptor { pool: PoolKind::Per24, order: OrderKind::Permutation, epoch: 0xabcdef };
        assert_eq!(d.pack(), 0x11ab_cdef);
        assert_eq!(PoolDescriptor::unpack(d.pack()).unwrap(), d);
        assert!(PoolDescriptor::unpack(0x3000_0000).is_err());
    }
}
