//! IPv4 / UDP / ICMP framing around heartbeat payloads.

use std::net::Ipv4Addr;

use thiserror::Error;

use super::{
    DatagramSummary, TransportHeader, TransportKind, ICMP_CODE_HEARTBEAT, ICMP_TYPE_EXPERIMENTAL,
};

pub const IPPROTO_ICMP: u8 = 1;
pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("truncated {0} header")]
    Truncated(&'static str),
    #[error("not an IPv4 packet")]
    NotIpv4,
    #[error("fragmented datagram")]
    Fragment,
}

/// One's-complement sum over 16-bit words, as used by IPv4, ICMP and UDP.
pub fn internet_checksum(chunks: &[&[u8]]) -> u16 {
    let mut sum: u32 = 0;
    let mut carry: Option<u8> = None;
    for chunk in chunks {
        for &b in chunk.iter() {
            match carry.take() {
                Some(hi) => sum += u32::from(u16::from_be_bytes([hi, b])),
                None => carry = Some(b),
            }
        }
    }
    if let Some(hi) = carry {
        sum += u32::from(hi) << 8;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Transport-layer bytes (header + payload) for a heartbeat.
///
/// The UDP checksum needs the IP pseudo-header, so it is left zero here and
/// filled in by [`build_ipv4`].
pub fn encapsulate(transport: TransportKind, payload: &[u8]) -> Vec<u8> {
    match transport {
        TransportKind::Icmp => {
            let mut out = vec![ICMP_TYPE_EXPERIMENTAL, ICMP_CODE_HEARTBEAT, 0, 0, 0, 0, 0, 0];
            out.extend_from_slice(payload);
            let csum = internet_checksum(&[&out]);
            out[2..4].copy_from_slice(&csum.to_be_bytes());
            out
        }
        TransportKind::Udp { port } => {
            let len = (8 + payload.len()) as u16;
            let mut out = Vec::with_capacity(len as usize);
            out.extend_from_slice(&port.to_be_bytes());
            out.extend_from_slice(&port.to_be_bytes());
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(payload);
            out
        }
    }
}

/// A complete IPv4 packet carrying `payload` over `transport`.
pub fn build_ipv4(
    src: Ipv4Addr,
    dst: Ipv4Addr,
    ttl: u8,
    transport: TransportKind,
    payload: &[u8],
) -> Vec<u8> {
    let mut l4 = encapsulate(transport, payload);
    let proto = match transport {
        TransportKind::Icmp => IPPROTO_ICMP,
        TransportKind::Udp { .. } => IPPROTO_UDP,
    };
    if proto == IPPROTO_UDP {
        let len = (l4.len() as u16).to_be_bytes();
        let pseudo = [&src.octets()[..], &dst.octets()[..], &[0, IPPROTO_UDP], &len[..]].concat();
        let csum = match internet_checksum(&[&pseudo, &l4]) {
            0 => 0xffff,
            c => c,
        };
        l4[6..8].copy_from_slice(&csum.to_be_bytes());
    }
    let total = (20 + l4.len()) as u16;
    let mut ip = Vec::with_capacity(total as usize);
    ip.extend_from_slice(&[0x45, 0]);
    ip.extend_from_slice(&total.to_be_bytes());
    ip.extend_from_slice(&[0, 0, 0x40, 0]); // id 0, DF
    ip.push(ttl);
    ip.push(proto);
    ip.extend_from_slice(&[0, 0]);
    ip.extend_from_slice(&src.octets());
    ip.extend_from_slice(&dst.octets());
    let csum = internet_checksum(&[&ip]);
    ip[10..12].copy_from_slice(&csum.to_be_bytes());
    ip.extend_from_slice(&l4);
    ip
}

/// Parsed view of an IPv4 datagram.
#[derive(Debug, Clone, Copy)]
pub struct Ipv4Datagram<'a> {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub ttl: u8,
    pub protocol: u8,
    pub transport: TransportHeader,
    /// Bytes after the transport header, bounded by the declared lengths.
    pub payload: &'a [u8],
}

impl<'a> Ipv4Datagram<'a> {
    pub fn summary(&self) -> DatagramSummary<'a> {
        DatagramSummary { transport: self.transport, payload_prefix: self.payload }
    }
}

/// Parses an IPv4 header and the ICMP/UDP header behind it. Checksums are not
/// verified; captures with offloaded checksums are common.
pub fn parse_ipv4(bytes: &[u8]) -> Result<Ipv4Datagram<'_>, PacketError> {
    if bytes.len() < 20 {
        return Err(PacketError::Truncated("ipv4"));
    }
    if bytes[0] >> 4 != 4 {
        return Err(PacketError::NotIpv4);
    }
    let ihl = usize::from(bytes[0] & 0xf) * 4;
    if ihl < 20 || bytes.len() < ihl {
        return Err(PacketError::Truncated("ipv4"));
    }
    let total = usize::from(u16::from_be_bytes([bytes[2], bytes[3]]));
    let frag = u16::from_be_bytes([bytes[6], bytes[7]]);
    if frag & 0x3fff != 0 {
        return Err(PacketError::Fragment);
    }
    let end = total.clamp(ihl, bytes.len());
    let l4 = &bytes[ihl..end];
    let protocol = bytes[9];
    let (transport, payload) = match protocol {
        IPPROTO_ICMP => {
            if l4.len() < 8 {
                return Err(PacketError::Truncated("icmp"));
            }
            (TransportHeader::Icmp { icmp_type: l4[0], code: l4[1] }, &l4[8..])
        }
        IPPROTO_UDP => {
            if l4.len() < 8 {
                return Err(PacketError::Truncated("udp"));
            }
            let udp_len = usize::from(u16::from_be_bytes([l4[4], l4[5]])).clamp(8, l4.len());
            (TransportHeader::Udp { dst_port: u16::from_be_bytes([l4[2], l4[3]]) }, &l4[8..udp_len])
        }
        IPPROTO_TCP => (TransportHeader::Tcp, &l4[l4.len()..]),
        other => (TransportHeader::Other(other), &l4[l4.len()..]),
    };
    Ok(Ipv4Datagram {
        src: Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]),
        dst: Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]),
        ttl: bytes[8],
        protocol,
        transport,
        payload,
    })
}

/// IPv4 payload of an Ethernet II frame (one optional 802.1Q tag), if any.
pub fn parse_ethernet(frame: &[u8]) -> Option<&[u8]> {
    if frame.len() < 14 {
        return None;
    }
    let mut ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    let mut offset = 14;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < 18 {
            return None;
        }
        ethertype = u16::from_be_bytes([frame[16], frame[17]]);
        offset = 18;
    }
    (ethertype == ETHERTYPE_IPV4).then(|| &frame[offset..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::{classify, Classification};

    #[test]
    fn checksum_rfc1071_example() {
        let data = [0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7];
        assert_eq!(internet_checksum(&[&data]), !0xddf2);
    }

    #[test]
    fn ipv4_roundtrip_both_transports() {
        let src = Ipv4Addr::new(192, 0, 2, 1);
        let dst = Ipv4Addr::new(10, 1, 2, 3);
        for transport in [TransportKind::Icmp, TransportKind::Udp { port: 48000 }] {
            let pkt = build_ipv4(src, dst, 57, transport, b"IHB\x01rest");
            assert_eq!(internet_checksum(&[&pkt[..20]]), 0);
            let dgram = parse_ipv4(&pkt).unwrap();
            assert_eq!((dgram.src, dgram.dst, dgram.ttl), (src, dst, 57));
            assert_eq!(dgram.payload, b"IHB\x01rest");
            assert_eq!(classify(&dgram.summary(), 48000), Classification::Heartbeat);
        }
    }

    #[test]
    fn truncated_and_fragmented() {
        let pkt = build_ipv4(Ipv4Addr::LOCALHOST, Ipv4Addr::LOCALHOST, 1, TransportKind::Icmp, b"x");
        assert_eq!(parse_ipv4(&pkt[..10]).unwrap_err(), PacketError::Truncated("ipv4"));
        assert_eq!(parse_ipv4(&pkt[..24]).unwrap_err(), PacketError::Truncated("icmp"));
        let mut frag = pkt.clone();
        frag[6] = 0x20; // MF
        assert_eq!(parse_ipv4(&frag).unwrap_err(), PacketError::Fragment);
    }

    #[test]
    fn ethernet_vlan() {
        let mut frame = vec![0u8; 12];
        frame.extend_from_slice(&[0x81, 0x00, 0, 1, 0x08, 0x00, 0x45]);
        assert_eq!(parse_ethernet(&frame), Some(&[0x45u8][..]));
        frame[16] = 0x86;
        assert_eq!(parse_ethernet(&frame), None);
    }
}
