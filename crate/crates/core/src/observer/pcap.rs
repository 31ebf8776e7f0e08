//! Classic libpcap files: either byte order, micro- or nanosecond stamps,
//! Ethernet or raw-IPv4 link types.

use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::Path;

use ipnet::Ipv4Net;
use thiserror::Error;

use super::{observe_ipv4, PacketOutcome};
use crate::wire::{parse_ethernet, ObservedHeartbeat};

const MAGIC_US: u32 = 0xa1b2_c3d4;
const MAGIC_NS: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW: u32 = 101;
const LINKTYPE_IPV4: u32 = 228;
/// Upper bound on a single captured record; anything larger means a corrupt header.
const MAX_RECORD: u32 = 256 * 1024;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("{path}: {source}")]
    Open { path: String, source: io::Error },
    #[error("read failed at byte {offset}: {source}")]
    Io { offset: u64, source: io::Error },
    #[error("corrupt pcap at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
}

/// One captured frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcapPacket {
    pub offset: u64,
    pub time_ns: u64,
    pub data: Vec<u8>,
}

/// Streaming record reader.
pub struct PcapReader<R> {
    inner: R,
    offset: u64,
    swapped: bool,
    nanos: bool,
    linktype: u32,
    done: bool,
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut header = [0u8; 24];
        let got = read_full(&mut inner, &mut header).map_err(|source| PcapError::Io { offset: 0, source })?;
        if got < 24 {
            return Err(PcapError::Corrupt { offset: got as u64, reason: "truncated global header".into() });
        }
        let raw = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let (swapped, nanos) = match raw {
            MAGIC_US => (false, false),
            MAGIC_NS => (false, true),
            m if m.swap_bytes() == MAGIC_US => (true, false),
            m if m.swap_bytes() == MAGIC_NS => (true, true),
            m => return Err(PcapError::Corrupt { offset: 0, reason: format!("bad magic {m:#010x}") }),
        };
        let mut reader = PcapReader { inner, offset: 24, swapped, nanos, linktype: 0, done: false };
        reader.linktype = reader.u32_at(&header, 20);
        if !matches!(reader.linktype, LINKTYPE_ETHERNET | LINKTYPE_RAW | LINKTYPE_IPV4) {
            return Err(PcapError::Corrupt { offset: 20, reason: format!("unsupported link type {}", reader.linktype) });
        }
        Ok(reader)
    }

    pub fn linktype(&self) -> u32 {
        self.linktype
    }

    fn u32_at(&self, buf: &[u8], at: usize) -> u32 {
        let b = [buf[at], buf[at + 1], buf[at + 2], buf[at + 3]];
        if self.swapped {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }

    fn next_packet(&mut self) -> Result<Option<PcapPacket>, PcapError> {
        let start = self.offset;
        let mut rec = [0u8; 16];
        let got = read_full(&mut self.inner, &mut rec).map_err(|source| PcapError::Io { offset: start, source })?;
        if got == 0 {
            return Ok(None);
        }
        if got < 16 {
            return Err(PcapError::Corrupt { offset: start, reason: "truncated record header".into() });
        }
        let secs = u64::from(self.u32_at(&rec, 0));
        let frac = u64::from(self.u32_at(&rec, 4));
        let incl = self.u32_at(&rec, 8);
        if incl > MAX_RECORD {
            return Err(PcapError::Corrupt { offset: start + 8, reason: format!("record length {incl}") });
        }
        let mut data = vec![0u8; incl as usize];
        let got = read_full(&mut self.inner, &mut data).map_err(|source| PcapError::Io { offset: start + 16, source })?;
        if got < data.len() {
            return Err(PcapError::Corrupt { offset: start + 16 + got as u64, reason: "truncated record body".into() });
        }
        self.offset = start + 16 + u64::from(incl);
        let time_ns = secs * 1_000_000_000 + if self.nanos { frac } else { frac * 1_000 };
        Ok(Some(PcapPacket { offset: start, time_ns, data }))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<PcapPacket, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.next_packet().transpose();
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PcapStats {
    pub packets: u64,
    pub not_heartbeat: u64,
    pub out_of_lens: u64,
    pub malformed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct PcapLoad {
    pub records: Vec<ObservedHeartbeat>,
    pub stats: PcapStats,
}

/// Reads every heartbeat in the file whose destination lies in `lens`.
pub fn load_pcap(path: &Path, lens: &Ipv4Net, udp_port: u16) -> Result<PcapLoad, PcapError> {
    let file = File::open(path).map_err(|source| PcapError::Open { path: path.display().to_string(), source })?;
    load_pcap_from(BufReader::new(file), lens, udp_port)
}

pub fn load_pcap_from<R: Read>(reader: R, lens: &Ipv4Net, udp_port: u16) -> Result<PcapLoad, PcapError> {
    let reader = PcapReader::new(reader)?;
    let linktype = reader.linktype();
    let mut load = PcapLoad::default();
    for packet in reader {
        let packet = packet?;
        load.stats.packets += 1;
        let ip = match linktype {
            LINKTYPE_ETHERNET => parse_ethernet(&packet.data),
            _ => Some(&packet.data[..]),
        };
        let Some(ip) = ip else {
            load.stats.not_heartbeat += 1;
            continue;
        };
        match observe_ipv4(ip, packet.time_ns, lens, udp_port) {
            PacketOutcome::Heartbeat(obs) => load.records.push(obs),
            PacketOutcome::NotHeartbeat => load.stats.not_heartbeat += 1,
            PacketOutcome::OutOfLens => load.stats.out_of_lens += 1,
            PacketOutcome::Malformed => load.stats.malformed += 1,
        }
    }
    Ok(load)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    use crate::wire::{build_ipv4, encode, Heartbeat, HostId, TransportKind};

    fn lens() -> Ipv4Net {
        "44.0.0.0/8".parse().unwrap()
    }

    fn write_pcap(packets: &[(u64, Vec<u8>)], big_endian: bool, nanos: bool) -> Vec<u8> {
        let w32 = |v: u32| if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
        let w16 = |v: u16| if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
        let mut out = Vec::new();
        out.extend_from_slice(&w32(if nanos { MAGIC_NS } else { MAGIC_US }));
        out.extend_from_slice(&w16(2));
        out.extend_from_slice(&w16(4));
        out.extend_from_slice(&[0; 8]);
        out.extend_from_slice(&w32(65535));
        out.extend_from_slice(&w32(LINKTYPE_RAW));
        for (t, data) in packets {
            let frac = if nanos { t % 1_000_000_000 } else { (t % 1_000_000_000) / 1000 };
            out.extend_from_slice(&w32((t / 1_000_000_000) as u32));
            out.extend_from_slice(&w32(frac as u32));
            out.extend_from_slice(&w32(data.len() as u32));
            out.extend_from_slice(&w32(data.len() as u32));
            out.extend_from_slice(data);
        }
        out
    }

    fn heartbeat_packet(seq: u32) -> Vec<u8> {
        let hb = Heartbeat::new(HostId(1), 1_000_000, 64, 0, seq);
        build_ipv4(Ipv4Addr::new(1, 1, 1, 1), Ipv4Addr::new(44, 0, 0, 9), 55, TransportKind::Icmp, &encode(&hb).unwrap())
    }

    #[test]
    fn both_byte_orders_and_resolutions() {
        for (be, ns) in [(false, false), (true, false), (false, true), (true, true)] {
            let bytes = write_pcap(&[(1_500_000_000_123_456_789, heartbeat_packet(3))], be, ns);
            let load = load_pcap_from(&bytes[..], &lens(), 48000).unwrap();
            assert_eq!(load.records.len(), 1);
            let expect = if ns { 1_500_000_000_123_456_789 } else { 1_500_000_000_123_456_000 };
            assert_eq!(load.records[0].recv_time_ns, expect);
            assert_eq!(load.records[0].arrival_ttl, 55);
        }
    }

    #[test]
    fn errors_carry_offsets() {
        let mut bytes = write_pcap(&[(0, heartbeat_packet(1)), (0, heartbeat_packet(2))], false, false);
        bytes.truncate(bytes.len() - 5);
        let err = load_pcap_from(&bytes[..], &lens(), 48000).unwrap_err();
        let first_len = 16 + heartbeat_packet(1).len() as u64;
        match err {
            PcapError::Corrupt { offset, .. } => assert!(offset > 24 + first_len),
            other => panic!("{other}"),
        }
        let err = load_pcap_from(&b"nonsense-nonsense-nonsense"[..], &lens(), 48000).unwrap_err();
        assert!(matches!(err, PcapError::Corrupt { offset: 0, .. }));
        assert!(matches!(load_pcap_from(&b"\xd4\xc3"[..], &lens(), 1).unwrap_err(), PcapError::Corrupt { offset: 2, .. }));
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_pcap(Path::new("/nonexistent.pcap"), &lens(), 1), Err(PcapError::Open { .. })));
    }
}
