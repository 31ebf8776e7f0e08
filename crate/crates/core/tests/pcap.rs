// Fixtures are produced by fixtures/make_pcaps.py from the wire layout.

use std::net::Ipv4Addr;
use std::path::PathBuf;

use ihb_core::observer::load_pcap;
use ihb_core::wire::{HostId, TransportKind, DEFAULT_UDP_PORT};
use ipnet::Ipv4Net;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn lens() -> Ipv4Net {
    "44.0.0.0/8".parse().unwrap()
}

#[test]
fn ten_heartbeats_among_noise() {
    let load = load_pcap(&fixture("ten_heartbeats.pcap"), &lens(), DEFAULT_UDP_PORT).unwrap();
    assert_eq!(load.records.len(), 10);
    assert_eq!(load.stats.packets, 13);
    assert_eq!(load.stats.not_heartbeat, 3);
    assert_eq!(load.stats.malformed, 0);
    for (i, r) in load.records.iter().enumerate() {
        assert_eq!(r.body.host_id, HostId(0x0100 + i as u16));
        assert_eq!(r.body.seq, i as u32);
        assert_eq!(r.src_addr, Ipv4Addr::new(10, 0, 0, 1 + i as u8));
        assert_eq!(r.arrival_ttl, 54);
        let expected = if i % 2 == 0 { TransportKind::Icmp } else { TransportKind::Udp { port: DEFAULT_UDP_PORT } };
        assert_eq!(r.transport, expected);
        assert_eq!(r.recv_time_ns % 1_000_000_000, 250_000_000);
    }
    assert!(load.records.windows(2).all(|w| w[0].recv_time_ns < w[1].recv_time_ns));
}

#[test]
fn narrow_lens_drops_everything() {
    let load = load_pcap(&fixture("ten_heartbeats.pcap"), &"45.0.0.0/8".parse().unwrap(), DEFAULT_UDP_PORT).unwrap();
    assert!(load.records.is_empty());
    assert_eq!(load.stats.out_of_lens, 10);
}

#[test]
fn empty_capture() {
    let load = load_pcap(&fixture("empty.pcap"), &lens(), DEFAULT_UDP_PORT).unwrap();
    assert!(load.records.is_empty());
    assert_eq!(load.stats.packets, 0);
}

#[test]
fn truncated_payload_counts_malformed() {
    let load = load_pcap(&fixture("truncated.pcap"), &lens(), DEFAULT_UDP_PORT).unwrap();
    assert!(load.records.is_empty());
    assert_eq!(load.stats.malformed, 1);
}
