use ihb_core::integrity::IntegrityBlock;
use ihb_core::wire::{
    build_ipv4, classify, decode, encode, parse_ipv4, Classification, DecodeError, Heartbeat, HeartbeatKind, HostId,
    OrderKind, PoolDescriptor, PoolKind, TransportKind, BASE_LEN, DEFAULT_UDP_PORT, MAX_POOL_EPOCH, SIGNED_LEN,
};
use proptest::prelude::*;

fn golden() -> Vec<u8> {
    let text = include_str!("fixtures/golden_minimal.hex");
    hex::decode(text.trim()).unwrap()
}

#[test]
fn golden_minimal_message() {
    let minimal = Heartbeat::new(HostId(0), 1, 1, 0, 0);
    assert_eq!(encode(&minimal).unwrap(), golden());
    assert_eq!(decode(&golden()).unwrap(), minimal);

    let mut v9 = golden();
    v9[3] = 9;
    assert_eq!(decode(&v9), Err(DecodeError::UnsupportedVersion(9)));
}

fn pool() -> impl Strategy<Value = PoolDescriptor> {
    (
        prop_oneof![Just(PoolKind::FullV4), Just(PoolKind::Per24), Just(PoolKind::Local)],
        prop_oneof![Just(OrderKind::Random), Just(OrderKind::Permutation)],
        0..=MAX_POOL_EPOCH,
    )
        .prop_map(|(pool, order, epoch)| PoolDescriptor { pool, order, epoch })
}

fn block() -> impl Strategy<Value = IntegrityBlock> {
    (any::<u16>(), any::<u32>(), any::<[u8; 16]>(), any::<[u8; 16]>()).prop_map(
        |(chain_epoch, key_index, mac, disclosed_key)| IntegrityBlock { chain_epoch, key_index, mac, disclosed_key },
    )
}

prop_compose! {
    fn valid_heartbeat()(
        lhb in any::<bool>(),
        host_id in any::<u16>(),
        rate_uhz in 1..=u32::MAX,
        orig_ttl in 1..=u8::MAX,
        timestamp_ns in any::<u64>(),
        mut pool in pool(),
        seq in any::<u32>(),
        integrity in proptest::option::of(block()),
    ) -> Heartbeat {
        if lhb {
            pool.pool = PoolKind::Local;
        }
        Heartbeat {
            kind: if lhb { HeartbeatKind::Lhb } else { HeartbeatKind::Ihb },
            pool,
            integrity,
            ..Heartbeat::new(HostId(host_id), rate_uhz, orig_ttl, timestamp_ns, seq)
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn decode_inverts_encode(hb in valid_heartbeat()) {
        let bytes = encode(&hb).unwrap();
        prop_assert_eq!(bytes.len(), if hb.integrity.is_some() { SIGNED_LEN } else { BASE_LEN });
        prop_assert_eq!(decode(&bytes).unwrap(), hb);
    }

    #[test]
    fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn mutated_encodings_decode_or_error(hb in valid_heartbeat(), flips in proptest::collection::vec((any::<usize>(), any::<u8>()), 1..4), cut in any::<usize>()) {
        let mut bytes = encode(&hb).unwrap();
        for (at, x) in flips {
            let i = at % bytes.len();
            bytes[i] ^= x;
        }
        bytes.truncate(cut % (bytes.len() + 1));
        let _ = decode(&bytes);
    }

    #[test]
    fn encapsulated_heartbeats_classify(hb in valid_heartbeat(), udp in any::<bool>(), ttl in 1..=u8::MAX) {
        let transport = if udp { TransportKind::Udp { port: DEFAULT_UDP_PORT } } else { TransportKind::Icmp };
        let packet = build_ipv4([10, 0, 0, 1].into(), [44, 0, 0, 1].into(), ttl, transport, &encode(&hb).unwrap());
        let ip = parse_ipv4(&packet).unwrap();
        prop_assert_eq!(classify(&ip.summary(), DEFAULT_UDP_PORT), Classification::Heartbeat);
        prop_assert_eq!(decode(ip.payload).unwrap(), hb);
    }
}
