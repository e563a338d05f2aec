use etmfuzz::trace::{
    decode_packets, decode_prefix, encodable_prefix_bits, encodable_prefix_len, encode_packets, group_atoms, Atom,
    DecodeError, MarkerKind, TracePacket,
};
use proptest::prelude::*;

fn atom_seq(max: usize) -> impl Strategy<Value = Vec<Atom>> {
    prop::collection::vec(any::<bool>().prop_map(Atom), 0..max)
}

fn packet() -> impl Strategy<Value = Vec<TracePacket>> {
    prop_oneof![
        atom_seq(20).prop_map(|a| group_atoms(&a)),
        any::<u32>().prop_map(|t| vec![TracePacket::branch(t)]),
        (any::<u32>(), any::<u8>()).prop_map(|(t, n)| vec![TracePacket::exception_entry(t, n)]),
        Just(vec![TracePacket::ExceptionReturn]),
        Just(vec![TracePacket::TraceMarker(MarkerKind::Start)]),
        Just(vec![TracePacket::TraceMarker(MarkerKind::Stop)]),
    ]
}

fn stream() -> impl Strategy<Value = Vec<TracePacket>> {
    prop::collection::vec(packet(), 0..24).prop_map(|v| v.concat())
}

fn flat_atoms(packets: &[TracePacket]) -> Vec<Atom> {
    packets
        .iter()
        .flat_map(|p| match p {
            TracePacket::AtomGroup(g) => g.clone(),
            _ => Vec::new(),
        })
        .collect()
}

proptest! {
    #[test]
    fn round_trip(packets in stream()) {
        let raw = encode_packets(&packets).unwrap();
        prop_assert_eq!(decode_packets(&raw.0).unwrap(), packets);
    }

    #[test]
    fn truncation_yields_a_prefix(packets in stream(), cut in any::<prop::sample::Index>()) {
        let raw = encode_packets(&packets).unwrap();
        let cut = cut.index(raw.len() + 1);
        let (decoded, err) = decode_prefix(&raw.0[..cut]);
        prop_assert!(decoded.len() <= packets.len());
        prop_assert_eq!(&decoded[..], &packets[..decoded.len()]);
        match err {
            None => prop_assert_eq!(encode_packets(&decoded).unwrap().len(), cut),
            Some(DecodeError::TruncatedPacket { offset }) => {
                prop_assert_eq!(offset, encode_packets(&decoded).unwrap().len());
            }
            Some(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn grouping_preserves_atom_order(seq in atom_seq(200)) {
        let groups = group_atoms(&seq);
        prop_assert!(groups.iter().all(|g| matches!(g, TracePacket::AtomGroup(a) if (1..=7).contains(&a.len()))));
        let raw = encode_packets(&groups).unwrap();
        prop_assert_eq!(raw.len(), groups.len());
        prop_assert_eq!(flat_atoms(&decode_packets(&raw.0).unwrap()), seq);
    }

    #[test]
    fn prefix_rules_agree(seq in atom_seq(8)) {
        let n = seq.len().min(7);
        let bits = seq[..n].iter().enumerate().fold(0u8, |acc, (i, a)| acc | (a.is_e() as u8) << i);
        let len = encodable_prefix_len(&seq);
        prop_assert_eq!(encodable_prefix_bits(bits, n as u8) as usize, len);
        prop_assert!(seq.is_empty() || len >= seq.len().min(4));
    }

    #[test]
    fn arbitrary_bytes_never_panic(raw in prop::collection::vec(any::<u8>(), 0..64)) {
        let (packets, err) = decode_prefix(&raw);
        if err.is_none() {
            prop_assert_eq!(encode_packets(&packets).unwrap().0, raw);
        }
    }
}
