use adacomp::codec::baselines::{onebit_pack, topk_pack};
use adacomp::codec::{Code, CodecState, Entry, GradientVector, PackedLayer};
use adacomp::wire::{self, EncodedLayer, HEADER_BYTES};
use adacomp::Error;
use proptest::prelude::*;

fn arb_pack() -> impl Strategy<Value = PackedLayer> {
    // Bin lengths on both sides of the one-byte entry limit, element counts
    // that often leave a partial last bin.
    let bin_len = prop_oneof![1usize..=64, 65usize..=700, Just(16384usize)];
    (
        bin_len,
        1usize..2000,
        any::<u16>(),
        prop_oneof![
            1e-30f32..1e30,
            (0u32..0x7f80_0000)
                .prop_map(f32::from_bits)
                .prop_filter("positive", |s| *s > 0.0)
        ],
    )
        .prop_flat_map(|(bin_len, count, layer_id, scale)| {
            let element_count = count.min(bin_len * 6);
            let bins = element_count.div_ceil(bin_len);
            let per_bin: Vec<_> = (0..bins)
                .map(|b| {
                    let extent = (element_count - b * bin_len).min(bin_len);
                    prop::collection::btree_map(
                        0..extent as u16,
                        any::<bool>(),
                        0..=extent.min(255),
                    )
                })
                .collect();
            (Just((bin_len, element_count, layer_id, scale)), per_bin)
        })
        .prop_map(
            |((bin_len, element_count, layer_id, scale), per_bin)| PackedLayer {
                layer_id,
                element_count,
                bin_len,
                scale,
                bins: per_bin
                    .into_iter()
                    .map(|m| {
                        m.into_iter()
                            .map(|(index, neg)| Entry {
                                index,
                                code: if neg { Code::Minus } else { Code::Plus },
                            })
                            .collect()
                    })
                    .collect(),
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn roundtrip(p in arb_pack()) {
        let e = wire::encode(&p).unwrap();
        prop_assert_eq!(e.declared_bits(), wire::payload_bits(&p));
        let back = wire::decode(&e).unwrap();
        prop_assert_eq!(back.scale.to_bits(), p.scale.to_bits());
        prop_assert_eq!(back, p);
    }

    #[test]
    fn truncation_is_detected(p in arb_pack(), cut in any::<prop::sample::Index>()) {
        let e = wire::encode(&p).unwrap();
        let len = cut.index(e.bytes.len());
        let short = EncodedLayer { bytes: e.bytes[..len].to_vec() };
        prop_assert!(wire::decode(&short).is_err());
    }

    #[test]
    fn sparse_and_onebit_layouts_roundtrip(values in prop::collection::vec(-10.0f32..10.0, 1..400), pi in 0.001f64..1.0) {
        let n = values.len();
        let dw = GradientVector::new(4, values).unwrap();
        let p = topk_pack(&mut CodecState::new(n).unwrap(), &dw, pi).unwrap();
        let bytes = wire::encode_sparse(&p).unwrap();
        prop_assert_eq!(wire::decode_sparse(&bytes, 4, n).unwrap(), p);

        let p = onebit_pack(&mut CodecState::new(n).unwrap(), &dw).unwrap();
        let bytes = wire::encode_onebit(&p);
        prop_assert_eq!(bytes.len(), 8 + n.div_ceil(8));
        prop_assert_eq!(wire::decode_onebit(&bytes, 4, n).unwrap(), p);
    }
}

fn entry(index: u16, code: Code) -> Entry {
    Entry { index, code }
}

#[test]
fn fixture_empty_pack_two_bins() {
    let p = PackedLayer::empty(1, 8, 4);
    let bytes = wire::encode(&p).unwrap().bytes;
    assert_eq!(bytes.len(), HEADER_BYTES + 2);
    assert_eq!(&bytes[HEADER_BYTES..], &[0x00, 0x00]);
    assert_eq!(
        &bytes[..HEADER_BYTES],
        &[0x01, 0x00, 0x08, 0x00, 0x00, 0x00, 0x04, 0x00, 0x00, 0x00, 0x00, 0x00]
    );
    assert_eq!(wire::decode_bytes(&bytes).unwrap(), p);
}

#[test]
fn fixture_codec_example_body() {
    let p = PackedLayer {
        layer_id: 0,
        element_count: 4,
        bin_len: 4,
        scale: 0.6,
        bins: vec![vec![
            entry(0, Code::Plus),
            entry(1, Code::Minus),
            entry(2, Code::Plus),
        ]],
    };
    let bytes = wire::encode(&p).unwrap().bytes;
    assert_eq!(&bytes[HEADER_BYTES..], &[0x03, 0x01, 0x06, 0x09]);
    assert_eq!(&bytes[8..12], &0.6f32.to_le_bytes());
    assert_eq!(wire::decode_bytes(&bytes).unwrap(), p);
}

#[test]
fn fixture_wide_entry() {
    let p = PackedLayer {
        layer_id: 2,
        element_count: 500,
        bin_len: 500,
        scale: 1.0,
        bins: vec![vec![entry(300, Code::Minus)]],
    };
    let bytes = wire::encode(&p).unwrap().bytes;
    assert_eq!(&bytes[HEADER_BYTES..], &[0x01, 0xB2, 0x04]);
    assert_eq!(wire::decode_bytes(&bytes).unwrap(), p);
}

#[test]
fn invalid_code_bits_are_rejected() {
    let mut p = PackedLayer::empty(0, 4, 4);
    p.scale = 1.0;
    p.bins[0].push(entry(1, Code::Plus));
    let mut bytes = wire::encode(&p).unwrap().bytes;
    let last = bytes.len() - 1;
    bytes[last] = (1 << 2) | 0b11;
    assert!(matches!(
        wire::decode_bytes(&bytes),
        Err(Error::CorruptEntry { .. })
    ));
    bytes[last] = 1 << 2;
    assert!(matches!(
        wire::decode_bytes(&bytes),
        Err(Error::CorruptEntry { .. })
    ));
}

#[test]
fn oversized_inputs_are_rejected() {
    let mut p = PackedLayer::empty(0, 300, 300);
    p.bins[0] = (0..256).map(|i| entry(i, Code::Plus)).collect();
    assert!(matches!(
        wire::encode(&p),
        Err(Error::BinOverflow { count: 256, .. })
    ));

    let p = PackedLayer::empty(0, 20000, 20000);
    assert!(matches!(
        wire::encode(&p),
        Err(Error::IndexWidthExceeded(20000))
    ));
}

#[test]
fn rate_arithmetic() {
    assert_eq!(wire::effective_compression_rate(50, 5 * 8), 40.0);
    assert_eq!(wire::effective_compression_rate(500, 5 * 16), 200.0);
    assert_eq!(wire::effective_compression_rate(100, 3200), 1.0);
}
