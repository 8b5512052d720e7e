use eaft_core::landscape::*;
use proptest::prelude::*;

fn record_strategy() -> impl Strategy<Value = TokenRecord> {
    (
        0usize..1000,
        0usize..64,
        1e-9f64..1.0,
        prop::option::of(0.0f64..5.0),
        0.0f64..3.0,
        0.0f64..=1.0,
        prop::option::of(0.0f64..1.0),
        prop::option::of(0u64..100),
        prop::option::of("[a-z ,\"]{0,6}"),
    )
        .prop_map(|(pos, tok, p, hf, ht, g, gn, step, text)| TokenRecord {
            source_id: format!("s{}", pos % 7),
            position: pos as u64,
            token_id: tok as u64,
            token_text: text,
            p_target: p,
            entropy_full: hf,
            entropy_topk: ht,
            gate: g,
            weight: Some(g),
            grad_norm: gn,
            step,
        })
}

proptest! {
    #[test]
    fn quadrants_partition_every_record(recs in prop::collection::vec(record_strategy(), 1..200), q in 0.05f64..0.95) {
        let s = quadrant_stats(&recs, q, EntropyAxis::Gate).unwrap();
        prop_assert_eq!(s.labels.len(), recs.len());
        prop_assert_eq!(s.counts.iter().sum::<usize>(), recs.len());
        prop_assert!((s.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_conserves_records(recs in prop::collection::vec(record_strategy(), 1..200), bins in 1usize..12) {
        let h = histogram2d(&recs, &HistogramSpec::new(Axis::Gate, Axis::PTarget, bins)).unwrap();
        prop_assert_eq!(h.total(), recs.len() as u64);
    }

    #[test]
    fn jsonl_round_trip_is_lossless(recs in prop::collection::vec(record_strategy(), 0..50)) {
        let mut buf = Vec::new();
        write_records(&recs, &mut buf).unwrap();
        let back = read_records(std::io::Cursor::new(buf)).unwrap();
        prop_assert_eq!(back, recs);
    }
}
