use std::net::IpAddr;

use proptest::prelude::*;

use etbert_core::capture::{CleanPacket, FiveTuple, Protocol, Timestamp};
use etbert_core::corpus::{apply_mask, MaskKind, MaskingConfig};
use etbert_core::flow::{assemble_flows, burst_bytes, generate_bursts, split_half};
use etbert_core::metrics::{confusion, macro_report};
use etbert_core::seed;
use etbert_core::token::{build_pair_sequence, TokenId, VOCAB_SIZE};

fn packets(dirs: &[bool], sizes: &[usize]) -> Vec<CleanPacket> {
    let fwd = FiveTuple {
        src_addr: IpAddr::from([10, 0, 0, 1]),
        src_port: 5000,
        dst_addr: IpAddr::from([10, 0, 0, 2]),
        dst_port: 80,
        protocol: Protocol::Tcp,
    };
    dirs.iter()
        .zip(sizes)
        .enumerate()
        .map(|(i, (&d, &n))| CleanPacket {
            five_tuple: if d { fwd } else { fwd.reversed() },
            timestamp: Timestamp::new(10, i as u32),
            datagram: vec![i as u8; n],
            source_index: i as u64,
        })
        .collect()
}

proptest! {
    #[test]
    fn bursts_partition_and_alternate(spec in prop::collection::vec((any::<bool>(), 0usize..20), 1..60)) {
        let (dirs, sizes): (Vec<bool>, Vec<usize>) = spec.into_iter().unzip();
        let pk = packets(&dirs, &sizes);
        let flows = assemble_flows(pk.clone());
        prop_assert_eq!(flows.len(), 1);
        let bursts = generate_bursts(&flows[0]);
        let total: usize = bursts.iter().map(|b| b.packets.len()).sum();
        prop_assert_eq!(total, dirs.len());
        for w in bursts.windows(2) {
            prop_assert_ne!(w[0].direction, w[1].direction);
        }
        let joined: Vec<u8> = bursts.iter().flat_map(|b| burst_bytes(b)).collect();
        let all: Vec<u8> = pk.iter().flat_map(|p| p.datagram.clone()).collect();
        prop_assert_eq!(joined, all);
    }

    #[test]
    fn halves_rejoin(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        match split_half(&bytes) {
            Ok((a, b)) => {
                prop_assert!(bytes.len() >= 4);
                prop_assert!(a.len() >= b.len() && a.len() - b.len() <= 1);
                prop_assert_eq!([a, b].concat(), bytes);
            }
            Err(_) => prop_assert!(bytes.len() < 4),
        }
    }

    #[test]
    fn masking_touches_only_selected_content(
        a in prop::collection::vec(4u32..VOCAB_SIZE as u32, 1..60),
        b in prop::collection::vec(4u32..VOCAB_SIZE as u32, 1..60),
        s in any::<u64>(),
    ) {
        let a: Vec<TokenId> = a.into_iter().map(TokenId).collect();
        let b: Vec<TokenId> = b.into_iter().map(TokenId).collect();
        let seq = build_pair_sequence(&a, &b, 128).unwrap();
        let ex = apply_mask(&seq, 1, &MaskingConfig::standard(VOCAB_SIZE), &mut seed::rng(s, "p", &[])).unwrap();
        prop_assert!(!ex.mask_positions.is_empty());
        let content = seq.content_positions();
        for (i, (&orig, &now)) in seq.ids.iter().zip(&ex.input.ids).enumerate() {
            match ex.mask_positions.iter().position(|&p| p == i) {
                None => prop_assert_eq!(orig, now),
                Some(k) => {
                    prop_assert!(content.contains(&i));
                    prop_assert_eq!(ex.mask_targets[k], orig);
                    match ex.mask_kinds[k] {
                        MaskKind::Mask => prop_assert_eq!(now, TokenId::MASK),
                        MaskKind::Keep => prop_assert_eq!(now, orig),
                        MaskKind::Random => prop_assert!(now.0 >= 4 && (now.0 as usize) < VOCAB_SIZE),
                    }
                }
            }
        }
    }

    #[test]
    fn macro_scores_are_bounded(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = macro_report(&confusion(&t, &p, 5).unwrap()).unwrap();
        for v in [r.accuracy, r.macro_pr, r.macro_rc, r.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if t == p {
            prop_assert_eq!(r.accuracy, 1.0);
        }
    }
}
