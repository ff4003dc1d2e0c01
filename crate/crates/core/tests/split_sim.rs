use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimsplit::codec;
use slimsplit::data::{gen_dataset, SyntheticDatasetSpec};
use slimsplit::report;
use slimsplit::sim::{self, choose_alpha, simulate_inference, Budget, BottleneckCost, NetworkModel, SimError};
use slimsplit::slim::{Segment, WidthMultiplier, WidthSet};
use slimsplit::zoo::{build_student, build_teacher, BottleneckSpec, CompressorVariant, ConfigMode, SplitStudent, StudentOptions, GRID};

fn student(mode: ConfigMode, variant: CompressorVariant) -> SplitStudent {
    let teacher = build_teacher(11);
    build_student(&teacher, BottleneckSpec::new(48, variant).unwrap(), WidthSet::default(), mode, StudentOptions::default()).unwrap()
}

/// Bytes on the wire for `c` active channels, straight from the header
/// size and the bit-packing rule.
fn wire_bytes(c: usize, bits: u8) -> usize {
    34 + (c * GRID * GRID * bits as usize).div_ceil(8)
}

/// Active count: ceil(α·c), at least one channel.
fn active(alpha: WidthMultiplier, c_max: usize) -> usize {
    (alpha.numer() as usize * c_max).div_ceil(alpha.denom() as usize).max(1)
}

fn client_mac(s: &SplitStudent, alpha: WidthMultiplier) -> u64 {
    let r = s.mac_report(alpha);
    r.segment_total(Segment::Encoder) + r.segment_total(Segment::Compressor)
}

#[test]
fn controller_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let widths = WidthSet::default();
    let s = student(ConfigMode::FullConfig, CompressorVariant::SruCru);
    let costs: Vec<(WidthMultiplier, u64)> = widths.iter().map(|a| (a, client_mac(&s, a))).collect();
    let (mac_lo, mac_hi) = (costs[0].1, costs.last().unwrap().1);
    let mut infeasible = 0;
    for i in 0..1000 {
        let bits = rng.random_range(codec::MIN_BITS..=codec::MAX_BITS);
        let max_bytes = rng.random_bool(0.8).then(|| rng.random_range(0..3500usize));
        let max_mac = match max_bytes {
            None => Some(rng.random_range(mac_lo / 2..mac_hi * 2)),
            Some(_) => rng.random_bool(0.5).then(|| rng.random_range(mac_lo / 2..mac_hi * 2)),
        };
        let budget = Budget::new(max_bytes, max_mac).unwrap();

        let brute = costs
            .iter()
            .filter(|(a, mac)| {
                max_bytes.is_none_or(|m| wire_bytes(active(*a, 48), bits) <= m) && max_mac.is_none_or(|m| *mac <= m)
            })
            .map(|(a, _)| *a)
            .max();

        match (choose_alpha(&widths, &s, bits, &budget), brute) {
            (Ok(a), Some(b)) => assert_eq!(a, b, "budget {i}: {budget:?} bits {bits}"),
            (Err(SimError::InfeasibleBudget { min_bytes, min_mac }), None) => {
                infeasible += 1;
                assert_eq!(min_bytes, wire_bytes(active(widths.min(), 48), bits));
                assert_eq!(min_mac, mac_lo);
            }
            (got, want) => panic!("budget {i}: controller {got:?}, brute force {want:?}"),
        }

        // the bandwidth-only cost model agrees whenever only bytes are bounded
        if max_mac.is_none() {
            let plain = choose_alpha(&widths, &BottleneckCost::new(48), bits, &budget).ok();
            assert_eq!(plain, brute);
        }
    }
    assert!(infeasible > 20 && infeasible < 900, "{infeasible} infeasible budgets");
}

#[test]
fn latency_is_additive_and_deterministic() {
    let s = student(ConfigMode::FullConfig, CompressorVariant::LastLayerPair);
    let ds = gen_dataset(&SyntheticDatasetSpec::with_sizes(1, 2), 4).unwrap();
    let (image, _) = ds.val.batch(0, 2).unwrap();
    let image = image.cast::<f32>();
    let net = NetworkModel::new(31_060.0, 0.05).unwrap();
    for alpha in WidthSet::default().iter() {
        let a = simulate_inference(&s, &image, alpha, 8, &net, 1e9).unwrap();
        assert_eq!(a.total, a.encode_time + a.transfer_time);
        assert_eq!(a.encoder_mac, 2 * client_mac(&s, alpha));
        assert_eq!(a.encode_time, a.encoder_mac as f64 / 1e9);
        let packet = 34 + (2 * active(alpha, 48) * GRID * GRID * 8).div_ceil(8);
        assert_eq!(a.packet_bytes, packet);
        assert_eq!(a.transfer_time, packet as f64 / 31_060.0 + 0.05);
        assert_eq!(a.output.shape().n, 2);
        assert_eq!(simulate_inference(&s, &image, alpha, 8, &net, 1e9).unwrap(), a);
    }
    assert!(matches!(simulate_inference(&s, &image, WidthMultiplier::FULL, 8, &net, 0.0), Err(SimError::ComputeRate(_))));
}

#[test]
fn halving_width_cuts_encode_time_roughly_fourfold() {
    let s = student(ConfigMode::FullConfig, CompressorVariant::LastLayerPair);
    let half = client_mac(&s, WidthMultiplier::new(1, 2).unwrap()) as f64;
    let full = client_mac(&s, WidthMultiplier::FULL) as f64;
    let ratio = full / half;
    assert!(ratio > 3.0 && ratio <= 4.0, "ratio {ratio}");

    let b = student(ConfigMode::BandwidthOnly, CompressorVariant::LastLayerPair);
    // only the compressor output shrinks when just the bottleneck is slimmed
    let h = WidthMultiplier::new(1, 2).unwrap();
    let enc = |a| b.mac_report(a).segment_total(Segment::Encoder);
    assert_eq!(enc(h), enc(WidthMultiplier::FULL));
    let ratio = client_mac(&b, WidthMultiplier::FULL) as f64 / client_mac(&b, h) as f64;
    assert!(ratio < 1.5, "bandwidth-only ratio {ratio}");
}

#[test]
fn sweep_is_pure_and_costs_recompute() {
    let s = student(ConfigMode::FullConfig, CompressorVariant::SruCru);
    let ds = gen_dataset(&SyntheticDatasetSpec::with_sizes(1, 6), 5).unwrap();
    let widths = WidthSet::default();
    let hash = s.weight_hash();
    let storage = s.storage_bytes();
    let points = sim::sweep(&s, &ds.val, &widths, &[8, 4]).unwrap();
    assert_eq!(s.weight_hash(), hash);
    assert_eq!(s.storage_bytes(), storage);
    assert_eq!(points.len(), 10);

    let mut expected_order = Vec::new();
    for bits in [4u8, 8] {
        for a in widths.iter() {
            expected_order.push((bits, a));
        }
    }
    assert_eq!(points.iter().map(|p| (p.bits, p.alpha)).collect::<Vec<_>>(), expected_order);
    for p in &points {
        assert_eq!(p.payload_bytes, wire_bytes(active(p.alpha, 48), p.bits));
        assert_eq!(p.encoder_mac, client_mac(&s, p.alpha));
        assert!((0.0..=1.0).contains(&p.toy_ap));
    }
    for pair in points.windows(2).filter(|w| w[0].bits == w[1].bits) {
        assert!(pair[0].payload_bytes < pair[1].payload_bytes);
    }

    let csv = report::to_csv(&points).unwrap();
    assert_eq!(csv, report::to_csv(&sim::sweep(&s, &ds.val, &widths, &[4, 8]).unwrap()).unwrap());
    assert!(csv.starts_with("alpha,bits,payload_bytes,encoder_mac,toy_ap\n"));
    assert_eq!(csv.lines().count(), 11);
}
