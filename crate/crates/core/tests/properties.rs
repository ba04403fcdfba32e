use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use whalefl::data::{partition_noniid, synth_blobs};
use whalefl::fisher::FisherHistory;
use whalefl::nn::{Arch, Model};
use whalefl::scheduler::{cap, quantize, select, ClientView, SchedulerParams, UtilityTerms};
use whalefl::subnet::{
    aggregate, dropout_mask, embed, extract, rolling_mask, width_mask, LevelSpec, Mask, MaskKind,
    SubModel,
};
use whalefl::sysmodel::{compute_delay, tx_delay, CostConfig};

fn arch_strategy() -> impl Strategy<Value = Arch> {
    (
        1usize..6,
        prop::collection::vec(1usize..12, 1..4),
        2usize..5,
    )
        .prop_map(|(d, hidden, k)| {
            let mut w = vec![d];
            w.extend(hidden);
            w.push(k);
            Arch::relu(&w).unwrap()
        })
}

fn mask_for(arch: &Arch, kind: u8, level: usize, seed: u64) -> Mask {
    let spec = LevelSpec::default();
    match kind % 3 {
        0 => width_mask(arch, level, &spec).unwrap(),
        1 => dropout_mask(arch, level, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap(),
        _ => rolling_mask(arch, level, &spec, seed as usize).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn masks_have_the_level_size(arch in arch_strategy(), kind in 0u8..3, level in 1usize..=5, seed in 0u64..1000) {
        let spec = LevelSpec::default();
        let m = mask_for(&arch, kind, level, seed);
        let hidden = arch.hidden_widths();
        for (i, &h) in hidden.iter().enumerate() {
            let kept = m.kept(i + 1);
            prop_assert_eq!(kept.len(), spec.kept_width(h, level));
            prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(kept.iter().all(|&j| j < h));
        }
        prop_assert_eq!(m.kept(0).len(), arch.input_dim());
        prop_assert_eq!(m.kept(hidden.len() + 1).len(), arch.class_count());
    }

    #[test]
    fn width_masks_nest_across_levels(arch in arch_strategy(), level in 1usize..5) {
        let spec = LevelSpec::default();
        let big = width_mask(&arch, level, &spec).unwrap();
        let small = width_mask(&arch, level + 1, &spec).unwrap();
        prop_assert!(small.is_subset_of(&big));
        prop_assert!(small.param_count() <= big.param_count());
    }

    #[test]
    fn extract_then_embed_is_identity(arch in arch_strategy(), kind in 0u8..3, level in 1usize..=5, seed in 0u64..1000) {
        let global = Model::init(&arch, seed);
        let m = mask_for(&arch, kind, level, seed);
        let sub = extract(&global, &m).unwrap();
        prop_assert_eq!(sub.model.param_count(), m.param_count());
        let mut copy = global.clone();
        embed(&sub, &mut copy).unwrap();
        prop_assert_eq!(copy, global);
    }

    #[test]
    fn aggregating_unchanged_submodels_keeps_the_model(
        arch in arch_strategy(),
        picks in prop::collection::vec((0u8..3, 1usize..=5, 0u64..1000), 0..6),
    ) {
        let global = Model::init(&arch, 9);
        let subs: Vec<SubModel> = picks
            .iter()
            .map(|&(k, l, s)| extract(&global, &mask_for(&arch, k, l, s)).unwrap())
            .collect();
        let out = aggregate(&global, &subs).unwrap();
        for (a, b) in out.flatten().iter().zip(global.flatten()) {
            prop_assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn aggregate_stays_within_the_range_of_covering_values(
        arch in arch_strategy(),
        picks in prop::collection::vec((0u8..3, 1usize..=5, 0u64..1000), 1..6),
    ) {
        let global = Model::zeros(&arch);
        let subs: Vec<SubModel> = picks
            .iter()
            .enumerate()
            .map(|(i, &(k, l, s))| {
                let mut sub = extract(&global, &mask_for(&arch, k, l, s)).unwrap();
                for layer in sub.model.layers_mut() {
                    layer.weight.fill(i as f64 + 1.0);
                    layer.bias.fill(i as f64 + 1.0);
                }
                sub
            })
            .collect();
        let out = aggregate(&global, &subs).unwrap();
        let hi = subs.len() as f64;
        for v in out.flatten() {
            prop_assert!(v == 0.0 || (1.0..=hi).contains(&v));
        }
    }

    #[test]
    fn te_scales_linearly(fi in prop::collection::vec(0.0f64..50.0, 12), lambda in 0.0f64..10.0) {
        let mut a = FisherHistory::new(3, 4, 4).unwrap();
        let mut b = FisherHistory::new(3, 4, 4).unwrap();
        for (r, chunk) in fi.chunks(3).enumerate() {
            a.record_round(r + 1, chunk.to_vec()).unwrap();
            b.record_round(r + 1, chunk.iter().map(|v| v * lambda).collect()).unwrap();
        }
        let (ta, tb) = (a.training_efficiency(5), b.training_efficiency(5));
        prop_assert!(ta >= 0.0);
        prop_assert!((tb - lambda * ta).abs() <= 1e-9 * (1.0 + tb.abs()));
    }

    #[test]
    fn te_is_monotone_in_each_trace(fi in prop::collection::vec(0.0f64..50.0, 6), which in 0usize..6, bump in 0.0f64..20.0) {
        let build = |v: &[f64]| {
            let mut h = FisherHistory::new(2, 3, 3).unwrap();
            for (r, chunk) in v.chunks(2).enumerate() {
                h.record_round(r + 1, chunk.to_vec()).unwrap();
            }
            h.training_efficiency(4)
        };
        let mut up = fi.clone();
        up[which] += bump;
        prop_assert!(build(&up) >= build(&fi));
    }

    #[test]
    fn quantize_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0, levels in 1usize..8) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(quantize(hi, levels).unwrap() <= quantize(lo, levels).unwrap());
    }

    #[test]
    fn cap_never_exceeds_device_maximum(level in 1usize..=5, max in 1usize..=5) {
        let c = cap(level, max, 5).unwrap();
        prop_assert!(c >= max && c >= level);
        prop_assert!(c == level || c == max);
    }

    #[test]
    fn more_te_or_se_never_shrinks_the_choice(
        fi in 0.01f64..10.0, extra in 0.0f64..10.0, tx in 0.01f64..1.0, faster in 1.0f64..4.0, cap_level in 1usize..=5,
    ) {
        let params = SchedulerParams { beta: 2.0, round_seconds: 1.0, u_threshold: 30.0, levels: LevelSpec::default() };
        let hist = |v: f64| {
            let mut h = FisherHistory::new(1, 10, 10).unwrap();
            h.record_round(1, vec![v]).unwrap();
            h
        };
        let view = ClientView { client: 0, cap_level, unit_tx_seconds: tx, unit_compute_seconds: tx };
        let quick = ClientView { unit_tx_seconds: tx / faster, unit_compute_seconds: tx / faster, ..view };
        let base = select(&view, &hist(fi), 2, &params, UtilityTerms::Both, Some(1)).unwrap();
        let more_te = select(&view, &hist(fi + extra), 2, &params, UtilityTerms::Both, Some(1)).unwrap();
        let more_se = select(&quick, &hist(fi), 2, &params, UtilityTerms::Both, Some(1)).unwrap();
        prop_assert!(more_te.level <= base.level);
        prop_assert!(more_se.level <= base.level);
        prop_assert!(base.level >= cap_level);
        prop_assert!((0.0..=1.0).contains(&base.u_n));
    }

    #[test]
    fn delays_grow_with_work(p in 1u64..1_000_000, extra in 1u64..1000, rate in 1e5f64..1e8, mult in 0.1f64..1.0) {
        let cost = CostConfig::default();
        prop_assert!(tx_delay(p + extra, rate, &cost).unwrap() > tx_delay(p, rate, &cost).unwrap());
        let a = compute_delay(p, 3, 8, 1e8, mult).unwrap();
        let b = compute_delay(p + extra, 3, 8, 1e8, mult).unwrap();
        prop_assert!(b > a && a > 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partitions_are_disjoint_covers_with_sigma_classes(
        k in 2usize..8, m in 1usize..12, sigma_pick in 0usize..8, seed in 0u64..100,
    ) {
        let sigma = 1 + sigma_pick % k;
        prop_assume!((m * sigma) % k == 0);
        let ds = synth_blobs(k, 3 * m, 3, 0.5, seed).unwrap();
        let p = partition_noniid(&ds, m, sigma, seed).unwrap();
        let mut seen = vec![false; ds.len()];
        for idx in &p.clients {
            let mut classes: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
            classes.sort_unstable();
            classes.dedup();
            prop_assert_eq!(classes.len(), sigma);
            for &i in idx {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }
}

#[test]
fn dropout_keeps_each_neuron_at_the_expected_rate() {
    let arch = Arch::relu(&[3, 16, 2]).unwrap();
    let spec = LevelSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = 20_000;
    let mut counts = [0usize; 16];
    for _ in 0..draws {
        let m = dropout_mask(&arch, 3, &spec, &mut rng).unwrap();
        assert_eq!(m.kind(), MaskKind::Dropout);
        for &j in m.kept(1) {
            counts[j] += 1;
        }
    }
    // 4 of 16 kept: rate 1/4, binomial sd ≈ 0.003
    for c in counts {
        let rate = c as f64 / draws as f64;
        assert!((rate - 0.25).abs() < 0.015, "rate {rate}");
    }
}

#[test]
fn rolling_window_covers_every_neuron_once_per_cycle() {
    let arch = Arch::relu(&[3, 10, 2]).unwrap();
    let spec = LevelSpec::default();
    let mut counts = [0usize; 10];
    for round in 0..10 {
        for &j in rolling_mask(&arch, 2, &spec, round).unwrap().kept(1) {
            counts[j] += 1;
        }
    }
    // 5 of 10 kept each round, so every neuron appears 5 times in 10 rounds
    assert_eq!(counts, [5; 10]);
}
