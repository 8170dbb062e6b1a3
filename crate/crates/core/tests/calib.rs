mod common;

use common::oracles::{self, OracleReport, BINS};
use common::{normal_vec, random_histogram, rng};
use proptest::prelude::*;
use quantkit::calib::{
    calibrate, collect_histograms, kl_divergence, level_count, merge_and_expand, minmax_scale, sweep_scale,
    CalibConfig, CalibrationProfile, Granularity, Histogram, NUM_BINS,
};
use quantkit::graph::{conv_relu_chain, toy_resnet, Signedness};
use quantkit::nnexec::make_toy_dataset;
use quantkit::quantize::plan_placement;
use quantkit::{Error, Tensor};
use rand::Rng;

#[test]
fn uniform_activations_match_recount() {
    let mut r = rng(11);
    let values: Vec<f32> = (0..50_000).map(|_| r.random_range(-3.0f32..3.0)).collect();
    let h = Histogram::from_values(&values);
    let expect = oracles::oracle_histogram(&values, h.max_value);
    assert_eq!(h.bins, expect);
    assert_eq!(h.total, expect.iter().sum::<u64>());
}

#[test]
fn distributions_match_step_by_step_oracle() {
    let mut report = OracleReport::default();
    for seed in 0..20 {
        let h = random_histogram(seed);
        for j in [128, 129, 200, 255, 1000, 2047, 2048] {
            let (p, q) = merge_and_expand(&h, j, 128).unwrap();
            let (po, qo) = oracles::oracle_distributions(&h.bins, j, 128);
            for i in 0..BINS {
                for (a, b) in [(p[i], po[i]), (q[i], qo[i])] {
                    let (abs, _) = report.compare(|| format!("seed {seed} j {j} bin {i}"), b, a, 1.0);
                    if abs > 1e-12 {
                        report.fail(format!("seed {seed} j {j} bin {i}: {a} vs {b}"));
                    }
                }
            }
            assert!(p[j..].iter().chain(&q[j..]).all(|&v| v == 0.0));
        }
    }
    assert!(report.ok(), "{report:?}");
}

#[test]
fn candidate_below_levels_rejected() {
    let h = random_histogram(1);
    assert!(matches!(merge_and_expand(&h, 127, 128), Err(Error::Validation(_))));
}

/// Compensated summation of `p ln(p / q)`.
fn kahan_kl(p: &[f64], q: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            let y = a * (a / b).ln() - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
    }
    sum
}

#[test]
fn kl_matches_compensated_sum() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let n = r.random_range(2..4096);
        let mut p: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let mut q: Vec<f64> = (0..n).map(|_| r.random::<f64>() + 1e-3).collect();
        let (zp, zq): (f64, f64) = (p.iter().sum(), q.iter().sum());
        p.iter_mut().for_each(|v| *v /= zp);
        q.iter_mut().for_each(|v| *v /= zq);
        let got = kl_divergence(&p, &q).unwrap();
        assert!((got - kahan_kl(&p, &q)).abs() < 1e-10, "seed {seed}");
        assert!(got >= 0.0);
    }
}

#[test]
fn sweep_matches_brute_force_oracle() {
    // The full 1000-histogram run lives in the acceptance suite.
    for seed in 0..25 {
        let h = random_histogram(10_000 + seed);
        for levels in [128, 255] {
            let curve = oracles::oracle_kl_curve(&h.bins, levels);
            for t in [1.0, 1.1, 1.3] {
                let (id_min, id_opt, scale) = oracles::oracle_select(&curve, levels, t, h.max_value);
                let (s, c) = sweep_scale(&h, t, levels).unwrap();
                assert_eq!((c.id_min, c.id_opt), (id_min, id_opt), "seed {seed} L {levels} T {t}");
                assert!((s - scale).abs() <= 1e-12 * scale);
            }
        }
    }
}

#[test]
fn delta_mass_selects_the_last_candidate() {
    for k in [128, 700, 2047] {
        let mut bins = vec![0u64; NUM_BINS];
        bins[k] = 1000;
        let (id_min, id_opt, _) = oracles::oracle_kl_sweep(&bins, 4.0, 1.0, 128);
        let h = Histogram::from_bins(bins, 4.0).unwrap();
        let (_, c) = sweep_scale(&h, 1.0, 128).unwrap();
        assert_eq!(id_opt, 2048);
        assert_eq!((c.id_min, c.id_opt), (id_min, id_opt));
        assert!(c.candidates().filter(|&(j, _)| j > k).all(|(_, v)| v == 0.0));
    }
}

#[test]
fn unique_minimum_at_unit_tolerance() {
    let h = random_histogram(77);
    let (s, c) = sweep_scale(&h, 1.0, 128).unwrap();
    let at_min = c.candidates().filter(|&(_, v)| v == c.kl_min).count();
    if at_min == 1 {
        assert_eq!(c.id_opt, c.id_min);
    }
    assert_eq!(s, (c.id_opt as f64 + 0.5) * h.bin_width / 128.0);
    assert!(matches!(sweep_scale(&Histogram::empty(1.0), 1.3, 128), Err(Error::DegenerateSite { .. })));
}

#[test]
fn large_tolerance_approaches_minmax() {
    for seed in 0..10 {
        let h = random_histogram(seed);
        let (s, c) = sweep_scale(&h, 1e12, 128).unwrap();
        assert_eq!(c.id_opt, NUM_BINS);
        let minmax = h.max_value / 128.0;
        assert!((s - minmax).abs() / minmax < 1e-3);
    }
}

fn trained_free_resnet_profile(t: f64) -> (CalibrationProfile, quantkit::ModelGraph) {
    let data = make_toy_dataset(3, 10, 8, 8).unwrap();
    let g = plan_placement(&toy_resnet(&Default::default()));
    let cfg = CalibConfig { tolerance: t, batches: 2, batch_size: 16, ..Default::default() };
    (calibrate(&g, &data.train, &cfg).unwrap(), g)
}

#[test]
fn profile_equals_site_by_site_sweep() {
    let data = make_toy_dataset(3, 10, 8, 8).unwrap();
    let (profile, g) = trained_free_resnet_profile(1.3);
    let planned: Vec<_> = g.quant_sites.iter().filter(|s| s.quantize).collect();
    assert_eq!(profile.sites.len(), planned.len());
    let ids: Vec<String> = planned.iter().map(|s| s.site_id()).collect();
    let hists = collect_histograms(&g, &data.train, 2, 16, &ids).unwrap();
    for s in planned {
        let id = s.site_id();
        let levels = level_count(8, s.signedness);
        let h = &hists[&id];
        let (id_min, id_opt, scale) = oracles::oracle_kl_sweep(&h.bins, h.max_value, 1.3, levels);
        let got = &profile.sites[&id];
        assert_eq!((got.curve.id_min, got.curve.id_opt), (id_min, id_opt), "{id}");
        assert_eq!(got.params.scales, vec![scale as f32]);
        assert_eq!(got.params.signedness, s.signedness);
    }
}

#[test]
fn histograms_are_pooled_over_batches() {
    let data = make_toy_dataset(4, 10, 8, 8).unwrap();
    let g = plan_placement(&toy_resnet(&Default::default()));
    let site = vec!["stem.conv:0".to_string()];
    let hists = collect_histograms(&g, &data.train, 3, 10, &site).unwrap();
    // The stem conv reads the raw input: recount every value of the three batches.
    let mut values = Vec::new();
    for i in 0..30 {
        values.extend_from_slice(data.train.samples[i % data.train.len()].0.as_f32().unwrap());
    }
    let h = &hists["stem.conv:0"];
    assert_eq!(h.max_value, values.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64);
    assert_eq!(h.bins, oracles::oracle_histogram(&values, h.max_value));
}

#[test]
fn larger_tolerance_never_shrinks_a_scale() {
    let (p1, _) = trained_free_resnet_profile(1.0);
    let (p13, _) = trained_free_resnet_profile(1.3);
    for (id, s) in &p1.sites {
        assert!(p13.sites[id].params.scales[0] >= s.params.scales[0], "{id}");
    }
}

#[test]
fn single_relu_site_profile() {
    let data = make_toy_dataset(1, 3, 5, 5).unwrap();
    // conv_relu_chain has a 2-channel 5x5 input; rebuild samples to match.
    let samples = data
        .train
        .samples
        .iter()
        .map(|(x, l)| (Tensor::from_f32(vec![2, 5, 5], x.as_f32().unwrap()[..50].to_vec()).unwrap(), *l))
        .collect();
    let set = quantkit::nnexec::Dataset::new(samples, 3).unwrap();
    let mut g = plan_placement(&conv_relu_chain(0));
    // Only the ReLU edge stays quantized.
    g.quant_sites.iter_mut().filter(|s| s.edge.0 != "relu").for_each(|s| s.quantize = false);
    let profile = calibrate(&g, &set, &CalibConfig { batches: 2, batch_size: 4, ..Default::default() }).unwrap();
    assert_eq!(profile.sites.len(), 1);
    assert_eq!(profile.sites["conv2:0"].params.signedness, Signedness::Unsigned);
}

#[test]
fn profile_json_and_kl_dump() {
    let (profile, _) = trained_free_resnet_profile(1.3);
    let back = CalibrationProfile::from_json(&profile.to_json().unwrap()).unwrap();
    for (id, s) in &profile.sites {
        assert_eq!(back.sites[id].params, s.params);
        assert_eq!(back.sites[id].curve.id_opt, s.curve.id_opt);
    }
    let dir = tempfile::tempdir().unwrap();
    let files = profile.write_kl_csv(dir.path()).unwrap();
    assert_eq!(files.len(), profile.sites.len());
    for (f, s) in files.iter().zip(profile.sites.values()) {
        let text = std::fs::read_to_string(f).unwrap();
        let levels = s.params.levels();
        assert_eq!(text.lines().count(), 1 + NUM_BINS - levels + 1);
    }
}

#[test]
fn invalid_calib_config_rejected() {
    for cfg in [
        CalibConfig { tolerance: 0.5, ..Default::default() },
        CalibConfig { batches: 0, ..Default::default() },
        CalibConfig { bits: 9, ..Default::default() },
        CalibConfig { bits: 1, ..Default::default() },
    ] {
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn curve_invariants_and_monotonicity(seed in 0u64..100_000, t in 1.0f64..3.0, dt in 0.0f64..2.0) {
        let h = random_histogram(seed);
        let (s1, c1) = sweep_scale(&h, t, 128).unwrap();
        let (s2, c2) = sweep_scale(&h, t + dt, 128).unwrap();
        prop_assert!(c1.id_opt >= c1.id_min);
        prop_assert!(c1.at(c1.id_opt) <= t * c1.kl_min);
        prop_assert!(c1.candidates().filter(|&(j, _)| j > c1.id_opt).all(|(_, v)| v > t * c1.kl_min));
        prop_assert!(c2.id_opt >= c1.id_opt && s2 >= s1);
    }

    #[test]
    fn channel_scales_bounded_by_layer_scale(seed in 0u64..10_000, o in 1usize..8, per in 1usize..40, bits in 2u8..9) {
        let mut r = rng(seed);
        let w = Tensor::from_f32(vec![o, per], normal_vec(&mut r, o * per, 1.0)).unwrap();
        let lw = minmax_scale(&w, bits, Granularity::LayerWise).unwrap();
        let cw = minmax_scale(&w, bits, Granularity::ChannelWise).unwrap();
        prop_assert_eq!(cw.scales.len(), o);
        prop_assert!(cw.scales.iter().all(|&s| s <= lw.scales[0]));
    }

    #[test]
    fn unsigned_scale_is_smaller(seed in 0u64..10_000, bits in 2u8..9, t in 1.0f64..2.0) {
        // Same clipping range: the signed calibration threshold, mapped onto both level counts.
        let h = random_histogram(seed);
        let (lu, ls) = (level_count(bits, Signedness::Unsigned), level_count(bits, Signedness::Signed));
        let (ss, c) = sweep_scale(&h, t, ls).unwrap();
        let threshold = (c.id_opt as f64 + 0.5) * h.bin_width;
        let su = threshold / lu as f64;
        prop_assert!((ss - threshold / ls as f64).abs() <= 1e-12 * ss);
        prop_assert!(su < ss);
        prop_assert_eq!(lu, 2 * ls - 1);
    }
}
