use proptest::prelude::*;

use wmqkd::detection::{merge_many, ModuleId};
use wmqkd::keyrate::{basis_key_fraction, qber_from_visibility, secure_key_from_qber, LinkTemplate};
use wmqkd::{
    analytic_rates, binary_entropy, detect, find_coincidences, merge_detectors, qber, scaling_curve, visibility,
    AnalyticLinkModel, Arrival, Basis, CoincidenceWindow, CountsMatrix, DetectorConfig, Match, Outcome, TimeTag,
    TAGGER_TICK,
};

fn tag(t: i64, id: u32) -> TimeTag {
    TimeTag {
        detector_id: id,
        tick_time: t,
        outcome: if id % 2 == 0 { Outcome::H } else { Outcome::V },
        channel_index: 1,
        dark: false,
    }
}

/// Sorted tag stream on a narrow tick range so that collisions and ties are common.
fn stream(ids: std::ops::Range<u32>, max_len: usize, span: i64) -> impl Strategy<Value = Vec<TimeTag>> {
    prop::collection::vec((0..span, ids), 0..max_len).prop_map(|mut v| {
        v.sort();
        v.into_iter().map(|(t, id)| tag(t, id)).collect()
    })
}

fn brute_matches(a: &[TimeTag], b: &[TimeTag], h: i64) -> Vec<Match> {
    let mut taken = vec![false; b.len()];
    let mut out = Vec::new();
    for (ia, x) in a.iter().enumerate() {
        let mut best: Option<(i64, i64, u32, usize)> = None;
        for (jb, y) in b.iter().enumerate() {
            let d = (y.tick_time - x.tick_time).abs();
            if taken[jb] || d > h {
                continue;
            }
            let key = (d, y.tick_time, y.detector_id, jb);
            if best.map_or(true, |k| key < k) {
                best = Some(key);
            }
        }
        if let Some((.., jb)) = best {
            taken[jb] = true;
            out.push(Match { alice: ia, bob: jb });
        }
    }
    out
}

fn brute_merge(streams: &[&[TimeTag]], dead_ticks: f64) -> Vec<TimeTag> {
    let mut all: Vec<TimeTag> = streams.iter().flat_map(|s| s.iter().copied()).collect();
    all.sort_by_key(|t| (t.tick_time, t.detector_id));
    let mut kept: Vec<TimeTag> = Vec::new();
    for t in all {
        if kept.iter().all(|k| (t.tick_time - k.tick_time) as f64 > dead_ticks) {
            kept.push(t);
        }
    }
    kept
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn coincidences_match_brute_force(a in stream(0..2, 120, 400), b in stream(2..4, 120, 400), tc in 0.0f64..3e-9) {
        let w = CoincidenceWindow { t_c: tc };
        let got = find_coincidences(&a, &b, &w, TAGGER_TICK).unwrap();
        prop_assert_eq!(got, brute_matches(&a, &b, w.half_width_ticks(TAGGER_TICK)));
    }

    #[test]
    fn merge_matches_brute_force(a in stream(0..1, 100, 2000), b in stream(1..2, 100, 2000), dead in 0.0f64..20e-9) {
        let got = merge_detectors(&a, &b, dead, TAGGER_TICK).unwrap();
        prop_assert_eq!(got, brute_merge(&[&a, &b], dead / TAGGER_TICK));
    }

    #[test]
    fn merged_stream_respects_global_dead_time(
        a in stream(0..1, 80, 3000),
        b in stream(1..2, 80, 3000),
        c in stream(2..3, 80, 3000),
        dead in 0.0f64..30e-9,
    ) {
        let m = merge_many(&[&a, &b, &c], dead, TAGGER_TICK).unwrap();
        for w in m.windows(2) {
            prop_assert!((w[1].tick_time - w[0].tick_time) as f64 > dead / TAGGER_TICK);
        }
        if !a.is_empty() || !b.is_empty() || !c.is_empty() {
            prop_assert!(!m.is_empty());
        }
    }

    #[test]
    fn detector_output_respects_dead_time(
        times in prop::collection::vec(0.0f64..1e-5, 0..400),
        dead in 0.0f64..100e-9,
        seed in any::<u64>(),
    ) {
        let mut times = times;
        times.sort_by(f64::total_cmp);
        let arrivals: Vec<Arrival> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| Arrival { time: t, outcome: if i % 3 == 0 { Outcome::V } else { Outcome::H } })
            .collect();
        let cfg = DetectorConfig { efficiency: 0.7, dark_rate: 1e6, jitter_sigma: 50e-12, dead_time: dead, tick: TAGGER_TICK };
        let module = ModuleId { base_detector_id: 0, channel_index: 1 };
        let tags = detect(&arrivals, &cfg, Basis::HV, module, 1e-5, seed).unwrap();
        prop_assert!(tags.windows(2).all(|w| (w[0].tick_time, w[0].detector_id) <= (w[1].tick_time, w[1].detector_id)));
        for id in 0..2 {
            let own: Vec<i64> = tags.iter().filter(|t| t.detector_id == id).map(|t| t.tick_time).collect();
            for w in own.windows(2) {
                // Dead time acts before rounding, so one tick of slack.
                prop_assert!((w[1] - w[0]) as f64 >= dead / TAGGER_TICK - 1.0);
            }
        }
    }

    #[test]
    fn entropy_is_symmetric_and_bounded(x in 0.0f64..=1.0) {
        let h = binary_entropy(x).unwrap();
        prop_assert!((0.0..=1.0).contains(&h));
        prop_assert!((h - binary_entropy(1.0 - x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_concave(x in 0.0f64..=1.0, y in 0.0f64..=1.0, l in 0.0f64..=1.0) {
        let mix = binary_entropy(l * x + (1.0 - l) * y).unwrap();
        let chord = l * binary_entropy(x).unwrap() + (1.0 - l) * binary_entropy(y).unwrap();
        prop_assert!(mix >= chord - 1e-12);
    }

    #[test]
    fn qber_is_half_of_one_minus_visibility(hh in 0u64..10_000, hv in 0u64..10_000, vh in 0u64..10_000, vv in 0u64..10_000) {
        let m = CountsMatrix::from_entries(Basis::HV, hh, hv, vh, vv);
        match (qber(&m), visibility(&m)) {
            (Some(q), Some(v)) => prop_assert!((q - qber_from_visibility(v)).abs() < 1e-12),
            (None, None) => prop_assert_eq!(m.total(), 0),
            _ => prop_assert!(false, "qber and visibility disagree on emptiness"),
        }
    }

    #[test]
    fn key_falls_with_qber_and_rises_with_counts(
        q1 in 0.0f64..0.5, q2 in 0.0f64..0.5, n1 in 0.0f64..1e6, n2 in 0.0f64..1e6, f in 1.0f64..1.5,
    ) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(basis_key_fraction(lo, f) >= basis_key_fraction(hi, f));
        let (small, big) = if n1 <= n2 { (n1, n2) } else { (n2, n1) };
        prop_assert!(secure_key_from_qber(small, lo, small, lo, f) <= secure_key_from_qber(big, lo, big, lo, f));
        prop_assert!(secure_key_from_qber(big, lo, big, lo, f) >= 0.0);
    }

    #[test]
    fn aggregate_scales_linearly(
        n in 1u32..20_000,
        loss in 0.0f64..90.0,
        pair_rate in 1e4f64..1e9,
        q_sys in 0.0f64..0.05,
        dark in 0.0f64..1e3,
    ) {
        let base = AnalyticLinkModel {
            pair_rate_in_band: pair_rate,
            unpaired_rate_alice: 0.0,
            unpaired_rate_bob: 0.0,
            transmittance_alice: 1.0,
            transmittance_bob: 1.0,
            dark_rate_alice: dark,
            dark_rate_bob: dark,
            coincidence_window: 1e-9,
            window_efficiency: 0.9,
            nearer_accidental_fraction: 0.4,
            dead_time_alice: 50e-9,
            dead_time_bob: 50e-9,
            q_sys,
            n_channels: 1,
            f_ec: 1.1,
        };
        let t = LinkTemplate { base, receiver_efficiency_alice: 0.5, receiver_efficiency_bob: 0.5 };
        let pts = scaling_curve(&t, &[1, n], &[loss], None).unwrap();
        prop_assert_eq!(pts[1].key_rate, n as f64 * pts[0].key_rate);
        let m = AnalyticLinkModel { n_channels: n, ..t.at_loss(loss) };
        let r = analytic_rates(&m);
        prop_assert_eq!(r.aggregate_key_rate, n as f64 * r.key_rate);
    }
}
