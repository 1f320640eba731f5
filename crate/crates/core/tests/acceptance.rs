//! Acceptance criteria. Runs every criterion, prints one PASS/FAIL line per
//! criterion and fails if any of them fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wmqkd::detection::ModuleId;
use wmqkd::keyrate::{ChannelKeyReport, KeyRateReport};
use wmqkd::scenario::{bandwidth_curves, consistency, fig3d_summary, RunConfig, Scenario};
use wmqkd::simulation::MonteCarloResult;
use wmqkd::{
    analytic_rates, binary_entropy, detect, find_coincidences, merge_detectors, optimize_pair_rate, qber_threshold,
    scaling_curve, Basis, Calibration, CoincidenceWindow, DetectorConfig, LinkSetup, Match, Outcome, TimeTag,
    TAGGER_TICK,
};

// Pinned tolerances.
const C1_TARGET: f64 = 0.0946;
const C1_TOL: f64 = 0.0005;
const C2_TOL: f64 = 1e-12;
const C3_SIGMAS: f64 = 5.0;
const C4_INSTANCES: usize = 100;
const C4_MAX_EVENTS: usize = 10_000;
const C5_TARGET: f64 = 0.076;
const C5_TOL: f64 = 0.010;
const C5_MIN_COINCIDENCES: u64 = 10_000;
const C6_WM_RATIO: (f64, f64) = (2.0, 3.2);
const C6_CH1_RATIO: (f64, f64) = (1.5, 2.3);
const C7_LOSS_DB: f64 = 89.0;
const C7_DURATION: f64 = 40_000.0;
const C8_N: [u32; 4] = [2, 80, 1000, 15000];
const C9_TARGET: f64 = 3e4;
const C9_FACTOR: f64 = 2.0;
const C9_LOSS_DB: f64 = 70.0;
const C9_N: u32 = 15000;
const C10_BW: [f64; 3] = [19.0, 21.0, 22.0];
const C11_CONFIGS: usize = 5;
const C11_MIN_TRUE: f64 = 1e5;
const C11_SIGMAS: f64 = 4.0;

const CALIBRATION_LOSS_DB: f64 = 30.0;
const CALIBRATION_DURATION: f64 = 4.0;

type Verdict = Result<String, String>;

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(mc: &MonteCarloResult, f_ec: f64) -> KeyRateReport {
    let mut t = mc.channels.clone();
    t.extend(mc.merged.clone());
    KeyRateReport::from_tallies(&t, f_ec).unwrap()
}

fn arm<'a>(r: &'a KeyRateReport, label: &str) -> &'a ChannelKeyReport {
    r.channel(label).unwrap_or_else(|| panic!("no {label} arm"))
}

/// Shared Monte Carlo run at the calibration point.
fn calibration_run() -> &'static KeyRateReport {
    static CELL: OnceLock<KeyRateReport> = OnceLock::new();
    CELL.get_or_init(|| {
        let setup = Calibration::frozen().table1_setup(CALIBRATION_LOSS_DB);
        report(&setup.simulate(CALIBRATION_DURATION, 30).unwrap(), setup.f_ec)
    })
}

/// Root of `(1+f)·H2(Q) = 1` on (0, ½) by plain bisection.
fn threshold_oracle(f: f64) -> f64 {
    let h = |q: f64| -q * q.log2() - (1.0 - q) * (1.0 - q).log2();
    let (mut lo, mut hi) = (1e-9, 0.5);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (1.0 + f) * h(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn c1() -> Verdict {
    let q = qber_threshold(1.1).map_err(|e| e.to_string())?;
    let oracle = threshold_oracle(1.1);
    if (q - oracle).abs() > 1e-9 {
        return Err(format!("threshold {q} disagrees with bisection oracle {oracle}"));
    }
    check(
        (q - C1_TARGET).abs() <= C1_TOL,
        format!("qber_threshold(1.1) = {q:.5}, target {C1_TARGET} ± {C1_TOL}"),
    )
}

fn c2() -> Verdict {
    let h = |x: f64| binary_entropy(x).unwrap();
    let mut worst = 0f64;
    worst = worst.max((h(0.5) - 1.0).abs()).max(h(0.0)).max(h(1.0));
    let xs: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    for &x in &xs {
        worst = worst.max((h(x) - h(1.0 - x)).abs());
    }
    let mut concave_violation = 0f64;
    for w in xs.windows(3) {
        concave_violation = concave_violation.max(h(w[0]) + h(w[2]) - 2.0 * h(w[1]));
    }
    check(
        worst <= C2_TOL && concave_violation <= C2_TOL,
        format!("identity error {worst:.1e}, concavity violation {concave_violation:.1e}"),
    )
}

fn c3() -> Verdict {
    // A 1 ps tagger makes the window's tick width equal to t_c.
    let tick = 1e-12;
    let cfg = DetectorConfig {
        efficiency: 1.0,
        dark_rate: 1e5,
        jitter_sigma: 0.0,
        dead_time: 0.0,
        tick,
    };
    let module = |b| ModuleId {
        base_detector_id: b,
        channel_index: 1,
    };
    let t = 10.0;
    let a = detect(&[], &cfg, Basis::HV, module(0), t, 301).unwrap();
    let b = detect(&[], &cfg, Basis::HV, module(2), t, 302).unwrap();
    let w = CoincidenceWindow { t_c: 1e-9 };
    let n = find_coincidences(&a, &b, &w, tick).unwrap().len() as f64;
    let expected = 1e5 * 1e5 * 1e-9 * t;
    check(
        (n - expected).abs() <= C3_SIGMAS * expected.sqrt(),
        format!("{n} coincidences, expected {expected} ± {C3_SIGMAS}σ"),
    )
}

fn random_stream(rng: &mut ChaCha8Rng, n: usize, span: i64, ids: [u32; 2]) -> Vec<TimeTag> {
    let mut v: Vec<(i64, u32)> = (0..n).map(|_| (rng.random_range(0..span), ids[rng.random_range(0..2)])).collect();
    v.sort();
    v.into_iter()
        .map(|(t, id)| TimeTag {
            detector_id: id,
            tick_time: t,
            outcome: if id % 2 == 0 { Outcome::H } else { Outcome::V },
            channel_index: 1,
            dark: false,
        })
        .collect()
}

fn brute_matches(a: &[TimeTag], b: &[TimeTag], h: i64) -> Vec<Match> {
    let mut taken = vec![false; b.len()];
    let mut out = Vec::new();
    for (ia, x) in a.iter().enumerate() {
        let mut best: Option<(i64, i64, u32, usize)> = None;
        for (jb, y) in b.iter().enumerate() {
            let d = (y.tick_time - x.tick_time).abs();
            if !taken[jb] && d <= h {
                let key = (d, y.tick_time, y.detector_id, jb);
                if best.map_or(true, |k| key < k) {
                    best = Some(key);
                }
            }
        }
        if let Some((.., jb)) = best {
            taken[jb] = true;
            out.push(Match { alice: ia, bob: jb });
        }
    }
    out
}

fn brute_merge(a: &[TimeTag], b: &[TimeTag], dead_ticks: f64) -> Vec<TimeTag> {
    let mut all: Vec<TimeTag> = a.iter().chain(b).copied().collect();
    all.sort_by_key(|t| (t.tick_time, t.detector_id));
    let mut kept: Vec<TimeTag> = Vec::new();
    for t in all {
        if kept.iter().all(|k| (t.tick_time - k.tick_time) as f64 > dead_ticks) {
            kept.push(t);
        }
    }
    kept
}

fn c4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total = 0usize;
    for i in 0..C4_INSTANCES {
        let n = rng.random_range(1..=C4_MAX_EVENTS / 2);
        let span = (n as i64) * rng.random_range(5..200);
        let a = random_stream(&mut rng, n, span, [0, 1]);
        let b = random_stream(&mut rng, C4_MAX_EVENTS / 2 - n / 2, span, [2, 3]);
        let w = CoincidenceWindow {
            t_c: rng.random_range(0.0..3e-9),
        };
        let got = find_coincidences(&a, &b, &w, TAGGER_TICK).unwrap();
        if got != brute_matches(&a, &b, w.half_width_ticks(TAGGER_TICK)) {
            return Err(format!("coincidence mismatch on instance {i}"));
        }
        let dead = rng.random_range(0.0..60e-9);
        if merge_detectors(&a, &b, dead, TAGGER_TICK).unwrap() != brute_merge(&a, &b, dead / TAGGER_TICK) {
            return Err(format!("merge mismatch on instance {i}"));
        }
        total += a.len() + b.len();
    }
    Ok(format!("{C4_INSTANCES} instances, {total} events, all identical"))
}

fn c5() -> Verdict {
    let r = calibration_run();
    let (ch1, nowm) = (arm(r, "ch1"), arm(r, "merged"));
    let min_cc = r.channels.iter().map(|c| c.coincidences).min().unwrap_or(0);
    let q1 = ch1.qber.unwrap_or(f64::NAN);
    let q = nowm.qber.unwrap_or(f64::NAN);
    check(
        (q - C5_TARGET).abs() <= C5_TOL && min_cc >= C5_MIN_COINCIDENCES,
        format!(
            "no-WM Q = {:.2}% ± {:.2}% (target {:.1}% ± {:.1} pp), Ch.1 Q = {:.2}%, min arm coincidences {min_cc}",
            100.0 * q,
            100.0 * nowm.qber_sigma.unwrap_or(0.0),
            100.0 * C5_TARGET,
            100.0 * C5_TOL,
            100.0 * q1
        ),
    )
}

fn c6() -> Verdict {
    let r = calibration_run();
    let key = |l: &str| arm(r, l).secure_key_rate;
    let (ch1, ch2, nowm) = (key("ch1"), key("ch2"), key("merged"));
    let (wm_ratio, ch1_ratio) = ((ch1 + ch2) / nowm, ch1 / nowm);
    let setup = Calibration::frozen().table1_setup(CALIBRATION_LOSS_DB);
    let (a1, a2, am) = (setup.analytic_channel(0), setup.analytic_channel(1), setup.analytic_merged());
    let (an_wm, an_ch1) = ((a1.key_rate + a2.key_rate) / am.key_rate, a1.key_rate / am.key_rate);
    let inside = |x: f64, r: (f64, f64)| x >= r.0 && x <= r.1;
    check(
        inside(wm_ratio, C6_WM_RATIO)
            && inside(ch1_ratio, C6_CH1_RATIO)
            && inside(an_wm, C6_WM_RATIO)
            && inside(an_ch1, C6_CH1_RATIO),
        format!(
            "WM/noWM = {wm_ratio:.2} (analytic {an_wm:.2}) in {C6_WM_RATIO:?}; \
             Ch1/noWM = {ch1_ratio:.2} (analytic {an_ch1:.2}) in {C6_CH1_RATIO:?}"
        ),
    )
}

fn c7() -> Verdict {
    let setup = Calibration::frozen().table1_setup(C7_LOSS_DB);
    let (a1, a2, am) = (setup.analytic_channel(0), setup.analytic_channel(1), setup.analytic_merged());
    let an_wm = a1.key_rate + a2.key_rate;
    let r = report(&setup.simulate(C7_DURATION, 70).unwrap(), setup.f_ec);
    let (ch1, ch2, nowm) = (arm(&r, "ch1"), arm(&r, "ch2"), arm(&r, "merged"));
    let mc_wm = ch1.secure_key_rate + ch2.secure_key_rate;
    let sigma_wm = ch1.secure_key_rate_sigma.hypot(ch2.secure_key_rate_sigma);
    println!(
        "      variance warning: {} / {} / {} coincidences (ch1 / ch2 / no-WM); relative key error {:.0}%",
        ch1.coincidences,
        ch2.coincidences,
        nowm.coincidences,
        100.0 * sigma_wm / mc_wm.max(f64::MIN_POSITIVE)
    );
    check(
        an_wm > 0.0 && am.key_rate == 0.0 && mc_wm > 0.0 && nowm.secure_key_rate == 0.0,
        format!(
            "analytic WM {an_wm:.3e} bps, no-WM {:.1e} bps (Q {:.1}%); MC WM {mc_wm:.3e} ± {sigma_wm:.1e} bps, \
             no-WM {:.1e} bps (Q {:.1}%)",
            am.key_rate,
            100.0 * am.qber,
            nowm.secure_key_rate,
            100.0 * nowm.qber.unwrap_or(f64::NAN)
        ),
    )
}

fn c8() -> Verdict {
    let t = Calibration::frozen().scaling_template();
    let mut ns = vec![1];
    ns.extend(C8_N);
    let losses: Vec<f64> = (0..=9).map(|i| 10.0 * i as f64).collect();
    let pts = scaling_curve(&t, &ns, &losses, None).map_err(|e| e.to_string())?;
    for &loss in &losses {
        let at = |n: u32| pts.iter().find(|p| p.n == n && p.loss_db == loss).unwrap().key_rate;
        for n in C8_N {
            if at(n) != n as f64 * at(1) {
                return Err(format!("R({n}) != {n}·R(1) at {loss} dB"));
            }
        }
    }
    Ok(format!("R(n) = n·R(1) exactly for n in {C8_N:?} at {} losses", losses.len()))
}

fn c9() -> Verdict {
    let mut cfg = RunConfig::defaults(Scenario::Fig3d);
    cfg.loss_grid = vec![C9_LOSS_DB];
    cfg.scaling.n_values = vec![C9_N];
    let s = fig3d_summary(&cfg).map_err(|e| e.to_string())?;
    let p = s.scaling.iter().find(|p| p.n == C9_N).ok_or("no n = 15000 point")?;
    check(
        p.key_rate >= C9_TARGET / C9_FACTOR && p.key_rate <= C9_TARGET * C9_FACTOR && s.warnings.is_empty(),
        format!(
            "R = {:.0} bps at {C9_LOSS_DB} dB (pair rate {:.3e}/s per channel, Q {:.2}%), target {C9_TARGET} within ×{C9_FACTOR}",
            p.key_rate,
            p.pair_rate,
            100.0 * p.qber
        ),
    )
}

fn c10() -> Verdict {
    let cfg = RunConfig::defaults(Scenario::Fig3d);
    let [lo, hi] = cfg.scaling.pair_rate_bracket;
    let t = cfg.scaling_template();
    let curves = bandwidth_curves(&cfg);
    let at = |bw: f64, loss: f64| {
        curves
            .iter()
            .find(|p| p.bandwidth_ghz == bw && p.loss_db == loss)
            .map(|p| p.key_rate_bps)
            .unwrap()
    };
    // Strict ordering where the 21 GHz channel does best; weak ordering and
    // no 22 GHz key everywhere else.
    let best = cfg
        .loss_grid
        .iter()
        .copied()
        .max_by(|a, b| at(C10_BW[1], *a).total_cmp(&at(C10_BW[1], *b)))
        .unwrap();
    let reference = optimize_pair_rate(&t.at_loss(best), lo, hi).map_err(|e| e.to_string())?;
    let [r19, r21, r22] = C10_BW.map(|bw| at(bw, best));
    let weak = cfg.loss_grid.iter().all(|&l| {
        let [a, b, c] = C10_BW.map(|bw| at(bw, l));
        a >= b && b >= c && c == 0.0
    });
    // The 21 GHz point straight from the model, bypassing the scenario code.
    let direct21 = analytic_rates(&t.at_loss(best).with_pair_rate(C10_BW[1] * cfg.scaling.spectral_density_per_ghz));
    let last21 = cfg.loss_grid.iter().copied().filter(|&l| at(C10_BW[1], l) > 0.0).fold(f64::NAN, f64::max);
    check(
        reference.rates.key_rate > r19 && r19 > r21 && r21 > 0.0 && r22 == 0.0 && weak && direct21.key_rate == r21,
        format!(
            "at {best} dB: R(6.25 opt) = {:.4e} > R(19) = {r19:.4e} > R(21) = {r21:.4e} > R(22) = {r22}; \
             21 GHz key ends at {last21} dB; ordering and R(22) = 0 over all {} losses: {weak}",
            reference.rates.key_rate,
            cfg.loss_grid.len()
        ),
    )
}

fn c11() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = Calibration::frozen();
    let mut lines = Vec::new();
    let mut ok = true;
    for k in 0..C11_CONFIGS {
        let mut s: LinkSetup = base.table1_setup(rng.random_range(26.0..32.0));
        s.source.pair_rate *= rng.random_range(0.5..1.5);
        s.window.t_c = rng.random_range(0.6e-9..1.6e-9);
        s.extra_signal_loss = rng.random_range(0.0..0.3);
        let analytic = [s.analytic_channel(0), s.analytic_channel(1), s.analytic_merged()];
        let slowest = analytic[..2].iter().map(|a| a.cc_true).fold(f64::INFINITY, f64::min);
        let duration = 1.02 * C11_MIN_TRUE / (2.0 * slowest);
        let r = report(&s.simulate(duration, 1100 + k as u64).unwrap(), s.f_ec);
        let mut worst: f64 = 0.0;
        for (label, a) in ["ch1", "ch2", "merged"].iter().zip(&analytic) {
            let c = consistency(arm(&r, label), a).ok_or("empty arm")?;
            worst = worst.max(c.qber_z.abs()).max(c.key_rate_z.abs());
            ok &= c.qber_z.abs() <= C11_SIGMAS && c.key_rate_z.abs() <= C11_SIGMAS;
            ok &= a.cc_true * 2.0 * duration >= C11_MIN_TRUE || *label == "merged";
        }
        lines.push(format!("{:.1} dB/{:.2} ns: max |z| {worst:.2}", s.loss_db, 1e9 * s.window.t_c));
    }
    check(ok, format!("{} (limit {C11_SIGMAS}σ)", lines.join("; ")))
}

fn c12() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let configs = [
        ("fig3b", "scenario = \"fig3b\"\nloss_grid = [40.0, 70.0]\n[montecarlo]\nduration = 0.05\nmax_duration = 20.0\n"),
        ("fig3d", "scenario = \"fig3d\"\n"),
        ("custom", "scenario = \"custom\"\nloss_grid = [35.0]\n[montecarlo]\nduration = 0.1\nmax_duration = 0.1\n"),
    ];
    let mut files = 0;
    for (name, text) in configs {
        let cfg = tmp.path().join(format!("{name}.toml"));
        std::fs::write(&cfg, text).map_err(|e| e.to_string())?;
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("{name}-{rep}"));
            let out = Command::new(env!("CARGO_BIN_EXE_wmqkd"))
                .args([name, "--config", cfg.to_str().unwrap(), "--seed", "12", "--out", dir.to_str().unwrap()])
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{name} failed: {}", String::from_utf8_lossy(&out.stderr)));
            }
            outputs.push(read_dir_sorted(&dir));
        }
        if outputs[0] != outputs[1] || outputs[0].is_empty() {
            return Err(format!("{name}: outputs differ between runs"));
        }
        files += outputs[0].len();
    }
    Ok(format!("{files} output files byte-identical across repeated runs of fig3b, fig3d, custom"))
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 12] = [
        ("QBER threshold", c1),
        ("entropy identities", c2),
        ("accidental law", c3),
        ("coincidence/merge oracles", c4),
        ("WM vs no-WM QBER", c5),
        ("key-rate ratios", c6),
        ("high-loss separation", c7),
        ("scaling linearity", c8),
        ("n = 15000 headline", c9),
        ("bandwidth degradation", c10),
        ("Monte Carlo vs analytic", c11),
        ("determinism", c12),
    ];
    // Optional criterion numbers select a subset: `cargo test --test acceptance -- 5 6`.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("PASS {:>2} {name} [{secs:.1} s]: {d}", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.1} s]: {d}", i + 1)
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
