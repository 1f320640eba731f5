//! Closed-form link model: true and accidental coincidence rates, QBER and
//! key rate per channel, pair-rate optimisation and n-channel scaling.
//!
//! Per channel with in-band pair rate `B`:
//!
//! ```text
//! S_A = (B + u_A)·η_A + d_A              incident singles, Alice
//! S_B = (B + u_B)·η_B + d_B              incident singles, Bob
//! D_X = 1 / (1 + S_X·τ/2)                dead-time survival (two detectors per side)
//! T = B·η_A·η_B·w·D_A·D_B                pairs detected inside the window
//! A = (S_A·D_A)·(S_B·D_B)·t_c            uncorrelated overlaps
//! p_A = T/(S_A·D_A),  p_B = T/(S_B·D_B)
//! cc_acc  = A·(1 − p_A·(1 − c) − p_B/2)
//! cc_true = T − A·(p_B/2 + p_A·c)
//! Q = (q_sys·cc_true + ½·cc_acc) / (cc_true + cc_acc)
//! R = (cc_true + cc_acc)·½(1 − (1+f)·H2(Q))   (counts split evenly over two bases)
//! ```
//!
//! `u_X` are photons that reach one side's band without a partner in the
//! other side's band and `w` is the fraction of true pairs whose detection
//! times fall inside the window.
//!
//! The last two lines are the first-order effect of one-to-one matching in
//! Alice's time order. An Alice click that has its partner only pairs with
//! an uncorrelated Bob click that sits nearer (probability `c`), and then the
//! true pair is lost. A Bob click whose partner comes first is already taken;
//! one whose partner comes later can be taken by an earlier unrelated Alice
//! click. Each case happens for about half of Bob's partnered clicks.

use serde::{Deserialize, Serialize};

use super::basis_key_fraction;
use crate::error::{ensure, Result};
use crate::optics::db_to_transmittance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticLinkModel {
    /// Pairs/s with both photons inside the matched passbands.
    pub pair_rate_in_band: f64,
    /// Pairs/s with only the signal photon inside Alice's passband.
    #[serde(default)]
    pub unpaired_rate_alice: f64,
    /// Pairs/s with only the idler photon inside Bob's passband.
    #[serde(default)]
    pub unpaired_rate_bob: f64,
    /// Link × filter × detector transmittance, Alice.
    pub transmittance_alice: f64,
    pub transmittance_bob: f64,
    /// Dark counts/s of Alice's analyser (both detectors).
    pub dark_rate_alice: f64,
    pub dark_rate_bob: f64,
    /// Coincidence window width, s.
    pub coincidence_window: f64,
    /// Fraction of true pairs detected inside the window.
    #[serde(default = "one")]
    pub window_efficiency: f64,
    /// Probability that an uncorrelated Bob click inside the window lies
    /// nearer to Alice's click than her true partner does.
    #[serde(default = "half")]
    pub nearer_accidental_fraction: f64,
    /// Per-detector dead time, s.
    #[serde(default)]
    pub dead_time_alice: f64,
    #[serde(default)]
    pub dead_time_bob: f64,
    pub q_sys: f64,
    #[serde(default = "one_u32")]
    pub n_channels: u32,
    #[serde(default = "default_f")]
    pub f_ec: f64,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn one_u32() -> u32 {
    1
}
fn default_f() -> f64 {
    super::DEFAULT_F_EC
}

impl AnalyticLinkModel {
    pub fn validate(&self) -> Result<()> {
        ensure(self.pair_rate_in_band >= 0.0, "pair_rate_in_band", || "must be non-negative".into())?;
        ensure(
            self.unpaired_rate_alice >= 0.0 && self.unpaired_rate_bob >= 0.0,
            "unpaired_rate",
            || "must be non-negative".into(),
        )?;
        for (name, t) in [
            ("transmittance_alice", self.transmittance_alice),
            ("transmittance_bob", self.transmittance_bob),
        ] {
            ensure(t > 0.0 && t <= 1.0, name, || format!("must be in (0, 1], got {t}"))?;
        }
        ensure(
            self.dark_rate_alice >= 0.0 && self.dark_rate_bob >= 0.0,
            "dark_rate",
            || "must be non-negative".into(),
        )?;
        ensure(self.coincidence_window >= 0.0, "coincidence_window", || "must be non-negative".into())?;
        ensure(
            self.window_efficiency > 0.0 && self.window_efficiency <= 1.0,
            "window_efficiency",
            || "must be in (0, 1]".into(),
        )?;
        ensure(
            (0.0..=1.0).contains(&self.nearer_accidental_fraction),
            "nearer_accidental_fraction",
            || "must be in [0, 1]".into(),
        )?;
        ensure(
            self.dead_time_alice >= 0.0 && self.dead_time_bob >= 0.0,
            "dead_time",
            || "must be non-negative".into(),
        )?;
        ensure((0.0..=0.5).contains(&self.q_sys), "q_sys", || {
            format!("must be in [0, 0.5], got {}", self.q_sys)
        })?;
        ensure(self.n_channels >= 1, "n_channels", || "must be at least 1".into())?;
        ensure(self.f_ec >= 1.0, "f_ec", || "must be at least 1".into())
    }

    /// Same model at a different in-band pair rate; unpaired rates scale along.
    pub fn with_pair_rate(&self, pair_rate: f64) -> Self {
        let scale = if self.pair_rate_in_band > 0.0 {
            pair_rate / self.pair_rate_in_band
        } else {
            0.0
        };
        Self {
            pair_rate_in_band: pair_rate,
            unpaired_rate_alice: self.unpaired_rate_alice * scale,
            unpaired_rate_bob: self.unpaired_rate_bob * scale,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRates {
    /// Matched coincidences/s from genuine pairs.
    pub cc_true: f64,
    /// Matched coincidences/s between unrelated clicks.
    pub cc_acc: f64,
    /// Pairs/s detected inside the window, before matching.
    pub pairs_in_window: f64,
    /// Unrelated click overlaps/s inside the window, before matching.
    pub overlaps: f64,
    /// Detected singles/s after dead time.
    pub singles_alice: f64,
    pub singles_bob: f64,
    pub qber: f64,
    /// Secure key bits/s of one channel.
    pub key_rate: f64,
    /// `n_channels × key_rate`.
    pub aggregate_key_rate: f64,
}

impl AnalyticRates {
    pub fn coincidences(&self) -> f64 {
        self.cc_true + self.cc_acc
    }
}

struct SideRates {
    incident: f64,
    survival: f64,
}

fn side(pairs: f64, transmittance: f64, dark: f64, dead_time: f64) -> SideRates {
    let incident = pairs * transmittance + dark;
    SideRates {
        incident,
        survival: 1.0 / (1.0 + 0.5 * incident * dead_time),
    }
}

fn finish(
    pairs: f64,
    overlaps: f64,
    nearer: f64,
    q_sys: f64,
    singles: (f64, f64),
    n: u32,
    f_ec: f64,
) -> AnalyticRates {
    let frac = |x: f64| if x > 0.0 { pairs / x } else { 0.0 };
    let (p_a, p_b) = (frac(singles.0), frac(singles.1));
    let cc_acc = (overlaps * (1.0 - p_a * (1.0 - nearer) - 0.5 * p_b)).max(0.0);
    let cc_true = (pairs - overlaps * (0.5 * p_b + p_a * nearer)).max(0.0);
    let cc = cc_true + cc_acc;
    let qber = if cc > 0.0 {
        (q_sys * cc_true + 0.5 * cc_acc) / cc
    } else {
        0.5
    };
    let key_rate = 2.0 * 0.5 * cc * basis_key_fraction(qber, f_ec);
    AnalyticRates {
        cc_true,
        cc_acc,
        pairs_in_window: pairs,
        overlaps,
        singles_alice: singles.0,
        singles_bob: singles.1,
        qber,
        key_rate,
        aggregate_key_rate: n as f64 * key_rate,
    }
}

/// Evaluates the model for one channel and for `n_channels` identical channels.
pub fn analytic_rates(model: &AnalyticLinkModel) -> AnalyticRates {
    let m = model;
    let a = side(m.pair_rate_in_band + m.unpaired_rate_alice, m.transmittance_alice, m.dark_rate_alice, m.dead_time_alice);
    let b = side(m.pair_rate_in_band + m.unpaired_rate_bob, m.transmittance_bob, m.dark_rate_bob, m.dead_time_bob);
    let pairs = m.pair_rate_in_band
        * m.transmittance_alice
        * m.transmittance_bob
        * m.window_efficiency
        * a.survival
        * b.survival;
    let singles = (a.incident * a.survival, b.incident * b.survival);
    let overlaps = singles.0 * singles.1 * m.coincidence_window;
    finish(pairs, overlaps, m.nearer_accidental_fraction, m.q_sys, singles, m.n_channels, m.f_ec)
}

/// Rates when the channels' detectors are merged into one analyser per side,
/// with an additional `global_dead_time` applied to each merged output.
pub fn analytic_merged(models: &[AnalyticLinkModel], global_dead_time: f64) -> AnalyticRates {
    let per: Vec<AnalyticRates> = models.iter().map(analytic_rates).collect();
    let sa: Vec<(f64, f64)> = models.iter().zip(&per).map(|(m, r)| (r.singles_alice, m.dead_time_alice)).collect();
    let sb: Vec<(f64, f64)> = models.iter().zip(&per).map(|(m, r)| (r.singles_bob, m.dead_time_bob)).collect();
    let ga = merged_survival(&sa, global_dead_time);
    let gb = merged_survival(&sb, global_dead_time);
    let true_sum: f64 = per.iter().map(|r| r.pairs_in_window).sum();
    let q_sys = if true_sum > 0.0 {
        models.iter().zip(&per).map(|(m, r)| m.q_sys * r.pairs_in_window).sum::<f64>() / true_sum
    } else {
        0.0
    };
    let first = models.first();
    let window = first.map_or(0.0, |m| m.coincidence_window);
    let nearer = first.map_or(0.5, |m| m.nearer_accidental_fraction);
    let f_ec = first.map_or(super::DEFAULT_F_EC, |m| m.f_ec);
    let total = |v: &[(f64, f64)]| v.iter().map(|x| x.0).sum::<f64>();
    let singles = (total(&sa) * ga, total(&sb) * gb);
    finish(true_sum * ga * gb, singles.0 * singles.1 * window, nearer, q_sys, singles, 1, f_ec)
}

/// Fraction of clicks kept when one detector per channel (each already
/// filtered by its own dead time) feeds a merged output with dead time
/// `global`. `streams` holds (detected singles of the side, per-detector dead
/// time); each side has two outputs, so a detector sees half the singles.
///
/// To first order each kept click removes the other streams' clicks within
/// `global`, plus its own stream's clicks in the part of `global` that its
/// own dead time does not already cover.
fn merged_survival(streams: &[(f64, f64)], global: f64) -> f64 {
    let total: f64 = streams.iter().map(|s| 0.5 * s.0).sum();
    if total <= 0.0 || global <= 0.0 {
        return 1.0;
    }
    let lost: f64 = streams
        .iter()
        .map(|&(s, own)| {
            let r = 0.5 * s;
            r / total * ((total - r) * global + r * (global - own).max(0.0))
        })
        .sum();
    1.0 / (1.0 + lost)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizedRate {
    pub pair_rate: f64,
    pub rates: AnalyticRates,
    /// False when the optimum sits on the bracket edge.
    pub interior: bool,
    pub warning: Option<String>,
}

const PROFILE_POINTS: usize = 97;

/// Maximises the per-channel key rate over the in-band pair rate within
/// `[lo, hi]` pairs/s: a log-spaced profile scan followed by golden-section
/// refinement around the best sample.
pub fn optimize_pair_rate(model: &AnalyticLinkModel, lo: f64, hi: f64) -> Result<OptimizedRate> {
    model.validate()?;
    ensure(lo > 0.0 && hi > lo, "bracket", || format!("invalid bracket [{lo}, {hi}]"))?;
    let key = |log_b: f64| analytic_rates(&model.with_pair_rate(10f64.powf(log_b))).key_rate;
    let (llo, lhi) = (lo.log10(), hi.log10());
    let step = (lhi - llo) / (PROFILE_POINTS - 1) as f64;
    let xs: Vec<f64> = (0..PROFILE_POINTS).map(|i| llo + step * i as f64).collect();
    let ys: Vec<f64> = xs.iter().map(|&x| key(x)).collect();
    let best = ys
        .iter()
        .enumerate()
        .fold(0usize, |b, (i, &y)| if y > ys[b] { i } else { b });

    let peaks = (0..PROFILE_POINTS)
        .filter(|&i| {
            ys[i] > 0.0
                && (i == 0 || ys[i] > ys[i - 1])
                && (i + 1 == PROFILE_POINTS || ys[i] >= ys[i + 1])
        })
        .count();
    let mut warning = None;
    let interior = best > 0 && best + 1 < PROFILE_POINTS && ys[best] > 0.0;
    if ys[best] <= 0.0 {
        warning = Some("no positive key rate anywhere in the bracket".to_string());
    } else if !interior {
        warning = Some(format!(
            "key rate is maximal at the bracket edge ({:.3e} pairs/s); no interior optimum",
            10f64.powf(xs[best])
        ));
    } else if peaks > 1 {
        warning = Some(format!("key-rate profile has {peaks} local maxima"));
    }

    let mut x_best = xs[best];
    if interior {
        let (mut a, mut b) = (xs[best - 1], xs[best + 1]);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (key(c), key(d));
        while b - a > 1e-9 {
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = key(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = key(d);
            }
        }
        let x = 0.5 * (a + b);
        if key(x) >= ys[best] {
            x_best = x;
        }
    }
    let pair_rate = 10f64.powf(x_best);
    if let Some(w) = &warning {
        log::warn!("optimize_pair_rate: {w}");
    }
    Ok(OptimizedRate {
        pair_rate,
        rates: analytic_rates(&model.with_pair_rate(pair_rate)),
        interior,
        warning,
    })
}

/// Maps a total two-sided loss onto a link model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkTemplate {
    /// Everything except the transmittances, which are set per loss value.
    pub base: AnalyticLinkModel,
    /// Loss-independent receiver efficiency multiplying the link transmittance.
    pub receiver_efficiency_alice: f64,
    pub receiver_efficiency_bob: f64,
}

impl LinkTemplate {
    /// The loss is split symmetrically: each side sees `10^(−loss/20)`.
    pub fn at_loss(&self, loss_db: f64) -> AnalyticLinkModel {
        let t = db_to_transmittance(0.5 * loss_db);
        AnalyticLinkModel {
            transmittance_alice: t * self.receiver_efficiency_alice,
            transmittance_bob: t * self.receiver_efficiency_bob,
            ..self.base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub n: u32,
    pub loss_db: f64,
    pub pair_rate: f64,
    pub qber: f64,
    pub key_rate_per_channel: f64,
    pub key_rate: f64,
}

/// Aggregate key rate of `n` identical channels over a loss grid. When
/// `bracket` is given, the per-channel pair rate is optimised at every loss;
/// otherwise the template's pair rate is used.
pub fn scaling_curve(
    template: &LinkTemplate,
    n_values: &[u32],
    loss_grid: &[f64],
    bracket: Option<(f64, f64)>,
) -> Result<Vec<ScalingPoint>> {
    let mut out = Vec::with_capacity(n_values.len() * loss_grid.len());
    for &loss in loss_grid {
        let model = template.at_loss(loss);
        model.validate()?;
        let (pair_rate, rates) = match bracket {
            Some((lo, hi)) => {
                let o = optimize_pair_rate(&model, lo, hi)?;
                (o.pair_rate, o.rates)
            }
            None => (model.pair_rate_in_band, analytic_rates(&model)),
        };
        for &n in n_values {
            out.push(ScalingPoint {
                n,
                loss_db: loss,
                pair_rate,
                qber: rates.qber,
                key_rate_per_channel: rates.key_rate,
                key_rate: n as f64 * rates.key_rate,
            });
        }
    }
    out.sort_by(|a, b| a.n.cmp(&b.n).then(a.loss_db.total_cmp(&b.loss_db)));
    Ok(out)
}
