//! End-to-end Monte Carlo of a channel plan at one loss setting, and the
//! matching closed-form link model.
//!
//! Only pairs with at least one photon that can reach a detector are drawn.
//! The detuning axis is cut into cells at every passband edge; inside a cell
//! both photons' fates are fixed by the same channels, so the surviving pairs
//! form a Poisson process of rate `pair_rate · Σ mass_k · P(≥1 survives)_k`.
//! That is an exact restriction of sampling every pair and thinning
//! afterwards, just without the wasted draws. Detector efficiency is folded
//! into the survival draw for the same reason.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::channel::{ChannelPlan, Side};
use crate::coincidence::{accidental_estimate, find_coincidences, tabulate, CoincidenceWindow};
use crate::detection::{
    detect, link_survival, measure_polarization, merge_receivers, Arrival, Basis, DetectorConfig, ModuleId,
    TimeTag,
};
use crate::error::{ensure, Error, Result};
use crate::keyrate::{analytic_merged, analytic_rates, AnalyticLinkModel, AnalyticRates, ChannelTally};
use crate::rng::{derive_seed, rng_from_seed};
use crate::source::{poisson_times, IntervalSampler, SourceConfig};

/// Default shift of Bob's stream for delayed-window accidental estimates, s.
pub const DEFAULT_ACCIDENTAL_DELAY: f64 = 200e-9;

/// Target number of simulated events (pairs plus dark counts) per time chunk.
const CHUNK_EVENTS: f64 = 2.0e6;

/// Everything needed to simulate or model one plan at one loss value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSetup {
    pub source: SourceConfig,
    pub plan: ChannelPlan,
    /// Settings shared by every analyser module on Alice's (signal) side.
    pub alice: DetectorConfig,
    pub bob: DetectorConfig,
    pub window: CoincidenceWindow,
    /// Extra dead time applied when receivers are merged, s.
    pub global_dead_time: f64,
    /// Total two-sided link loss, dB.
    pub loss_db: f64,
    pub extra_signal_loss: f64,
    pub extra_idler_loss: f64,
    pub f_ec: f64,
    pub accidental_delay: f64,
}

/// One detuning cell of the fused sampler.
#[derive(Debug, Clone, Copy)]
struct Cell {
    signal: Option<usize>,
    idler: Option<usize>,
    p_signal: f64,
    p_idler: f64,
}

impl Cell {
    fn any(&self) -> f64 {
        1.0 - (1.0 - self.p_signal) * (1.0 - self.p_idler)
    }
}

impl LinkSetup {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.plan.validate()?;
        self.alice.validate()?;
        self.bob.validate()?;
        self.window.validate()?;
        ensure(self.alice.tick == self.bob.tick, "detectors.tick", || {
            "Alice and Bob must share one tagger resolution".into()
        })?;
        ensure(self.global_dead_time >= 0.0, "global_dead_time", || {
            format!("must be non-negative, got {}", self.global_dead_time)
        })?;
        ensure(self.loss_db >= 0.0 && self.loss_db.is_finite(), "loss_db", || {
            format!("must be non-negative, got {}", self.loss_db)
        })?;
        for (name, v) in [
            ("extra_signal_loss", self.extra_signal_loss),
            ("extra_idler_loss", self.extra_idler_loss),
        ] {
            ensure((0.0..1.0).contains(&v), name, || format!("must be in [0, 1), got {v}"))?;
        }
        ensure(self.f_ec >= 1.0, "f_ec", || format!("must be at least 1, got {}", self.f_ec))?;
        ensure(
            self.accidental_delay > self.window.t_c,
            "accidental_delay",
            || "must exceed the coincidence window".into(),
        )
    }

    pub fn tick(&self) -> f64 {
        self.alice.tick
    }

    /// Visibility of channel pair `pos` in `basis`.
    pub fn channel_visibility(&self, pos: usize, basis: Basis) -> f64 {
        let v = match basis {
            Basis::HV => self.source.systematic_visibility_hv,
            Basis::DA => self.source.systematic_visibility_da,
        };
        v * self.plan.pairs[pos].compensation_visibility
    }

    /// Probability that a photon in channel `pos` on `side` reaches and fires
    /// its detector (dark counts and dead time aside).
    pub fn photon_survival(&self, side: Side, pos: usize) -> f64 {
        let p = &self.plan.pairs[pos];
        let t = link_survival(self.loss_db);
        match side {
            Side::Signal => t * (1.0 - self.extra_signal_loss) * p.signal.diffraction_efficiency * self.alice.efficiency,
            Side::Idler => t * (1.0 - self.extra_idler_loss) * p.idler.diffraction_efficiency * self.bob.efficiency,
        }
    }

    /// Distribution of the true-pair tag difference over `-h..=h` ticks,
    /// including tick rounding of both tags.
    fn tag_difference_distribution(&self) -> Vec<f64> {
        let tick = self.tick();
        let h = self.window.half_width_ticks(tick);
        let sigma = (self.alice.jitter_sigma.powi(2) + self.bob.jitter_sigma.powi(2)).sqrt() / tick;
        if sigma == 0.0 {
            return (-h..=h).map(|k| if k == 0 { 1.0 } else { 0.0 }).collect();
        }
        // Δ = round(u + J) − round(u) with u uniform over one tick and J the
        // jitter difference in ticks; average P(Δ = k) over u.
        let phi = |x: f64| 0.5 * (1.0 + erf(x / (sigma * std::f64::consts::SQRT_2)));
        let n = 256;
        (-h..=h)
            .map(|k| {
                let k = k as f64;
                (0..n)
                    .map(|j| {
                        let u = -0.5 + (j as f64 + 0.5) / n as f64;
                        phi(k + 0.5 - u) - phi(k - 0.5 - u)
                    })
                    .sum::<f64>()
                    / n as f64
            })
            .collect()
    }

    /// Fraction of true pairs whose tag difference lands inside the window.
    pub fn window_efficiency(&self) -> f64 {
        self.tag_difference_distribution().iter().sum()
    }

    /// Probability that an uncorrelated Bob tag, uniform over the window's
    /// ticks, wins the nearest-match tie-break against the true partner.
    pub fn nearer_accidental_fraction(&self) -> f64 {
        let dist = self.tag_difference_distribution();
        let h = (dist.len() / 2) as i64;
        // Wins: every tick strictly nearer, the mirror tick when it is
        // earlier, and half of the exact ties.
        let wins = |d: i64| match d {
            0 => 0.5,
            d if d > 0 => 2.0 * d as f64 + 0.5,
            d => 2.0 * d.abs() as f64 - 0.5,
        };
        let total: f64 = dist.iter().sum();
        let mean: f64 = dist.iter().zip(-h..=h).map(|(p, d)| p * wins(d)).sum();
        mean / total / (2 * h + 1) as f64
    }

    /// Closed-form model of channel pair `pos` on its own.
    pub fn analytic_model(&self, pos: usize) -> AnalyticLinkModel {
        let s = self.plan.detuning_interval(Side::Signal, pos);
        let i = self.plan.detuning_interval(Side::Idler, pos);
        let src = &self.source;
        let both = src.interval_fraction(s.0.max(i.0), s.1.min(i.1));
        let q = |b: Basis| 0.5 * (1.0 - self.channel_visibility(pos, b));
        AnalyticLinkModel {
            pair_rate_in_band: src.pair_rate * both,
            unpaired_rate_alice: src.pair_rate * (src.interval_fraction(s.0, s.1) - both).max(0.0),
            unpaired_rate_bob: src.pair_rate * (src.interval_fraction(i.0, i.1) - both).max(0.0),
            transmittance_alice: self.photon_survival(Side::Signal, pos),
            transmittance_bob: self.photon_survival(Side::Idler, pos),
            dark_rate_alice: self.alice.dark_rate,
            dark_rate_bob: self.bob.dark_rate,
            coincidence_window: self.window.effective_width(self.tick()),
            window_efficiency: self.window_efficiency(),
            nearer_accidental_fraction: self.nearer_accidental_fraction(),
            dead_time_alice: self.alice.dead_time,
            dead_time_bob: self.bob.dead_time,
            q_sys: 0.5 * (q(Basis::HV) + q(Basis::DA)),
            n_channels: 1,
            f_ec: self.f_ec,
        }
    }

    pub fn analytic_channel(&self, pos: usize) -> AnalyticRates {
        analytic_rates(&self.analytic_model(pos))
    }

    /// Closed-form model with all channels merged into one receiver per side.
    pub fn analytic_merged(&self) -> AnalyticRates {
        let models: Vec<_> = (0..self.plan.pairs.len()).map(|p| self.analytic_model(p)).collect();
        analytic_merged(&models, self.global_dead_time)
    }

    fn cells(&self) -> Vec<((f64, f64), Cell)> {
        let n = self.plan.pairs.len();
        let mut edges: Vec<f64> = (0..n)
            .flat_map(|p| {
                let (a, b) = self.plan.detuning_interval(Side::Signal, p);
                let (c, d) = self.plan.detuning_interval(Side::Idler, p);
                [a, b, c, d]
            })
            .collect();
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        let survival_s: Vec<f64> = (0..n).map(|p| self.photon_survival(Side::Signal, p)).collect();
        let survival_i: Vec<f64> = (0..n).map(|p| self.photon_survival(Side::Idler, p)).collect();
        edges
            .windows(2)
            .filter_map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                let signal = self.plan.locate(Side::Signal, self.plan.signal_wavelength(mid));
                let idler = self.plan.locate(Side::Idler, self.plan.idler_wavelength(mid));
                let cell = Cell {
                    signal,
                    idler,
                    p_signal: signal.map_or(0.0, |p| survival_s[p]),
                    p_idler: idler.map_or(0.0, |p| survival_i[p]),
                };
                (cell.any() > 0.0).then_some(((w[0], w[1]), cell))
            })
            .collect()
    }

    /// Rate of pair events the fused sampler draws, per second.
    pub fn sampled_pair_rate(&self) -> f64 {
        let cells = self.cells();
        cells
            .iter()
            .map(|((a, b), c)| self.source.interval_fraction(*a, *b) * c.any())
            .sum::<f64>()
            * self.source.pair_rate
    }

    /// Simulates an HV block and a DA block of `duration` seconds each.
    pub fn simulate(&self, duration: f64, seed: u64) -> Result<MonteCarloResult> {
        self.validate()?;
        ensure(duration > 0.0 && duration.is_finite(), "duration", || {
            format!("must be positive, got {duration}")
        })?;
        let cells = self.cells();
        let intervals: Vec<(f64, f64)> = cells.iter().map(|c| c.0).collect();
        let weights: Vec<f64> = cells.iter().map(|c| c.1.any()).collect();
        let cells: Vec<Cell> = cells.into_iter().map(|c| c.1).collect();
        let sampler = (!cells.is_empty()).then(|| IntervalSampler::new(&self.source, &intervals, &weights));
        let pair_rate = sampler.as_ref().map_or(0.0, |s| s.total_weight() * self.source.pair_rate);
        let n_pairs = self.plan.pairs.len();
        let event_rate = pair_rate + n_pairs as f64 * (self.alice.dark_rate + self.bob.dark_rate);
        let chunks = ((event_rate * duration / CHUNK_EVENTS).ceil() as u64).max(1);
        let chunk_len = duration / chunks as f64;
        let ctx = ChunkContext {
            setup: self,
            cells: &cells,
            sampler: sampler.as_ref(),
            pair_rate,
            chunk_len,
            seed,
        };
        let jobs: Vec<(Basis, u64)> = Basis::BOTH
            .iter()
            .flat_map(|&b| (0..chunks).map(move |c| (b, c)))
            .collect();
        let parts = jobs
            .par_iter()
            .map(|&(basis, chunk)| ctx.run(basis, chunk))
            .collect::<Result<Vec<_>>>()?;

        let mut channels: Vec<ChannelTally> = self
            .plan
            .pairs
            .iter()
            .map(|p| ChannelTally::new(format!("ch{}", p.index), p.index))
            .collect();
        let mut merged = (n_pairs > 1).then(|| ChannelTally::new("merged", 0));
        let mut pairs_simulated = 0;
        for part in &parts {
            pairs_simulated += part.pairs;
            for (acc, t) in channels.iter_mut().zip(&part.channels) {
                acc.absorb(t);
            }
            if let (Some(acc), Some(t)) = (merged.as_mut(), part.merged.as_ref()) {
                acc.absorb(t);
            }
        }
        for t in channels.iter_mut().chain(merged.iter_mut()) {
            t.counts_hv.duration = duration;
            t.counts_da.duration = duration;
        }
        Ok(MonteCarloResult {
            duration_per_basis: duration,
            chunks_per_basis: chunks,
            pairs_simulated,
            channels,
            merged,
        })
    }
}

/// Tallies of one Monte Carlo run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub duration_per_basis: f64,
    pub chunks_per_basis: u64,
    /// Pair events drawn (pairs with at least one surviving photon).
    pub pairs_simulated: u64,
    /// Each channel pair analysed on its own detectors.
    pub channels: Vec<ChannelTally>,
    /// All channels merged into one receiver per side; absent for single-pair plans.
    pub merged: Option<ChannelTally>,
}

struct ChunkContext<'a> {
    setup: &'a LinkSetup,
    cells: &'a [Cell],
    sampler: Option<&'a IntervalSampler>,
    pair_rate: f64,
    chunk_len: f64,
    seed: u64,
}

struct ChunkTally {
    pairs: u64,
    channels: Vec<ChannelTally>,
    merged: Option<ChannelTally>,
}

const LABEL_SOURCE: u64 = 1;
const LABEL_ALICE: u64 = 2;
const LABEL_BOB: u64 = 3;

fn basis_label(b: Basis) -> u64 {
    match b {
        Basis::HV => 0,
        Basis::DA => 1,
    }
}

impl ChunkContext<'_> {
    fn run(&self, basis: Basis, chunk: u64) -> Result<ChunkTally> {
        let s = self.setup;
        let n = s.plan.pairs.len();
        let bl = basis_label(basis);
        let mut alice: Vec<Vec<Arrival>> = vec![Vec::new(); n];
        let mut bob: Vec<Vec<Arrival>> = vec![Vec::new(); n];
        let mut pairs = 0u64;
        if let Some(sampler) = self.sampler {
            let mut rng = rng_from_seed(derive_seed(self.seed, &[LABEL_SOURCE, bl, chunk]));
            let vis: Vec<f64> = (0..n).map(|p| s.channel_visibility(p, basis)).collect();
            for t in poisson_times(self.pair_rate, self.chunk_len, &mut rng) {
                pairs += 1;
                let (k, _detuning) = sampler.sample(&mut rng);
                let c = self.cells[k];
                let (ps, pi) = (c.p_signal, c.p_idler);
                let u = rng.random::<f64>() * c.any();
                let (sig, idl) = if u < ps * pi {
                    (true, true)
                } else if u < ps {
                    (true, false)
                } else {
                    (false, true)
                };
                let (oa, ob) = if sig && idl {
                    measure_polarization(basis, vis[c.signal.expect("signal survives")], &mut rng)
                } else {
                    let o = basis.outcome(rng.random_range(0..2u8));
                    (o, o)
                };
                if sig {
                    alice[c.signal.expect("signal in band")].push(Arrival { time: t, outcome: oa });
                }
                if idl {
                    bob[c.idler.expect("idler in band")].push(Arrival { time: t, outcome: ob });
                }
            }
        }

        let det = |cfg: &DetectorConfig| DetectorConfig {
            efficiency: 1.0,
            ..cfg.clone()
        };
        let (cfg_a, cfg_b) = (det(&s.alice), det(&s.bob));
        let mut tags_a = Vec::with_capacity(n);
        let mut tags_b = Vec::with_capacity(n);
        for p in 0..n {
            let idx = s.plan.pairs[p].index;
            let pl = p as u64;
            tags_a.push(detect(
                &alice[p],
                &cfg_a,
                basis,
                ModuleId {
                    base_detector_id: 4 * p as u32,
                    channel_index: idx,
                },
                self.chunk_len,
                derive_seed(self.seed, &[LABEL_ALICE, bl, chunk, pl]),
            )?);
            tags_b.push(detect(
                &bob[p],
                &cfg_b,
                basis,
                ModuleId {
                    base_detector_id: 4 * p as u32 + 2,
                    channel_index: idx,
                },
                self.chunk_len,
                derive_seed(self.seed, &[LABEL_BOB, bl, chunk, pl]),
            )?);
        }
        drop((alice, bob));

        let channels = (0..n)
            .map(|p| {
                let pair = &s.plan.pairs[p];
                self.analyse(&tags_a[p], &tags_b[p], basis, format!("ch{}", pair.index), pair.index)
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = if n > 1 {
            let ra: Vec<&[TimeTag]> = tags_a.iter().map(|v| v.as_slice()).collect();
            let rb: Vec<&[TimeTag]> = tags_b.iter().map(|v| v.as_slice()).collect();
            let ma = merge_receivers(&ra, s.global_dead_time, s.tick())?;
            let mb = merge_receivers(&rb, s.global_dead_time, s.tick())?;
            Some(self.analyse(&ma, &mb, basis, "merged".into(), 0)?)
        } else {
            None
        };
        Ok(ChunkTally {
            pairs,
            channels,
            merged,
        })
    }

    fn analyse(&self, a: &[TimeTag], b: &[TimeTag], basis: Basis, label: String, index: u32) -> Result<ChannelTally> {
        let s = self.setup;
        let matches = find_coincidences(a, b, &s.window, s.tick())?;
        let mut t = ChannelTally::new(label, index);
        *t.counts_mut(basis) = tabulate(a, b, &matches, basis, index, self.chunk_len);
        let bi = basis_label(basis) as usize;
        t.singles_alice[bi] = a.len() as u64;
        t.singles_bob[bi] = b.len() as u64;
        t.accidentals[bi] = accidental_estimate(a, b, &s.window, s.accidental_delay, s.tick())?;
        Ok(t)
    }
}

impl MonteCarloResult {
    pub fn channel(&self, index: u32) -> Result<&ChannelTally> {
        self.channels
            .iter()
            .find(|c| c.channel_pair == index)
            .ok_or_else(|| Error::InvalidPlan(format!("no channel pair {index} in result")))
    }
}
