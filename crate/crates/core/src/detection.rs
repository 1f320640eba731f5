//! Link loss, polarisation measurement and the detector chain that turns
//! photon arrivals into time tags.

use std::cmp::Ordering;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::optics::db_to_transmittance;
use crate::rng::rng_from_seed;
use crate::source::{check_duration, poisson_times, PairEvent};

/// Time-tagger resolution, seconds.
pub const TAGGER_TICK: f64 = 1.0 / 12.15e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Basis {
    HV,
    DA,
}

impl Basis {
    pub const BOTH: [Basis; 2] = [Basis::HV, Basis::DA];

    pub fn outcome(self, output: u8) -> Outcome {
        match (self, output) {
            (Basis::HV, 0) => Outcome::H,
            (Basis::HV, _) => Outcome::V,
            (Basis::DA, 0) => Outcome::D,
            (Basis::DA, _) => Outcome::A,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Basis::HV => "HV",
            Basis::DA => "DA",
        }
    }
}

/// Polarisation outcome recorded with a tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    H,
    V,
    D,
    A,
}

impl Outcome {
    /// Output port of the analyser: 0 for H/D, 1 for V/A.
    pub fn output(self) -> u8 {
        match self {
            Outcome::H | Outcome::D => 0,
            Outcome::V | Outcome::A => 1,
        }
    }

    pub fn basis(self) -> Basis {
        match self {
            Outcome::H | Outcome::V => Basis::HV,
            Outcome::D | Outcome::A => Basis::DA,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::H => "H",
            Outcome::V => "V",
            Outcome::D => "D",
            Outcome::A => "A",
        }
    }
}

/// Parameters of one polarisation-analyser module: two physical detectors
/// (one per analyser output) sharing these settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub efficiency: f64,
    /// Dark-count rate of the whole module (both outputs together), counts/s.
    pub dark_rate: f64,
    /// Standard deviation of the Gaussian timing jitter per detection, s.
    pub jitter_sigma: f64,
    /// Non-paralysable dead time of each physical detector, s.
    pub dead_time: f64,
    /// Time-tagger resolution, s.
    #[serde(default = "default_tick")]
    pub tick: f64,
}

fn default_tick() -> f64 {
    TAGGER_TICK
}

impl Default for DetectorConfig {
    fn default() -> Self {
        crate::calibration::Calibration::frozen().detector_config()
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.efficiency > 0.0 && self.efficiency <= 1.0,
            "detectors.efficiency",
            || format!("must be in (0, 1], got {}", self.efficiency),
        )?;
        ensure(self.dark_rate >= 0.0, "detectors.dark_rate", || {
            format!("must be non-negative, got {}", self.dark_rate)
        })?;
        ensure(self.jitter_sigma >= 0.0, "detectors.jitter_sigma", || {
            format!("must be non-negative, got {}", self.jitter_sigma)
        })?;
        ensure(self.dead_time >= 0.0, "detectors.dead_time", || {
            format!("must be non-negative, got {}", self.dead_time)
        })?;
        ensure(self.tick > 0.0, "detectors.tick", || {
            format!("must be positive, got {}", self.tick)
        })
    }

    /// Full width at half maximum of the relative jitter between two such detectors.
    pub fn pair_jitter_fwhm(&self) -> f64 {
        2.354_820_045 * std::f64::consts::SQRT_2 * self.jitter_sigma
    }
}

/// One recorded detection event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeTag {
    pub detector_id: u32,
    /// Timestamp in tagger ticks.
    pub tick_time: i64,
    pub outcome: Outcome,
    pub channel_index: u32,
    /// True when the tag is a dark count rather than a photon.
    #[serde(default)]
    pub dark: bool,
}

impl TimeTag {
    fn order_key(&self) -> (i64, u32) {
        (self.tick_time, self.detector_id)
    }
}

/// A photon reaching an analyser, with its already-projected outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub time: f64,
    pub outcome: Outcome,
}

/// Identifies the analyser module a tag stream belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleId {
    /// Detector id of output 0; output 1 is `base_detector_id + 1`.
    pub base_detector_id: u32,
    pub channel_index: u32,
}

/// A pair event with independent survival flags for its two photons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmittedPair {
    pub pair: PairEvent,
    pub signal_survives: bool,
    pub idler_survives: bool,
}

/// Per-photon survival probability for a symmetric split of `total_loss_db`.
pub fn link_survival(total_loss_db: f64) -> f64 {
    db_to_transmittance(0.5 * total_loss_db)
}

/// Applies the symmetric link attenuation plus side-specific extra losses.
pub fn transmit(
    stream: &[PairEvent],
    total_loss_db: f64,
    extra_signal_loss: f64,
    extra_idler_loss: f64,
    seed: u64,
) -> Result<Vec<TransmittedPair>> {
    ensure(total_loss_db >= 0.0, "total_loss_db", || {
        format!("must be non-negative, got {total_loss_db}")
    })?;
    for (name, v) in [("extra_signal_loss", extra_signal_loss), ("extra_idler_loss", extra_idler_loss)] {
        ensure((0.0..=1.0).contains(&v), name, || format!("must be in [0, 1], got {v}"))?;
    }
    let t = link_survival(total_loss_db);
    let (ps, pi) = (t * (1.0 - extra_signal_loss), t * (1.0 - extra_idler_loss));
    let mut rng = rng_from_seed(seed);
    Ok(stream
        .iter()
        .map(|&pair| TransmittedPair {
            pair,
            signal_survives: rng.random::<f64>() < ps,
            idler_survives: rng.random::<f64>() < pi,
        })
        .collect())
}

/// Draws the joint (signal, idler) outcome of one singlet pair measured by
/// both parties in `basis`, for a state of systematic visibility `visibility`.
///
/// Each anti-correlated combination has probability `(1+v)/4`, each
/// correlated one `(1−v)/4`.
pub fn measure_polarization<R: Rng + ?Sized>(
    basis: Basis,
    visibility: f64,
    rng: &mut R,
) -> (Outcome, Outcome) {
    let a = rng.random_range(0..2u8);
    let error = rng.random::<f64>() < 0.5 * (1.0 - visibility);
    let b = if error { a } else { 1 - a };
    (basis.outcome(a), basis.outcome(b))
}

struct Event {
    time: f64,
    output: u8,
    dark: bool,
}

/// Converts sorted photon arrivals at one analyser into time tags.
///
/// Pipeline: efficiency thinning, dark counts (Poisson, uniform output),
/// Gaussian jitter, re-sort, non-paralysable dead time per physical
/// detector, quantisation to ticks.
pub fn detect(
    arrivals: &[Arrival],
    config: &DetectorConfig,
    basis: Basis,
    module: ModuleId,
    duration: f64,
    seed: u64,
) -> Result<Vec<TimeTag>> {
    config.validate()?;
    check_duration(duration)?;
    if let Some(pos) = arrivals.windows(2).position(|w| w[1].time < w[0].time) {
        return Err(Error::Unsorted {
            stream: "arrivals".into(),
            position: pos + 1,
        });
    }
    let mut rng = rng_from_seed(seed);

    let mut events: Vec<Event> = Vec::with_capacity(
        (arrivals.len() as f64 * config.efficiency + config.dark_rate * duration * 1.1) as usize + 16,
    );
    for a in arrivals {
        if config.efficiency >= 1.0 || rng.random::<f64>() < config.efficiency {
            events.push(Event {
                time: a.time,
                output: a.outcome.output(),
                dark: false,
            });
        }
    }
    for t in poisson_times(config.dark_rate, duration, &mut rng) {
        events.push(Event {
            time: t,
            output: rng.random_range(0..2u8),
            dark: true,
        });
    }
    if config.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, config.jitter_sigma).expect("valid jitter");
        for e in &mut events {
            e.time += normal.sample(&mut rng);
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.output.cmp(&b.output)));

    let mut last = [f64::NEG_INFINITY; 2];
    let mut tags = Vec::with_capacity(events.len());
    for e in events {
        let slot = &mut last[e.output as usize];
        if e.time - *slot < config.dead_time {
            continue;
        }
        *slot = e.time;
        tags.push(TimeTag {
            detector_id: module.base_detector_id + e.output as u32,
            tick_time: (e.time / config.tick).round() as i64,
            outcome: basis.outcome(e.output),
            channel_index: module.channel_index,
            dark: e.dark,
        });
    }
    // Rounding can swap two outputs that land within half a tick.
    tags.sort_by_key(TimeTag::order_key);
    Ok(tags)
}

pub(crate) fn check_sorted(tags: &[TimeTag], stream: &str) -> Result<()> {
    match tags.windows(2).position(|w| w[1].tick_time < w[0].tick_time) {
        Some(pos) => Err(Error::Unsorted {
            stream: stream.into(),
            position: pos + 1,
        }),
        None => Ok(()),
    }
}

fn cmp_tags(a: &TimeTag, b: &TimeTag) -> Ordering {
    a.order_key().cmp(&b.order_key())
}

/// Dead time in ticks: an event survives only if it is more than this many
/// ticks after the last kept event.
fn dead_ticks(global_dead_time: f64, tick: f64) -> f64 {
    global_dead_time / tick
}

/// Merges two detectors' streams into the stream of a single virtual detector.
///
/// The streams are merge-sorted by `(tick_time, detector_id)`; an event is kept
/// only if it is strictly later than the last kept event plus
/// `global_dead_time`, so simultaneous events collapse to the first one.
pub fn merge_detectors(
    tags_a: &[TimeTag],
    tags_b: &[TimeTag],
    global_dead_time: f64,
    tick: f64,
) -> Result<Vec<TimeTag>> {
    merge_many(&[tags_a, tags_b], global_dead_time, tick)
}

/// N-way version of [`merge_detectors`].
pub fn merge_many(streams: &[&[TimeTag]], global_dead_time: f64, tick: f64) -> Result<Vec<TimeTag>> {
    ensure(global_dead_time >= 0.0, "global_dead_time", || {
        format!("must be non-negative, got {global_dead_time}")
    })?;
    for (i, s) in streams.iter().enumerate() {
        check_sorted(s, &format!("merge input {i}"))?;
    }
    let mut all: Vec<TimeTag> = Vec::with_capacity(streams.iter().map(|s| s.len()).sum());
    for s in streams {
        all.extend_from_slice(s);
    }
    // Stable sort keeps the input-stream order for exact (tick, id) ties.
    all.sort_by(cmp_tags);
    let dead = dead_ticks(global_dead_time, tick);
    let mut out: Vec<TimeTag> = Vec::with_capacity(all.len());
    for tag in all {
        match out.last() {
            Some(last) if (tag.tick_time - last.tick_time) as f64 <= dead => {}
            _ => out.push(tag),
        }
    }
    Ok(out)
}

/// Merges several receivers (one per wavelength channel) into one analyser:
/// the output-0 detectors are merged together, as are the output-1 detectors.
pub fn merge_receivers(channels: &[&[TimeTag]], global_dead_time: f64, tick: f64) -> Result<Vec<TimeTag>> {
    let mut per_output: [Vec<Vec<TimeTag>>; 2] = [Vec::new(), Vec::new()];
    for (i, c) in channels.iter().enumerate() {
        check_sorted(c, &format!("receiver {i}"))?;
        for out in 0..2u8 {
            per_output[out as usize].push(c.iter().filter(|t| t.outcome.output() == out).copied().collect());
        }
    }
    let mut merged = Vec::new();
    for streams in &per_output {
        let refs: Vec<&[TimeTag]> = streams.iter().map(|v| v.as_slice()).collect();
        merged.extend(merge_many(&refs, global_dead_time, tick)?);
    }
    merged.sort_by(cmp_tags);
    Ok(merged)
}
