//! Wavelength channels, channel plans and deterministic demultiplexing.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::optics::{bandwidth_hz_to_nm, frequency_to_wavelength, wavelength_to_frequency};
use crate::source::PairEvent;

/// Default energy-matching tolerance for channel pairs, nm.
pub const ENERGY_MATCH_TOLERANCE_NM: f64 = 0.05;

/// Rounding slack allowed where neighbouring passbands touch, nm.
const PASSBAND_EDGE_TOLERANCE_NM: f64 = 1e-9;

/// Time-bandwidth constant used by [`coherence_time`]; 6.25 GHz maps to ~50 ps.
pub const COHERENCE_TIME_CONSTANT: f64 = 0.31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Signal,
    Idler,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Signal => "signal",
            Side::Idler => "idler",
        }
    }
}

/// One demultiplexed band with a top-hat passband `center ± fwhm/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WavelengthChannel {
    pub side: Side,
    pub index: u32,
    pub center_nm: f64,
    pub fwhm_nm: f64,
    pub diffraction_efficiency: f64,
}

impl WavelengthChannel {
    /// Half-open passband `[lo, hi)` in nm.
    pub fn passband(&self) -> (f64, f64) {
        (self.center_nm - 0.5 * self.fwhm_nm, self.center_nm + 0.5 * self.fwhm_nm)
    }

    pub fn contains(&self, wavelength_nm: f64) -> bool {
        let (lo, hi) = self.passband();
        wavelength_nm >= lo && wavelength_nm < hi
    }

    pub fn center_frequency(&self) -> f64 {
        wavelength_to_frequency(self.center_nm)
    }

    fn validate(&self) -> Result<()> {
        ensure(self.fwhm_nm > 0.0, "plan.fwhm_nm", || {
            format!("channel {} ({}) has non-positive fwhm", self.index, self.side.as_str())
        })?;
        ensure(
            self.diffraction_efficiency > 0.0 && self.diffraction_efficiency <= 1.0,
            "plan.diffraction_efficiency",
            || format!("channel {} efficiency must be in (0, 1]", self.index),
        )
    }
}

/// A correlated signal/idler channel pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPair {
    pub index: u32,
    pub signal: WavelengthChannel,
    pub idler: WavelengthChannel,
    /// Fraction of the source's polarisation visibility retained after this
    /// channel's polarisation compensation.
    #[serde(default = "one")]
    pub compensation_visibility: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPlan {
    pub pairs: Vec<ChannelPair>,
    pub spdc_center_nm: f64,
    /// Centre of the signal-side spectrum the plan was designed around, nm.
    pub signal_cwl_nm: f64,
    /// Centre of the idler-side spectrum, nm.
    pub idler_cwl_nm: f64,
}

/// Energy-matching residual of one channel pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairingResidual {
    pub signal_nm: f64,
    pub idler_nm: f64,
    /// `ν_s + ν_i − (ν(signal cwl) + ν(idler cwl))`, Hz.
    pub frequency_mismatch_hz: f64,
    /// The mismatch expressed as an idler wavelength offset, nm.
    pub wavelength_mismatch_nm: f64,
}

impl ChannelPlan {
    fn reference_sum_frequency(&self) -> f64 {
        wavelength_to_frequency(self.signal_cwl_nm) + wavelength_to_frequency(self.idler_cwl_nm)
    }

    /// Energy-matching residual of an arbitrary (signal, idler) wavelength pairing.
    pub fn pairing_residual(&self, signal_nm: f64, idler_nm: f64) -> PairingResidual {
        let df = wavelength_to_frequency(signal_nm) + wavelength_to_frequency(idler_nm)
            - self.reference_sum_frequency();
        PairingResidual {
            signal_nm,
            idler_nm,
            frequency_mismatch_hz: df,
            wavelength_mismatch_nm: bandwidth_hz_to_nm(idler_nm, df.abs()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_tolerance(ENERGY_MATCH_TOLERANCE_NM)
    }

    pub fn validate_with_tolerance(&self, tolerance_nm: f64) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidPlan("plan has no channel pairs".into()));
        }
        let mut indices: Vec<u32> = self.pairs.iter().map(|p| p.index).collect();
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidPlan("duplicate channel pair index".into()));
        }
        for p in &self.pairs {
            p.signal.validate()?;
            p.idler.validate()?;
            if p.signal.side != Side::Signal || p.idler.side != Side::Idler {
                return Err(Error::InvalidPlan(format!("pair {} has swapped sides", p.index)));
            }
            ensure(
                (0.0..=1.0).contains(&p.compensation_visibility),
                "plan.compensation_visibility",
                || format!("pair {} must lie in [0, 1]", p.index),
            )?;
            let r = self.pairing_residual(p.signal.center_nm, p.idler.center_nm);
            if r.wavelength_mismatch_nm > tolerance_nm {
                return Err(Error::InvalidPlan(format!(
                    "pair {} ({:.3} nm, {:.3} nm) is not energy matched: mismatch {:.3} nm > {:.3} nm",
                    p.index, p.signal.center_nm, p.idler.center_nm, r.wavelength_mismatch_nm, tolerance_nm
                )));
            }
        }
        for side in [Side::Signal, Side::Idler] {
            let mut bands: Vec<(f64, f64)> = self.channels(side).map(|c| c.passband()).collect();
            bands.sort_by(|a, b| a.0.total_cmp(&b.0));
            if bands.windows(2).any(|w| w[1].0 < w[0].1 - PASSBAND_EDGE_TOLERANCE_NM) {
                return Err(Error::InvalidPlan(format!(
                    "{} passbands overlap",
                    side.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn channels(&self, side: Side) -> impl Iterator<Item = &WavelengthChannel> {
        self.pairs.iter().map(move |p| match side {
            Side::Signal => &p.signal,
            Side::Idler => &p.idler,
        })
    }

    /// Position in `pairs` of the channel whose passband on `side` contains `wavelength_nm`.
    pub fn locate(&self, side: Side, wavelength_nm: f64) -> Option<usize> {
        self.channels(side).position(|c| c.contains(wavelength_nm))
    }

    pub fn signal_wavelength(&self, detuning_nm: f64) -> f64 {
        self.signal_cwl_nm + detuning_nm
    }

    pub fn idler_wavelength(&self, detuning_nm: f64) -> f64 {
        self.idler_cwl_nm - detuning_nm
    }

    /// Passband of one channel expressed as a half-open detuning interval.
    pub fn detuning_interval(&self, side: Side, pos: usize) -> (f64, f64) {
        let p = &self.pairs[pos];
        match side {
            Side::Signal => {
                let (lo, hi) = p.signal.passband();
                (lo - self.signal_cwl_nm, hi - self.signal_cwl_nm)
            }
            Side::Idler => {
                // idler = cwl − δ, so the wavelength interval flips.
                let (lo, hi) = p.idler.passband();
                (self.idler_cwl_nm - hi, self.idler_cwl_nm - lo)
            }
        }
    }

    pub fn find(&self, index: u32) -> Option<&ChannelPair> {
        self.pairs.iter().find(|p| p.index == index)
    }

    /// Restricts the plan to the listed channel pair indices.
    pub fn subset(&self, indices: &[u32]) -> Result<ChannelPlan> {
        let pairs: Vec<ChannelPair> = indices
            .iter()
            .map(|&i| {
                self.find(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidPlan(format!("no channel pair {i}")))
            })
            .collect::<Result<_>>()?;
        Ok(ChannelPlan { pairs, ..self.clone() })
    }

    /// Writes one row per channel: `index, side, center_nm, fwhm_nm, efficiency`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["index", "side", "center_nm", "fwhm_nm", "efficiency"])?;
        for p in &self.pairs {
            for c in [&p.signal, &p.idler] {
                w.write_record([
                    p.index.to_string(),
                    c.side.as_str().to_string(),
                    format!("{:.6}", c.center_nm),
                    format!("{:.6}", c.fwhm_nm),
                    format!("{:.4}", c.diffraction_efficiency),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Index of the channel pair whose signal passband contains the pair's signal
/// photon, or `None` when it falls outside every passband.
pub fn demux(pair: &PairEvent, plan: &ChannelPlan) -> Option<u32> {
    plan.locate(Side::Signal, plan.signal_wavelength(pair.detuning_nm))
        .map(|pos| plan.pairs[pos].index)
}

/// Per-side demultiplexing: `(signal channel, idler channel)`, each decided
/// from its own photon's wavelength.
pub fn demux_both(pair: &PairEvent, plan: &ChannelPlan) -> (Option<u32>, Option<u32>) {
    let s = plan
        .locate(Side::Signal, plan.signal_wavelength(pair.detuning_nm))
        .map(|pos| plan.pairs[pos].index);
    let i = plan
        .locate(Side::Idler, plan.idler_wavelength(pair.detuning_nm))
        .map(|pos| plan.pairs[pos].index);
    (s, i)
}

fn channel(side: Side, index: u32, center_nm: f64, fwhm_nm: f64, eff: f64) -> WavelengthChannel {
    WavelengthChannel {
        side,
        index,
        center_nm,
        fwhm_nm,
        diffraction_efficiency: eff,
    }
}

/// Signal-side centre wavelength used by the two-channel laboratory plan.
pub const TABLE1_SIGNAL_CWL_NM: f64 = 799.05;
/// Idler-side centre wavelength used by the two-channel laboratory plan.
pub const TABLE1_IDLER_CWL_NM: f64 = 821.05;

/// The two-pair laboratory plan. Pairs are formed by energy matching:
/// 798.80 nm with 821.31 nm (Ch.1) and 799.32 nm with 820.77 nm (Ch.2).
pub fn build_table1_plan() -> ChannelPlan {
    let pair = |index, s, i| ChannelPair {
        index,
        signal: channel(Side::Signal, index, s, 0.12, 0.70),
        idler: channel(Side::Idler, index, i, 0.24, 0.90),
        compensation_visibility: 1.0,
    };
    ChannelPlan {
        pairs: vec![pair(1, 798.80, 821.31), pair(2, 799.32, 820.77)],
        spdc_center_nm: 810.0,
        signal_cwl_nm: TABLE1_SIGNAL_CWL_NM,
        idler_cwl_nm: TABLE1_IDLER_CWL_NM,
    }
}

/// Energy-matching check of the laboratory table's published labelling
/// (λ1ˢ with λ1ⁱ, λ2ˢ with λ2ⁱ) against the matched pairing used by
/// [`build_table1_plan`].
#[derive(Debug, Clone, Serialize)]
pub struct Table1LabelingReport {
    pub labeled: [PairingResidual; 2],
    pub matched: [PairingResidual; 2],
    pub signal_mode_spacing_ghz: f64,
    pub idler_mode_spacing_ghz: f64,
}

pub fn table1_labeling_report() -> Table1LabelingReport {
    let plan = build_table1_plan();
    let (s1, s2, i1, i2) = (798.80, 799.32, 820.77, 821.31);
    Table1LabelingReport {
        labeled: [plan.pairing_residual(s1, i1), plan.pairing_residual(s2, i2)],
        matched: [plan.pairing_residual(s1, i2), plan.pairing_residual(s2, i1)],
        signal_mode_spacing_ghz: (wavelength_to_frequency(s1) - wavelength_to_frequency(s2)).abs() / 1e9,
        idler_mode_spacing_ghz: (wavelength_to_frequency(i1) - wavelength_to_frequency(i2)).abs() / 1e9,
    }
}

/// A frequency-grid plan together with the raw tiling statistics.
#[derive(Debug, Clone, Serialize)]
pub struct GridPlan {
    pub plan: ChannelPlan,
    /// Number of bands tiled into the window, paired or not.
    pub band_count: usize,
    pub unpaired_count: usize,
}

impl GridPlan {
    pub fn pair_count(&self) -> usize {
        self.plan.pairs.len()
    }
}

/// Closed-form number of bands of `spacing_hz` that fit in the window.
pub fn grid_band_count(window_low_nm: f64, window_high_nm: f64, spacing_hz: f64) -> usize {
    let span = wavelength_to_frequency(window_low_nm) - wavelength_to_frequency(window_high_nm);
    (span / spacing_hz + 1e-9).floor().max(0.0) as usize
}

/// Tiles the optical window with equally spaced bands and pairs them
/// symmetrically about the centre of the tiled frequency range.
///
/// Band `i` occupies `[f_lo + i·spacing, f_lo + (i+1)·spacing)`; band `i`
/// pairs with band `N−1−i`, and the middle band of an odd tiling is left
/// unpaired. Pair 1 is the pair nearest the centre.
pub fn build_grid_plan(
    window_low_nm: f64,
    window_high_nm: f64,
    spacing_hz: f64,
    bandwidth_hz: f64,
) -> Result<GridPlan> {
    ensure(
        window_low_nm > 0.0 && window_low_nm < window_high_nm,
        "window_low_nm",
        || format!("window [{window_low_nm}, {window_high_nm}] nm is empty"),
    )?;
    ensure(bandwidth_hz > 0.0, "channel_bandwidth", || {
        "must be positive".to_string()
    })?;
    ensure(spacing_hz >= bandwidth_hz, "channel_spacing", || {
        format!("spacing {spacing_hz} Hz is smaller than bandwidth {bandwidth_hz} Hz (bands overlap)")
    })?;
    let f_lo = wavelength_to_frequency(window_high_nm);
    let n = grid_band_count(window_low_nm, window_high_nm, spacing_hz);
    let f_center = f_lo + 0.5 * n as f64 * spacing_hz;
    let center_nm = frequency_to_wavelength(f_center);
    let band = |i: usize, side: Side, index: u32| {
        let f = f_lo + (i as f64 + 0.5) * spacing_hz;
        // Exact wavelength edges; the band is slightly asymmetric about c/f.
        let long = frequency_to_wavelength(f - 0.5 * bandwidth_hz);
        let short = frequency_to_wavelength(f + 0.5 * bandwidth_hz);
        channel(side, index, 0.5 * (long + short), long - short, 1.0)
    };
    let n_pairs = n / 2;
    let pairs = (0..n_pairs)
        .map(|k| {
            // k = 0 is the innermost pair.
            let idler_band = n_pairs - 1 - k;
            let signal_band = n - 1 - idler_band;
            let index = k as u32 + 1;
            ChannelPair {
                index,
                signal: band(signal_band, Side::Signal, index),
                idler: band(idler_band, Side::Idler, index),
                compensation_visibility: 1.0,
            }
        })
        .collect();
    Ok(GridPlan {
        plan: ChannelPlan {
            pairs,
            spdc_center_nm: center_nm,
            signal_cwl_nm: center_nm,
            idler_cwl_nm: center_nm,
        },
        band_count: n,
        unpaired_count: n - 2 * n_pairs,
    })
}

/// Coherence time `K/Δν` of a photon filtered to `bandwidth_hz`.
pub fn coherence_time(bandwidth_hz: f64) -> Result<f64> {
    ensure(bandwidth_hz > 0.0, "channel_bandwidth", || {
        format!("must be positive, got {bandwidth_hz}")
    })?;
    Ok(COHERENCE_TIME_CONSTANT / bandwidth_hz)
}
