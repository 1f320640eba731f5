//! Frozen calibration shared by every scenario.
//!
//! The values live in `scenarios/calibration.toml`. The `[fitted]` section
//! is produced by [`Calibration::fit`] from the `[targets]` section and is
//! checked against a fresh fit in the tests, so the file cannot silently
//! drift from the model.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::channel::{build_table1_plan, ChannelPlan};
use crate::coincidence::CoincidenceWindow;
use crate::detection::DetectorConfig;
use crate::error::{ensure, Result};
use crate::keyrate::{analytic_rates, qber_threshold, AnalyticLinkModel, LinkTemplate};
use crate::simulation::LinkSetup;
use crate::source::SourceConfig;

const FROZEN: &str = include_str!("../../../scenarios/calibration.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceCalibration {
    pub spdc_center_nm: f64,
    pub signal_cwl_nm: f64,
    pub idler_cwl_nm: f64,
    pub spectral_fwhm_nm: f64,
    /// Detected pairs/s per mW of pump inside `brightness_band_nm` at the peak.
    pub brightness_per_mw: f64,
    pub brightness_band_nm: f64,
    pub pump_power_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverCalibration {
    pub coincidence_window: f64,
    pub global_dead_time: f64,
    pub accidental_delay: f64,
    pub f_ec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Targets {
    pub loss_db: f64,
    pub ch1_qber: f64,
    pub merged_qber: f64,
    /// Bandwidth at which the source-limited key vanishes in the scaling model, GHz.
    pub cutoff_bandwidth_ghz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fitted {
    pub systematic_visibility: f64,
    pub ch2_compensation_visibility: f64,
    /// Pairs/s per GHz of channel bandwidth at the scaling grid's spectral density.
    pub spectral_density_per_ghz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingCalibration {
    /// Receiver efficiency multiplying the link transmittance; 1 when the
    /// loss axis already counts every loss between source and click.
    pub receiver_efficiency: f64,
    pub dark_rate: f64,
    pub reference_bandwidth_ghz: f64,
    pub pair_rate_bracket: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub source: SourceCalibration,
    pub detector: DetectorConfig,
    pub receiver: ReceiverCalibration,
    pub scaling: ScalingCalibration,
    pub targets: Targets,
    pub fitted: Fitted,
}

impl Calibration {
    pub fn frozen() -> &'static Calibration {
        static CELL: OnceLock<Calibration> = OnceLock::new();
        CELL.get_or_init(|| Calibration::parse(FROZEN).expect("embedded calibration is valid"))
    }

    pub fn parse(text: &str) -> Result<Calibration> {
        Ok(toml::from_str(text)?)
    }

    pub fn source_config(&self) -> SourceConfig {
        let s = &self.source;
        let mut cfg = SourceConfig {
            signal_cwl_nm: s.signal_cwl_nm,
            idler_cwl_nm: s.idler_cwl_nm,
            spdc_center_nm: s.spdc_center_nm,
            spectral_fwhm_nm: s.spectral_fwhm_nm,
            pair_rate: 1.0,
            systematic_visibility_hv: self.fitted.systematic_visibility,
            systematic_visibility_da: self.fitted.systematic_visibility,
        };
        cfg.pair_rate =
            cfg.pair_rate_from_band_brightness(s.brightness_per_mw * s.pump_power_mw, s.brightness_band_nm);
        cfg
    }

    pub fn detector_config(&self) -> DetectorConfig {
        self.detector.clone()
    }

    pub fn window(&self) -> CoincidenceWindow {
        CoincidenceWindow {
            t_c: self.receiver.coincidence_window,
        }
    }

    /// Laboratory two-channel plan with the calibrated Ch.2 compensation.
    pub fn table1_plan(&self) -> ChannelPlan {
        let mut plan = build_table1_plan();
        plan.pairs[1].compensation_visibility = self.fitted.ch2_compensation_visibility;
        plan
    }

    pub fn table1_setup(&self, loss_db: f64) -> LinkSetup {
        LinkSetup {
            source: self.source_config(),
            plan: self.table1_plan(),
            alice: self.detector_config(),
            bob: self.detector_config(),
            window: self.window(),
            global_dead_time: self.receiver.global_dead_time,
            loss_db,
            extra_signal_loss: 0.0,
            extra_idler_loss: 0.0,
            f_ec: self.receiver.f_ec,
            accidental_delay: self.receiver.accidental_delay,
        }
    }

    /// Identical-channel template for the n-channel projections. Channel
    /// timing and systematic QBER follow the laboratory Ch.1.
    pub fn scaling_template(&self) -> LinkTemplate {
        let ch1 = self.table1_setup(0.0).analytic_model(0);
        let sc = &self.scaling;
        LinkTemplate {
            base: AnalyticLinkModel {
                pair_rate_in_band: self.scaling_pair_rate(sc.reference_bandwidth_ghz),
                unpaired_rate_alice: 0.0,
                unpaired_rate_bob: 0.0,
                dark_rate_alice: sc.dark_rate,
                dark_rate_bob: sc.dark_rate,
                ..ch1
            },
            receiver_efficiency_alice: sc.receiver_efficiency,
            receiver_efficiency_bob: sc.receiver_efficiency,
        }
    }

    /// In-band pair rate of a scaling-grid channel of `bandwidth_ghz`.
    pub fn scaling_pair_rate(&self, bandwidth_ghz: f64) -> f64 {
        self.fitted.spectral_density_per_ghz * bandwidth_ghz
    }

    /// Refits the `[fitted]` section from the targets.
    pub fn fit(&self) -> Result<Fitted> {
        let mut cal = self.clone();
        let t = &self.targets;

        // Ch.1 alone at the calibration loss fixes the source visibility.
        let v = bisect(0.5, 1.0, |v| {
            cal.fitted.systematic_visibility = v;
            t.ch1_qber - cal.table1_setup(t.loss_db).analytic_channel(0).qber
        })?;
        cal.fitted.systematic_visibility = v;

        // The merged receiver's QBER then fixes Ch.2's compensation.
        let c = bisect(0.5, 1.0, |c| {
            cal.fitted.ch2_compensation_visibility = c;
            t.merged_qber - cal.table1_setup(t.loss_db).analytic_merged().qber
        })?;
        cal.fitted.ch2_compensation_visibility = c;

        // The scaling density puts the key cutoff at the target bandwidth.
        // The QBER of a fixed-density channel is lowest at zero loss, so the
        // cutoff channel then has no key at any loss.
        let q_th = qber_threshold(cal.receiver.f_ec)?;
        let rho = bisect(1e4, 1e9, |rho| {
            cal.fitted.spectral_density_per_ghz = rho;
            let m = cal.scaling_template().at_loss(0.0).with_pair_rate(rho * t.cutoff_bandwidth_ghz);
            q_th - analytic_rates(&m).qber
        })?;
        Ok(Fitted {
            systematic_visibility: v,
            ch2_compensation_visibility: c,
            spectral_density_per_ghz: rho,
        })
    }
}

/// Root of a function that is positive at `lo` and negative at `hi`
/// (or vice versa), by bisection to relative precision 1e-12.
fn bisect(mut lo: f64, mut hi: f64, mut f: impl FnMut(f64) -> f64) -> Result<f64> {
    let f_lo = f(lo);
    let f_hi = f(hi);
    ensure(f_lo.signum() != f_hi.signum(), "calibration", || {
        format!("target not bracketed in [{lo}, {hi}]")
    })?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (hi - lo) <= 1e-12 * mid.abs() {
            break;
        }
        if f(mid).signum() == f_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
