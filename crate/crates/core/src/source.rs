//! SPDC pair source: spectrum, band integrals and Poisson pair emission.
//!
//! Spectra are expressed as a detuning `δ` (nm) from the side centre
//! wavelengths: the signal photon sits at `signal_cwl + δ` and its idler
//! partner at `idler_cwl − δ`. The detuning density is a Gaussian with the
//! configured FWHM.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{ensure, Error, Result};
use crate::rng::rng_from_seed;

const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_3; // 2·sqrt(2·ln 2)

/// Maximum allowed asymmetry of the side centre wavelengths about the SPDC centre.
pub const CWL_SYMMETRY_TOLERANCE_NM: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Centre wavelength of the signal (Alice) spectrum, nm.
    pub signal_cwl_nm: f64,
    /// Centre wavelength of the idler (Bob) spectrum, nm.
    pub idler_cwl_nm: f64,
    /// Degenerate SPDC wavelength, nm.
    pub spdc_center_nm: f64,
    /// Full width at half maximum of the detuning spectrum, nm.
    pub spectral_fwhm_nm: f64,
    /// Pairs per second generated over the whole spectrum, before any loss.
    pub pair_rate: f64,
    pub systematic_visibility_hv: f64,
    pub systematic_visibility_da: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        crate::calibration::Calibration::frozen().source_config()
    }
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(
            self.spectral_fwhm_nm > 0.0 && self.spectral_fwhm_nm.is_finite(),
            "source.spectral_fwhm_nm",
            || format!("must be positive, got {}", self.spectral_fwhm_nm),
        )?;
        ensure(
            self.pair_rate > 0.0 && self.pair_rate.is_finite(),
            "source.pair_rate",
            || format!("must be positive, got {}", self.pair_rate),
        )?;
        for (name, v) in [
            ("source.systematic_visibility_hv", self.systematic_visibility_hv),
            ("source.systematic_visibility_da", self.systematic_visibility_da),
        ] {
            ensure((0.0..=1.0).contains(&v), name, || {
                format!("must lie in [0, 1], got {v}")
            })?;
        }
        let mid = 0.5 * (self.signal_cwl_nm + self.idler_cwl_nm);
        ensure(
            (mid - self.spdc_center_nm).abs() <= CWL_SYMMETRY_TOLERANCE_NM,
            "source.spdc_center_nm",
            || {
                format!(
                    "signal/idler centres {} / {} nm are not symmetric about {} nm",
                    self.signal_cwl_nm, self.idler_cwl_nm, self.spdc_center_nm
                )
            },
        )?;
        Ok(())
    }

    /// Standard deviation of the Gaussian detuning spectrum, nm.
    pub fn sigma_nm(&self) -> f64 {
        self.spectral_fwhm_nm / FWHM_TO_SIGMA
    }

    /// Normalised spectrum (peak 1) at `detuning_nm`.
    pub fn spectral_density(&self, detuning_nm: f64) -> f64 {
        let z = detuning_nm / self.sigma_nm();
        (-0.5 * z * z).exp()
    }

    /// Fraction of all pairs whose detuning lies in `[lo, hi)`.
    pub fn interval_fraction(&self, lo_nm: f64, hi_nm: f64) -> f64 {
        if hi_nm <= lo_nm {
            return 0.0;
        }
        let s = self.sigma_nm();
        (std_normal_cdf(hi_nm / s) - std_normal_cdf(lo_nm / s)).max(0.0)
    }

    /// Fraction of the pair rate falling in a top-hat band of width
    /// `band_fwhm_nm` centred at detuning `band_center_nm`.
    pub fn band_fraction(&self, band_center_nm: f64, band_fwhm_nm: f64) -> f64 {
        let half = 0.5 * band_fwhm_nm;
        self.interval_fraction(band_center_nm - half, band_center_nm + half)
    }

    /// Full-spectrum pair rate implied by a brightness quoted inside a narrow
    /// band of `reference_band_nm` centred on the spectrum peak.
    pub fn pair_rate_from_band_brightness(&self, band_rate: f64, reference_band_nm: f64) -> f64 {
        band_rate / self.band_fraction(0.0, reference_band_nm)
    }

    pub fn signal_wavelength(&self, detuning_nm: f64) -> f64 {
        self.signal_cwl_nm + detuning_nm
    }

    pub fn idler_wavelength(&self, detuning_nm: f64) -> f64 {
        self.idler_cwl_nm - detuning_nm
    }
}

/// One photon pair emitted by the source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEvent {
    /// Emission time, seconds.
    pub emission_time: f64,
    /// Spectral detuning of the signal photon from its centre, nm.
    pub detuning_nm: f64,
    pub correlation_id: u64,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// Samples detunings from the Gaussian spectrum restricted to a weighted union
/// of disjoint intervals.
///
/// Interval `k` is chosen with probability proportional to
/// `weight_k · mass_k`, where `mass_k` is the spectral mass of the interval;
/// the detuning is then drawn from the spectrum truncated to that interval.
#[derive(Debug, Clone)]
pub struct IntervalSampler {
    sigma: f64,
    intervals: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
    total: f64,
}

impl IntervalSampler {
    pub fn new(source: &SourceConfig, intervals: &[(f64, f64)], weights: &[f64]) -> Self {
        assert_eq!(intervals.len(), weights.len());
        let mut cumulative = Vec::with_capacity(intervals.len());
        let mut acc = 0.0;
        for (&(lo, hi), &w) in intervals.iter().zip(weights) {
            acc += w * source.interval_fraction(lo, hi);
            cumulative.push(acc);
        }
        Self {
            sigma: source.sigma_nm(),
            intervals: intervals.to_vec(),
            cumulative,
            total: acc,
        }
    }

    /// Sum of `weight · mass` over all intervals.
    pub fn total_weight(&self) -> f64 {
        self.total
    }

    /// Returns `(interval index, detuning)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, f64) {
        let u = rng.random::<f64>() * self.total;
        let k = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.intervals.len() - 1);
        let (lo, hi) = self.intervals[k];
        (k, truncated_gaussian(self.sigma, lo, hi, rng))
    }
}

/// Draws from N(0, σ²) truncated to `[lo, hi)`.
fn truncated_gaussian<R: Rng + ?Sized>(sigma: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi - lo < sigma {
        // Narrow interval: uniform proposal with density-ratio acceptance.
        let peak = if lo > 0.0 {
            lo
        } else if hi < 0.0 {
            hi
        } else {
            0.0
        };
        let log_peak = -0.5 * (peak / sigma).powi(2);
        loop {
            let x = lo + (hi - lo) * rng.random::<f64>();
            let log_ratio = -0.5 * (x / sigma).powi(2) - log_peak;
            if rng.random::<f64>().ln() <= log_ratio {
                return x;
            }
        }
    }
    let (plo, phi) = (std_normal_cdf(lo / sigma), std_normal_cdf(hi / sigma));
    let p = plo + (phi - plo) * rng.random::<f64>();
    (sigma * std_normal_quantile(p)).clamp(lo, hi)
}

/// Emission times of a homogeneous Poisson process of `rate` on `[0, duration)`.
pub(crate) fn poisson_times<R: Rng + ?Sized>(rate: f64, duration: f64, rng: &mut R) -> Vec<f64> {
    if rate <= 0.0 {
        return Vec::new();
    }
    let exp = Exp::new(rate).expect("positive rate");
    let mut times = Vec::with_capacity((rate * duration * 1.05 + 16.0) as usize);
    let mut t = exp.sample(rng);
    while t < duration {
        times.push(t);
        t += exp.sample(rng);
    }
    times
}

/// Samples the full-spectrum pair stream of `config` over `[0, duration)`.
pub fn sample_pair_stream(config: &SourceConfig, duration: f64, seed: u64) -> Result<Vec<PairEvent>> {
    config.validate()?;
    check_duration(duration)?;
    let mut rng = rng_from_seed(seed);
    let normal = Normal::new(0.0, config.sigma_nm()).expect("valid sigma");
    let times = poisson_times(config.pair_rate, duration, &mut rng);
    Ok(times
        .into_iter()
        .enumerate()
        .map(|(i, t)| PairEvent {
            emission_time: t,
            detuning_nm: normal.sample(&mut rng),
            correlation_id: i as u64,
        })
        .collect())
}

/// Samples only the pairs whose detuning lies in one of the disjoint
/// `intervals`. This is the exact restriction of [`sample_pair_stream`] to
/// that detuning set: a Poisson process of rate `pair_rate × mass`.
pub fn sample_pair_stream_in(
    config: &SourceConfig,
    intervals: &[(f64, f64)],
    duration: f64,
    seed: u64,
) -> Result<Vec<PairEvent>> {
    config.validate()?;
    check_duration(duration)?;
    check_disjoint(intervals)?;
    let mut rng = rng_from_seed(seed);
    let sampler = IntervalSampler::new(config, intervals, &vec![1.0; intervals.len()]);
    let times = poisson_times(config.pair_rate * sampler.total_weight(), duration, &mut rng);
    Ok(times
        .into_iter()
        .enumerate()
        .map(|(i, t)| PairEvent {
            emission_time: t,
            detuning_nm: sampler.sample(&mut rng).1,
            correlation_id: i as u64,
        })
        .collect())
}

pub(crate) fn check_duration(duration: f64) -> Result<()> {
    ensure(duration > 0.0 && duration.is_finite(), "duration", || {
        format!("must be positive, got {duration}")
    })
}

fn check_disjoint(intervals: &[(f64, f64)]) -> Result<()> {
    let mut sorted = intervals.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in sorted.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::invalid("intervals", "detuning intervals overlap"));
        }
    }
    if sorted.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(Error::invalid("intervals", "empty detuning interval"));
    }
    Ok(())
}
