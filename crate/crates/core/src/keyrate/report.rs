//! Per-channel and aggregate key-rate reports built from count matrices.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{basis_key_fraction, qber, visibility};
use crate::coincidence::CountsMatrix;
use crate::detection::Basis;
use crate::error::{ensure, Result};

/// Raw tallies of one analysed channel (or of the merged receivers) over an
/// HV block and a DA block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelTally {
    pub label: String,
    pub channel_pair: u32,
    pub counts_hv: CountsMatrix,
    pub counts_da: CountsMatrix,
    /// Tags recorded per basis block, Alice then Bob.
    pub singles_alice: [u64; 2],
    pub singles_bob: [u64; 2],
    /// Delayed-window accidental estimates per basis block.
    pub accidentals: [u64; 2],
}

impl ChannelTally {
    pub fn new(label: impl Into<String>, channel_pair: u32) -> Self {
        Self {
            label: label.into(),
            channel_pair,
            counts_hv: CountsMatrix::empty(Basis::HV, channel_pair),
            counts_da: CountsMatrix::empty(Basis::DA, channel_pair),
            singles_alice: [0; 2],
            singles_bob: [0; 2],
            accidentals: [0; 2],
        }
    }

    pub fn counts(&self, basis: Basis) -> &CountsMatrix {
        match basis {
            Basis::HV => &self.counts_hv,
            Basis::DA => &self.counts_da,
        }
    }

    pub fn counts_mut(&mut self, basis: Basis) -> &mut CountsMatrix {
        match basis {
            Basis::HV => &mut self.counts_hv,
            Basis::DA => &mut self.counts_da,
        }
    }

    /// Accumulates another tally of the same channel (e.g. a later time chunk).
    pub fn absorb(&mut self, other: &ChannelTally) {
        self.counts_hv += &other.counts_hv;
        self.counts_da += &other.counts_da;
        for i in 0..2 {
            self.singles_alice[i] += other.singles_alice[i];
            self.singles_bob[i] += other.singles_bob[i];
            self.accidentals[i] += other.accidentals[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelKeyReport {
    pub label: String,
    pub channel_pair: u32,
    pub counts_hv: CountsMatrix,
    pub counts_da: CountsMatrix,
    pub visibility_hv: Option<f64>,
    pub visibility_da: Option<f64>,
    pub qber_hv: Option<f64>,
    pub qber_da: Option<f64>,
    /// Erroneous over total coincidences, both bases pooled.
    pub qber: Option<f64>,
    /// Binomial standard error of the pooled QBER.
    pub qber_sigma: Option<f64>,
    pub coincidences: u64,
    pub secure_key_bits: f64,
    /// Bits per second of total recording time (both basis blocks).
    pub secure_key_rate: f64,
    /// Delta-method standard error of `secure_key_rate`.
    pub secure_key_rate_sigma: f64,
    pub singles_rate_alice: f64,
    pub singles_rate_bob: f64,
    pub accidentals: u64,
    pub accidental_rate: f64,
    pub measurement_time: f64,
}

/// Error fraction at which binomial spreads are evaluated. A sample with
/// no errors (or only errors) falls back to the Laplace estimate, so the
/// spread stays finite and nonzero.
fn variance_point(errors: u64, total: u64) -> f64 {
    if errors == 0 || errors == total {
        (errors as f64 + 1.0) / (total as f64 + 2.0)
    } else {
        errors as f64 / total as f64
    }
}

impl ChannelKeyReport {
    pub fn from_tally(tally: &ChannelTally, f_ec: f64) -> Result<Self> {
        ensure(f_ec >= 1.0, "f_ec", || format!("must be at least 1, got {f_ec}"))?;
        let (hv, da) = (&tally.counts_hv, &tally.counts_da);
        let time = hv.duration + da.duration;
        let mut bits = 0.0;
        let mut var = 0.0;
        for m in [hv, da] {
            let n = m.total() as f64;
            if n == 0.0 {
                continue;
            }
            let q = m.erroneous() as f64 / n;
            let frac = basis_key_fraction(q, f_ec);
            bits += n * frac;
            if frac > 0.0 {
                let qv = variance_point(m.erroneous(), m.total());
                // d/dQ of ½(1 − (1+f)·H2(Q)).
                let slope = 0.5 * (1.0 + f_ec) * ((1.0 - qv) / qv).log2();
                var += n * frac * frac + n * slope * slope * qv * (1.0 - qv);
            }
        }
        let total = hv.total() + da.total();
        let err = hv.erroneous() + da.erroneous();
        let q = (total > 0).then(|| err as f64 / total as f64);
        let per_time = |x: f64| if time > 0.0 { x / time } else { 0.0 };
        let accidentals = tally.accidentals[0] + tally.accidentals[1];
        Ok(Self {
            label: tally.label.clone(),
            channel_pair: tally.channel_pair,
            counts_hv: *hv,
            counts_da: *da,
            visibility_hv: visibility(hv),
            visibility_da: visibility(da),
            qber_hv: qber(hv),
            qber_da: qber(da),
            qber: q,
            qber_sigma: q.map(|_| {
                let qv = variance_point(err, total);
                (qv * (1.0 - qv) / total as f64).sqrt()
            }),
            coincidences: total,
            secure_key_bits: bits,
            secure_key_rate: per_time(bits),
            secure_key_rate_sigma: per_time(var.sqrt()),
            singles_rate_alice: per_time((tally.singles_alice[0] + tally.singles_alice[1]) as f64),
            singles_rate_bob: per_time((tally.singles_bob[0] + tally.singles_bob[1]) as f64),
            accidentals,
            accidental_rate: per_time(accidentals as f64),
            measurement_time: time,
        })
    }
}

/// Key-rate report for a set of channels analysed together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub f_ec: f64,
    pub channels: Vec<ChannelKeyReport>,
    pub total_secure_key_bits: f64,
    pub total_secure_key_rate: f64,
}

impl KeyRateReport {
    pub fn from_tallies(tallies: &[ChannelTally], f_ec: f64) -> Result<Self> {
        let channels = tallies
            .iter()
            .map(|t| ChannelKeyReport::from_tally(t, f_ec))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            f_ec,
            total_secure_key_bits: channels.iter().map(|c| c.secure_key_bits).sum(),
            total_secure_key_rate: channels.iter().map(|c| c.secure_key_rate).sum(),
            channels,
        })
    }

    pub fn channel(&self, label: &str) -> Option<&ChannelKeyReport> {
        self.channels.iter().find(|c| c.label == label)
    }

    pub const CSV_HEADER: [&'static str; 17] = [
        "label",
        "channel_pair",
        "cc_hh",
        "cc_hv",
        "cc_vh",
        "cc_vv",
        "cc_dd",
        "cc_da",
        "cc_ad",
        "cc_aa",
        "qber_hv",
        "qber_da",
        "qber",
        "secure_key_bits",
        "secure_key_rate",
        "singles_rate_alice",
        "singles_rate_bob",
    ];

    /// One row per channel; undefined QBERs are left empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(Self::CSV_HEADER)?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.channels {
            let mut row = vec![c.label.clone(), c.channel_pair.to_string()];
            for m in [&c.counts_hv, &c.counts_da] {
                row.extend(m.cc.iter().flatten().map(|x| x.to_string()));
            }
            row.extend([
                opt(c.qber_hv),
                opt(c.qber_da),
                opt(c.qber),
                c.secure_key_bits.to_string(),
                c.secure_key_rate.to_string(),
                c.singles_rate_alice.to_string(),
                c.singles_rate_bob.to_string(),
            ]);
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}
