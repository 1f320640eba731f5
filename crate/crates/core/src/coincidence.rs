//! Two-photon coincidence identification, count matrices and accidental estimation.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::detection::{check_sorted, Basis, TimeTag};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoincidenceWindow {
    /// Full window width, s. Tags match when `|t_a − t_b| ≤ t_c/2`.
    pub t_c: f64,
}

impl Default for CoincidenceWindow {
    fn default() -> Self {
        Self { t_c: 1e-9 }
    }
}

impl CoincidenceWindow {
    pub fn validate(&self) -> Result<()> {
        ensure(self.t_c > 0.0 && self.t_c.is_finite(), "window.t_c", || {
            format!("must be positive, got {}", self.t_c)
        })
    }

    /// Largest tick difference still inside the window.
    pub fn half_width_ticks(&self, tick: f64) -> i64 {
        (0.5 * self.t_c / tick + 1e-9).floor() as i64
    }

    /// Width actually covered by the integer window, `(2h+1)·tick`. This is
    /// the width that enters the accidental rate `S_A·S_B·width`.
    pub fn effective_width(&self, tick: f64) -> f64 {
        (2 * self.half_width_ticks(tick) + 1) as f64 * tick
    }
}

/// Indices of a matched Alice/Bob tag pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Match {
    pub alice: usize,
    pub bob: usize,
}

/// One-to-one greedy coincidence matching.
///
/// Alice tags are visited in stream order. Each takes, among the still
/// unmatched Bob tags within the window, the one nearest in time; ties go to
/// the earlier Bob tag, then the lower detector id.
pub fn find_coincidences(
    alice: &[TimeTag],
    bob: &[TimeTag],
    window: &CoincidenceWindow,
    tick: f64,
) -> Result<Vec<Match>> {
    window.validate()?;
    check_sorted(alice, "alice")?;
    check_sorted(bob, "bob")?;
    let h = window.half_width_ticks(tick);
    Ok(sweep(alice, bob, h, 0))
}

/// Two-pointer sweep; `bob_shift` is added to every Bob timestamp.
fn sweep(alice: &[TimeTag], bob: &[TimeTag], h: i64, bob_shift: i64) -> Vec<Match> {
    let mut taken = vec![false; bob.len()];
    let mut matches = Vec::new();
    let mut lo = 0usize;
    for (ia, a) in alice.iter().enumerate() {
        while lo < bob.len() && bob[lo].tick_time + bob_shift < a.tick_time - h {
            lo += 1;
        }
        let mut best: Option<(i64, i64, u32, usize)> = None;
        let mut j = lo;
        while j < bob.len() {
            let tb = bob[j].tick_time + bob_shift;
            if tb > a.tick_time + h {
                break;
            }
            if !taken[j] {
                let key = ((tb - a.tick_time).abs(), tb, bob[j].detector_id, j);
                if best.is_none_or(|b| key < b) {
                    best = Some(key);
                }
            }
            j += 1;
        }
        if let Some((_, _, _, jb)) = best {
            taken[jb] = true;
            matches.push(Match { alice: ia, bob: jb });
        }
    }
    matches
}

/// Coincidence counts for one basis block of one channel pair.
///
/// `cc[a][b]` counts Alice output `a` with Bob output `b`; output 0 is H (or
/// D), output 1 is V (or A).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountsMatrix {
    pub basis: Basis,
    pub cc: [[u64; 2]; 2],
    pub channel_pair: u32,
    /// Recording time, s.
    pub duration: f64,
}

impl CountsMatrix {
    pub fn empty(basis: Basis, channel_pair: u32) -> Self {
        Self {
            basis,
            cc: [[0; 2]; 2],
            channel_pair,
            duration: 0.0,
        }
    }

    pub fn from_entries(basis: Basis, hh: u64, hv: u64, vh: u64, vv: u64) -> Self {
        Self {
            basis,
            cc: [[hh, hv], [vh, vv]],
            channel_pair: 0,
            duration: 0.0,
        }
    }

    pub fn total(&self) -> u64 {
        self.cc.iter().flatten().sum()
    }

    /// Same-output counts, the erroneous events for a singlet state.
    pub fn erroneous(&self) -> u64 {
        self.cc[0][0] + self.cc[1][1]
    }

    pub fn anticorrelated(&self) -> u64 {
        self.cc[0][1] + self.cc[1][0]
    }

    /// CSV row: `channel_pair, basis, cc_hh, cc_hv, cc_vh, cc_vv, duration_s`.
    pub fn csv_record(&self) -> [String; 7] {
        [
            self.channel_pair.to_string(),
            self.basis.as_str().to_string(),
            self.cc[0][0].to_string(),
            self.cc[0][1].to_string(),
            self.cc[1][0].to_string(),
            self.cc[1][1].to_string(),
            format!("{}", self.duration),
        ]
    }

    pub const CSV_HEADER: [&'static str; 7] =
        ["channel_pair", "basis", "cc_hh", "cc_hv", "cc_vh", "cc_vv", "duration_s"];
}

impl AddAssign<&CountsMatrix> for CountsMatrix {
    fn add_assign(&mut self, rhs: &CountsMatrix) {
        debug_assert_eq!(self.basis, rhs.basis);
        for a in 0..2 {
            for b in 0..2 {
                self.cc[a][b] += rhs.cc[a][b];
            }
        }
        self.duration += rhs.duration;
    }
}

/// Tabulates matched pairs by their recorded outcomes (dark counts included,
/// under the output they were assigned).
pub fn tabulate(
    alice: &[TimeTag],
    bob: &[TimeTag],
    matches: &[Match],
    basis: Basis,
    channel_pair: u32,
    duration: f64,
) -> CountsMatrix {
    let mut m = CountsMatrix::empty(basis, channel_pair);
    m.duration = duration;
    for mt in matches {
        let a = alice[mt.alice].outcome.output() as usize;
        let b = bob[mt.bob].outcome.output() as usize;
        m.cc[a][b] += 1;
    }
    m
}

/// Delayed-window accidental estimate: the number of coincidences found after
/// shifting Bob's stream by `delay`.
pub fn accidental_estimate(
    alice: &[TimeTag],
    bob: &[TimeTag],
    window: &CoincidenceWindow,
    delay: f64,
    tick: f64,
) -> Result<u64> {
    window.validate()?;
    check_sorted(alice, "alice")?;
    check_sorted(bob, "bob")?;
    let shift = (delay / tick).round() as i64;
    Ok(sweep(alice, bob, window.half_width_ticks(tick), shift).len() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{Outcome, TAGGER_TICK};

    fn tag(t: i64, id: u32, outcome: Outcome) -> TimeTag {
        TimeTag {
            detector_id: id,
            tick_time: t,
            outcome,
            channel_index: 1,
            dark: false,
        }
    }

    fn ns_to_ticks(ns: f64) -> i64 {
        (ns * 1e-9 / TAGGER_TICK).round() as i64
    }

    #[test]
    fn window_geometry() {
        let w = CoincidenceWindow::default();
        assert_eq!(w.half_width_ticks(TAGGER_TICK), 6);
        assert!((w.effective_width(TAGGER_TICK) - 13.0 / 12.15e9).abs() < 1e-20);
    }

    #[test]
    fn identical_times_match() {
        let a = [tag(1000, 0, Outcome::H)];
        let b = [tag(1000, 2, Outcome::V)];
        let m = find_coincidences(&a, &b, &CoincidenceWindow::default(), TAGGER_TICK).unwrap();
        assert_eq!(m, vec![Match { alice: 0, bob: 0 }]);
    }

    #[test]
    fn outside_half_window_no_match() {
        let a = [tag(1000, 0, Outcome::H)];
        let b = [tag(1000 + ns_to_ticks(0.6), 2, Outcome::V)];
        let m = find_coincidences(&a, &b, &CoincidenceWindow::default(), TAGGER_TICK).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn nearest_then_earliest_then_lower_id() {
        let w = CoincidenceWindow::default();
        let a = [tag(100, 0, Outcome::H)];
        let b = [tag(97, 3, Outcome::H), tag(102, 2, Outcome::V), tag(103, 2, Outcome::V)];
        let m = find_coincidences(&a, &b, &w, TAGGER_TICK).unwrap();
        assert_eq!(m[0].bob, 1);
        let b = [tag(98, 3, Outcome::H), tag(102, 2, Outcome::V)];
        assert_eq!(find_coincidences(&a, &b, &w, TAGGER_TICK).unwrap()[0].bob, 0);
        let b = [tag(102, 3, Outcome::H), tag(102, 2, Outcome::V)];
        assert_eq!(find_coincidences(&a, &b, &w, TAGGER_TICK).unwrap()[0].bob, 1);
    }

    #[test]
    fn each_tag_used_once() {
        let a = [tag(100, 0, Outcome::H), tag(100, 1, Outcome::V)];
        let b = [tag(100, 2, Outcome::V)];
        let m = find_coincidences(&a, &b, &CoincidenceWindow::default(), TAGGER_TICK).unwrap();
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn rejects_unsorted() {
        let a = [tag(100, 0, Outcome::H), tag(50, 0, Outcome::H)];
        assert!(find_coincidences(&a, &[], &CoincidenceWindow::default(), TAGGER_TICK).is_err());
        assert!(find_coincidences(&[], &[], &CoincidenceWindow { t_c: 0.0 }, TAGGER_TICK).is_err());
    }

    #[test]
    fn tabulate_counts_by_output() {
        let a = [tag(0, 0, Outcome::H), tag(1000, 1, Outcome::V), tag(2000, 0, Outcome::H)];
        let b = [tag(0, 3, Outcome::V), tag(1000, 2, Outcome::H), tag(2000, 2, Outcome::H)];
        let m = find_coincidences(&a, &b, &CoincidenceWindow::default(), TAGGER_TICK).unwrap();
        let c = tabulate(&a, &b, &m, Basis::HV, 1, 1.0);
        assert_eq!(c.cc, [[1, 1], [1, 0]]);
        assert_eq!(c.total(), 3);
        assert_eq!(tabulate(&a, &b, &[], Basis::HV, 1, 1.0).total(), 0);
    }

    #[test]
    fn accidental_estimate_of_empty_streams_is_zero() {
        let n = accidental_estimate(&[], &[], &CoincidenceWindow::default(), 200e-9, TAGGER_TICK).unwrap();
        assert_eq!(n, 0);
    }

    #[test]
    fn zero_delay_counts_true_coincidences() {
        let a: Vec<TimeTag> = (0..50).map(|i| tag(i * 10_000, 0, Outcome::H)).collect();
        let b: Vec<TimeTag> = (0..50).map(|i| tag(i * 10_000 + 2, 2, Outcome::V)).collect();
        let w = CoincidenceWindow::default();
        assert_eq!(accidental_estimate(&a, &b, &w, 0.0, TAGGER_TICK).unwrap(), 50);
        assert_eq!(accidental_estimate(&a, &b, &w, 200e-9, TAGGER_TICK).unwrap(), 0);
    }
}
