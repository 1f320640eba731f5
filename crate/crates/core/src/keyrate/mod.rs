//! Visibility, QBER and secure-key-rate estimation from coincidence counts.

pub mod analytic;
mod report;

pub use analytic::{
    analytic_merged, analytic_rates, optimize_pair_rate, scaling_curve, AnalyticLinkModel, AnalyticRates,
    LinkTemplate, OptimizedRate, ScalingPoint,
};
pub use report::{ChannelKeyReport, ChannelTally, KeyRateReport};

use crate::coincidence::CountsMatrix;
use crate::error::{ensure, Result};

/// Bidirectional error-correction efficiency.
pub const DEFAULT_F_EC: f64 = 1.1;

/// Polarisation visibility `(anticorrelated − correlated)/total` for the
/// singlet state. `None` when the matrix is empty.
pub fn visibility(counts: &CountsMatrix) -> Option<f64> {
    let total = counts.total();
    (total > 0).then(|| (counts.anticorrelated() as f64 - counts.erroneous() as f64) / total as f64)
}

/// Quantum bit error rate `erroneous/total`. `None` when the matrix is empty.
pub fn qber(counts: &CountsMatrix) -> Option<f64> {
    let total = counts.total();
    (total > 0).then(|| counts.erroneous() as f64 / total as f64)
}

pub fn qber_from_visibility(visibility: f64) -> f64 {
    0.5 * (1.0 - visibility)
}

/// Binary Shannon entropy in bits, with `H2(0) = H2(1) = 0`.
pub fn binary_entropy(x: f64) -> Result<f64> {
    ensure((0.0..=1.0).contains(&x), "x", || format!("must lie in [0, 1], got {x}"))?;
    Ok(h2(x))
}

pub(crate) fn h2(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
    }
}

/// Secret fraction of one basis, `½(1 − (1+f)H2(Q))`, clamped at zero.
pub fn basis_key_fraction(q: f64, f_ec: f64) -> f64 {
    (0.5 * (1.0 - (1.0 + f_ec) * h2(q.clamp(0.0, 1.0)))).max(0.0)
}

/// Secure key bits `Σ_b CC_b · ½(1 − (1+f)H2(Q_b))` with negative basis terms clamped to 0.
pub fn secure_key_from_qber(cc_hv: f64, q_hv: f64, cc_da: f64, q_da: f64, f_ec: f64) -> f64 {
    cc_hv * basis_key_fraction(q_hv, f_ec) + cc_da * basis_key_fraction(q_da, f_ec)
}

/// Secure key bits from the two basis blocks' count matrices.
pub fn secure_key(counts_hv: &CountsMatrix, counts_da: &CountsMatrix, f_ec: f64) -> Result<f64> {
    ensure(f_ec >= 1.0, "f_ec", || format!("must be at least 1, got {f_ec}"))?;
    let term = |c: &CountsMatrix| {
        qber(c).map_or(0.0, |q| c.total() as f64 * basis_key_fraction(q, f_ec))
    };
    Ok(term(counts_hv) + term(counts_da))
}

/// QBER at which `(1+f)·H2(Q) = 1`, i.e. where the key fraction vanishes.
pub fn qber_threshold(f_ec: f64) -> Result<f64> {
    ensure(f_ec >= 1.0, "f_ec", || format!("must be at least 1, got {f_ec}"))?;
    let target = 1.0 / (1.0 + f_ec);
    let (mut lo, mut hi) = (0.0f64, 0.5f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if h2(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
