//! Two-sample Kolmogorov–Smirnov test, used to check that chain output
//! matches a reference distribution.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("samples must be non-empty")]
    Empty,
    #[error("non-finite sample value")]
    NonFinite,
}

/// Result of a two-sample KS test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    /// Maximum absolute difference between the two empirical CDFs.
    pub statistic: f64,
    /// Asymptotic two-sided p-value (Kolmogorov distribution tail).
    pub p_value: f64,
}

/// Tail of the Kolmogorov distribution: `Q(lambda) = 2 sum (-1)^{k-1}
/// exp(-2 k^2 lambda^2)`, clamped to `[0, 1]`.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample KS test.
///
/// The statistic is the largest gap between the two empirical CDFs; the
/// p-value uses the asymptotic approximation with the standard small-sample
/// correction `lambda = (sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D` where
/// `ne = n1 n2 / (n1 + n2)`.
pub fn ks_test(a: &[f64], b: &[f64]) -> Result<KsResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(f64::total_cmp);
    sb.sort_unstable_by(f64::total_cmp);

    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < sa.len() && j < sb.len() {
        let va = sa[i];
        let vb = sb[j];
        let cut = va.min(vb);
        while i < sa.len() && sa[i] <= cut {
            i += 1;
        }
        while j < sb.len() && sb[j] <= cut {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }

    let ne = na * nb / (na + nb);
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_tail(lambda),
    })
}
