//! Central-moment shape statistics.

use crate::error::{Error, Result};

fn central_moments(x: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() < 2 {
        return Err(Error::TooShort { min: 2, len: x.len() });
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    // Relative threshold so that constant signals with rounding noise in the
    // mean still count as constant.
    let scale = x.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if m2 <= (scale * 1e-12).powi(2) {
        return Err(Error::ZeroVariance);
    }
    Ok((m2, m3, m4))
}

/// Biased Fisher–Pearson skewness `m3 / m2^1.5`.
pub fn skewness(x: &[f64]) -> Result<f64> {
    let (m2, m3, _) = central_moments(x)?;
    Ok(m3 / m2.powf(1.5))
}

/// Excess kurtosis `m4 / m2² − 3` (biased).
pub fn kurtosis(x: &[f64]) -> Result<f64> {
    let (m2, _, m4) = central_moments(x)?;
    Ok(m4 / (m2 * m2) - 3.0)
}
