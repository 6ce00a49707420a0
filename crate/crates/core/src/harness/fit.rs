use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Errors at or below this are treated as floating-point floor and skipped.
pub const ERROR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    /// Largest absolute deviation of log(error) from the fitted line.
    pub residual: f64,
    pub points_used: usize,
}

/// Least-squares slope of log(error) against log(1/M).
pub fn estimate_order(points: &[(usize, f64)]) -> Result<OrderFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(m, e)| *m > 0 && e.is_finite() && *e > ERROR_FLOOR)
        .map(|&(m, e)| (-(m as f64).ln(), e.ln()))
        .collect();
    if usable.len() < 4 {
        return Err(Error::TooFewPoints { usable: usable.len() });
    }
    let n = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::TooFewPoints { usable: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = usable
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).abs())
        .fold(0.0, f64::max);
    Ok(OrderFit {
        slope,
        residual,
        points_used: usable.len(),
    })
}
