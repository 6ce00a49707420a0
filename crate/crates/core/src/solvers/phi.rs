//! Exponential-integrator weights.
//!
//! `phi(k, h)` is ∫₀ʰ e^{−u} uᵏ du, so that
//! ∫_{λ_s}^{λ_s+h} e^{−λ} (λ − λ_s)ᵏ/k! dλ = e^{−λ_s} φ_k(h)/k!.
//! The "folded" weights absorb the e^{−λ} factors of both interval ends.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::schedule::NoiseLevel;
use crate::{Error, Result};

#[doc(hidden)]
pub static FAULT_NEGATE_FOLDED_PHI1: AtomicBool = AtomicBool::new(false);

/// φ_k(h) by the recurrence φ_k = kφ_{k−1} − hᵏe^{−h}, φ_0 = 1 − e^{−h}.
pub fn phi_recurrence(k: usize, h: f64) -> f64 {
    if h == f64::INFINITY {
        return factorial(k);
    }
    let e = (-h).exp();
    let mut p = -(-h).exp_m1();
    let mut hk = 1.0;
    for j in 1..=k {
        hk *= h;
        p = j as f64 * p - hk * e;
    }
    p
}

/// Closed forms for k ≤ 2.
pub fn phi_closed(k: usize, h: f64) -> Result<f64> {
    if h == f64::INFINITY {
        return if k <= 2 {
            Ok(factorial(k))
        } else {
            Err(Error::InvalidSampler(format!("no closed form for phi_{k}")))
        };
    }
    let e = (-h).exp();
    match k {
        0 => Ok(-(-h).exp_m1()),
        1 => Ok(1.0 - (1.0 + h) * e),
        2 => Ok(2.0 - (h * h + 2.0 * h + 2.0) * e),
        _ => Err(Error::InvalidSampler(format!("no closed form for phi_{k}"))),
    }
}

/// φ_k(h), accurate for small h as well (series below h = 2, recurrence above).
pub fn phi(k: usize, h: f64) -> f64 {
    if !(h < 2.0) {
        return phi_recurrence(k, h);
    }
    if h <= 0.0 {
        return 0.0;
    }
    // hᵏ⁺¹ e^{−h} Σ_n hⁿ / ((k+1)(k+2)…(k+1+n))
    let mut term = 1.0 / (k as f64 + 1.0);
    let mut sum = term;
    for n in 1..200 {
        term *= h / (k as f64 + 1.0 + n as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    h.powi(k as i32 + 1) * (-h).exp() * sum
}

pub(crate) fn factorial(k: usize) -> f64 {
    (1..=k).map(|j| j as f64).product()
}

/// (δ + 1)e^{−λ_to} − e^{−λ_from}, i.e. −e^{−λ_from} φ_1(δ).
pub fn phi1_folded(from: &NoiseLevel, to: &NoiseLevel) -> f64 {
    let r_from = from.ratio();
    let r_to = to.ratio();
    let v = if to.lambda.is_finite() {
        (to.lambda - from.lambda + 1.0) * r_to - r_from
    } else {
        -r_from
    };
    if FAULT_NEGATE_FOLDED_PHI1.load(Ordering::Relaxed) {
        -v
    } else {
        v
    }
}

/// δ²e^{−λ_to} + 2·φ1f, i.e. −e^{−λ_from} φ_2(δ).
pub fn phi2_folded(from: &NoiseLevel, to: &NoiseLevel) -> f64 {
    let d2 = if to.lambda.is_finite() {
        let d = to.lambda - from.lambda;
        d * d * to.ratio()
    } else {
        0.0
    };
    d2 + 2.0 * phi1_folded(from, to)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;

    #[test]
    fn small_argument_limits() {
        for k in 0..4 {
            assert!(phi(k, 1e-300) < 1e-290);
            assert_eq!(phi(k, 0.0), 0.0);
        }
        assert!((phi(1, 1e-4) / (0.5e-8) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn recurrence_identity() {
        for &h in &[0.1, 1.0, 3.0] {
            let lhs = phi_closed(1, h).unwrap();
            let rhs = phi_closed(0, h).unwrap() - h * (-h).exp();
            assert!((lhs - rhs).abs() < 1e-12);
            let lhs2 = phi_closed(2, h).unwrap();
            let rhs2 = 2.0 * phi_closed(1, h).unwrap() - h * h * (-h).exp();
            assert!((lhs2 - rhs2).abs() < 1e-12);
        }
    }

    #[test]
    fn series_matches_recurrence() {
        for k in 0..5 {
            for &h in &[1.0, 1.9, 2.0, 2.5, 8.0] {
                let a = phi(k, h);
                let b = phi_recurrence(k, h);
                assert!((a - b).abs() <= 1e-13 * b.abs(), "k={k} h={h}: {a} vs {b}");
            }
        }
        // 40-digit quadrature at h = 0.05, where the recurrence cancels badly.
        let want = [
            0.048770575499285990909,
            0.001209104274250290454,
            0.000040134987248795885278,
            1.5012836837984046984e-6,
            5.9950832064156236648e-8,
        ];
        for (k, w) in want.iter().enumerate() {
            assert!((phi(k, 0.05) - w).abs() <= 1e-14 * w, "k={k}");
        }
        assert_eq!(phi(3, f64::INFINITY), 6.0);
    }

    #[test]
    fn phi1_at_one_matches_quadrature() {
        // ∫₀¹ e^{−u} u du = 1 − 2/e
        let reference = 0.264_241_117_657_115_356_8;
        assert!((phi_closed(1, 1.0).unwrap() - reference).abs() < 1e-12);
        assert!((phi(1, 1.0) - reference).abs() < 1e-12);
        // composite Simpson as an independent check
        let n = 2000;
        let f = |u: f64| (-u).exp() * u;
        let h = 1.0 / n as f64;
        let mut s = f(0.0) + f(1.0);
        for j in 1..n {
            s += f(j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 };
        }
        assert!((s * h / 3.0 - reference).abs() < 1e-12);
    }

    #[test]
    fn folded_forms_match_scaled_phi() {
        let s = NoiseSchedule::vp_linear(0.1, 20.0).unwrap();
        for &(a, b) in &[(0.9, 0.7), (0.5, 0.45), (0.2, 1e-3)] {
            let from = s.level(a).unwrap();
            let to = s.level(b).unwrap();
            let d = to.lambda - from.lambda;
            let r = from.ratio();
            assert!((phi1_folded(&from, &to) + r * phi(1, d)).abs() <= 1e-13 * r.max(1.0));
            assert!((phi2_folded(&from, &to) + r * phi(2, d)).abs() <= 1e-13 * r.max(1.0));
        }
        let from = NoiseSchedule::Ve.level(0.5).unwrap();
        let to = NoiseSchedule::Ve.level(0.0).unwrap();
        assert_eq!(phi1_folded(&from, &to), -0.5);
        assert_eq!(phi2_folded(&from, &to), -1.0);
    }

    #[test]
    fn closed_form_rejects_high_order() {
        assert!(phi_closed(3, 1.0).is_err());
    }
}
