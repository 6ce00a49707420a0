//! Noise schedules and the half-log-SNR coordinate λ(t) = log(α_t / σ_t).
//!
//! All step formulas downstream are written in λ; grids cache t, λ, α and σ
//! at every node so nothing has to be re-inverted during sampling.

mod grid;

pub use grid::{
    build_grid, subsample_indices, validate_grid, GridKind, GridReport, GridSpec, ReferenceSpacing,
    TimeGrid,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default VP-linear rates.
pub const VP_BETA_MIN: f64 = 0.1;
pub const VP_BETA_MAX: f64 = 20.0;

const VE_T_MAX: f64 = 1.0e4;
const VP_T_MAX: f64 = 1.0;

/// Forward-process marginal x_t = α_t x_0 + σ_t z.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub enum NoiseSchedule {
    /// Variance exploding: α_t = 1, σ_t = t.
    #[default]
    Ve,
    /// Variance preserving with a linear β(t).
    VpLinear { beta_min: f64, beta_max: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ScheduleKind {
    Ve,
    VpLinear,
}

// Flat form so unknown keys are rejected for every kind.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRepr {
    kind: ScheduleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta_max: Option<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        match r.kind {
            ScheduleKind::Ve => {
                if r.beta_min.is_some() || r.beta_max.is_some() {
                    return Err(Error::InvalidSchedule("ve takes no beta parameters".into()));
                }
                Ok(NoiseSchedule::Ve)
            }
            ScheduleKind::VpLinear => NoiseSchedule::vp_linear(
                r.beta_min.unwrap_or(VP_BETA_MIN),
                r.beta_max.unwrap_or(VP_BETA_MAX),
            ),
        }
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        match s {
            NoiseSchedule::Ve => ScheduleRepr {
                kind: ScheduleKind::Ve,
                beta_min: None,
                beta_max: None,
            },
            NoiseSchedule::VpLinear { beta_min, beta_max } => ScheduleRepr {
                kind: ScheduleKind::VpLinear,
                beta_min: Some(beta_min),
                beta_max: Some(beta_max),
            },
        }
    }
}

/// Schedule quantities at a single time. `lambda` is `+inf` when σ = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub lambda: f64,
}

impl NoiseLevel {
    /// σ/α, i.e. e^{-λ}; finite (zero) at σ = 0.
    pub fn ratio(&self) -> f64 {
        self.sigma / self.alpha
    }

    pub fn is_terminal(&self) -> bool {
        self.sigma == 0.0
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl NoiseSchedule {
    pub fn vp_linear(beta_min: f64, beta_max: f64) -> Result<Self> {
        let s = NoiseSchedule::VpLinear { beta_min, beta_max };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSchedule::Ve => Ok(()),
            NoiseSchedule::VpLinear { beta_min, beta_max } => {
                if !(beta_min > 0.0 && beta_max > 0.0 && beta_min.is_finite() && beta_max.is_finite()) {
                    return Err(Error::InvalidSchedule(format!(
                        "VP-linear rates must be positive and finite, got beta_min={beta_min}, beta_max={beta_max}"
                    )));
                }
                if beta_max < beta_min {
                    return Err(Error::InvalidSchedule(format!(
                        "beta_max ({beta_max}) must not be below beta_min ({beta_min})"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Closed time domain `[t_min, t_max]`.
    pub fn domain(&self) -> (f64, f64) {
        match self {
            NoiseSchedule::Ve => (0.0, VE_T_MAX),
            NoiseSchedule::VpLinear { .. } => (0.0, VP_T_MAX),
        }
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        let (min, max) = self.domain();
        if t.is_finite() && t >= min && t <= max {
            Ok(())
        } else {
            Err(Error::OutsideDomain { t, min, max })
        }
    }

    fn log_alpha(&self, t: f64) -> f64 {
        match *self {
            NoiseSchedule::Ve => 0.0,
            NoiseSchedule::VpLinear { beta_min, beta_max } => {
                -0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min
            }
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        Ok(self.log_alpha(t).exp())
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        Ok(match self {
            NoiseSchedule::Ve => t,
            NoiseSchedule::VpLinear { .. } => (-(2.0 * self.log_alpha(t)).exp_m1()).sqrt(),
        })
    }

    /// λ(t) = log(α_t/σ_t). Fails where σ_t = 0.
    pub fn lambda_of_t(&self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        let lam = match self {
            NoiseSchedule::Ve => {
                if t == 0.0 {
                    return Err(Error::InfiniteLambda { t });
                }
                -t.ln()
            }
            NoiseSchedule::VpLinear { .. } => {
                let la = self.log_alpha(t);
                let one_minus_a2 = -(2.0 * la).exp_m1();
                if one_minus_a2 <= 0.0 {
                    return Err(Error::InfiniteLambda { t });
                }
                la - 0.5 * one_minus_a2.ln()
            }
        };
        Ok(lam)
    }

    /// Inverse of [`lambda_of_t`](Self::lambda_of_t).
    pub fn t_of_lambda(&self, lam: f64) -> Result<f64> {
        if lam.is_nan() || lam == f64::INFINITY {
            return Err(Error::LambdaOutOfRange { lambda: lam });
        }
        let t = match *self {
            NoiseSchedule::Ve => (-lam).exp(),
            NoiseSchedule::VpLinear { beta_min, beta_max } => {
                // -log α = ½ log(1 + e^{-2λ}) = a t² + b t
                let l = 0.5 * softplus(-2.0 * lam);
                let a = 0.25 * (beta_max - beta_min);
                let b = 0.5 * beta_min;
                2.0 * l / (b + (b * b + 4.0 * a * l).sqrt())
            }
        };
        let (min, max) = self.domain();
        // λ strictly decreasing: out-of-domain t means lam outside the image.
        if !(t.is_finite() && t > min && t <= max * (1.0 + 1e-12)) {
            return Err(Error::LambdaOutOfRange { lambda: lam });
        }
        Ok(t.min(max))
    }

    /// All schedule quantities at time `t`.
    pub fn level(&self, t: f64) -> Result<NoiseLevel> {
        let alpha = self.alpha(t)?;
        let sigma = self.sigma(t)?;
        let lambda = if sigma == 0.0 {
            f64::INFINITY
        } else {
            self.lambda_of_t(t)?
        };
        Ok(NoiseLevel {
            t,
            alpha,
            sigma,
            lambda,
        })
    }

    /// Schedule quantities parameterised directly by λ (finite).
    pub fn level_at_lambda(&self, lam: f64) -> Result<NoiseLevel> {
        let t = self.t_of_lambda(lam)?;
        let (alpha, sigma) = match self {
            NoiseSchedule::Ve => (1.0, (-lam).exp()),
            // α² = sigmoid(2λ), σ² = sigmoid(-2λ)
            NoiseSchedule::VpLinear { .. } => (
                (-0.5 * softplus(-2.0 * lam)).exp(),
                (-0.5 * softplus(2.0 * lam)).exp(),
            ),
        };
        Ok(NoiseLevel {
            t,
            alpha,
            sigma,
            lambda: lam,
        })
    }

    /// d log α / dλ along the schedule.
    pub fn dlog_alpha_dlambda(&self, lam: f64) -> f64 {
        match self {
            NoiseSchedule::Ve => 0.0,
            // log α = -½ softplus(-2λ)  ⇒  derivative = sigmoid(-2λ) = σ²
            NoiseSchedule::VpLinear { .. } => (-softplus(2.0 * lam)).exp(),
        }
    }

    /// Image of λ over `[t_lo, t_hi]` as `(λ(t_hi), λ(t_lo))`.
    pub fn lambda_range(&self, t_lo: f64, t_hi: f64) -> Result<(f64, f64)> {
        let hi = if self.sigma(t_lo)? == 0.0 {
            f64::INFINITY
        } else {
            self.lambda_of_t(t_lo)?
        };
        Ok((self.lambda_of_t(t_hi)?, hi))
    }
}
