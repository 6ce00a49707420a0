//! Ground truth: exact Gaussian trajectories, scalar κ recursions and a
//! refined RK4 reference integrator.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::models::Predictor;
use crate::schedule::{NoiseLevel, NoiseSchedule, TimeGrid};
use crate::{Error, Result};

const MAX_DOUBLINGS: usize = 12;
const ABS_FLOOR: f64 = 1e-300;

/// Reference-integration controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleOptions {
    /// Target relative self-difference between successive refinements.
    pub tol: f64,
    /// Use κ* for isotropic Gaussians instead of integrating.
    pub gaussian_bypass: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            tol: 1e-12,
            gaussian_bypass: true,
        }
    }
}

impl OracleOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol >= 1e-12 && self.tol < 1.0) {
            return Err(Error::InvalidSampler(format!(
                "oracle tolerance must lie in [1e-12, 1), got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// κ* with x*_λ = κ*·x*_{λ0} on a Gaussian target of variance γ².
pub fn kappa_star(gamma: f64, lam0: f64, lam: f64, alpha0: f64, alpha: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidModel(format!("gamma must be >= 0, got {gamma}")));
    }
    let g2 = gamma * gamma;
    let r0 = (-lam0).exp();
    let r = (-lam).exp();
    let den = g2 + r0 * r0;
    if den == 0.0 {
        return Err(Error::Degenerate("gamma = 0 with infinite starting lambda".into()));
    }
    Ok((alpha / alpha0) * ((g2 + r * r) / den).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KappaVariant {
    Exact,
    Ddim,
    Solver2,
}

/// Scalar coefficients κ_{t_i} with x_{t_i} = κ_{t_i} x_{t_0}.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianKappaTrace {
    pub variant: KappaVariant,
    pub kappas: Vec<f64>,
}

impl GaussianKappaTrace {
    pub fn last(&self) -> f64 {
        *self.kappas.last().expect("trace is never empty")
    }
}

fn ratios(grid: &TimeGrid) -> Vec<f64> {
    (0..=grid.steps()).map(|i| grid.sigmas[i] / grid.alphas[i]).collect()
}

pub fn gaussian_exact_kappa(gamma: f64, grid: &TimeGrid) -> Result<GaussianKappaTrace> {
    let kappas = (0..=grid.steps())
        .map(|i| kappa_star(gamma, grid.lambdas[0], grid.lambdas[i], grid.alphas[0], grid.alphas[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianKappaTrace {
        variant: KappaVariant::Exact,
        kappas,
    })
}

fn ddim_factor(g2: f64, r: &[f64], alphas: &[f64], i: usize) -> f64 {
    let rp = r[i - 1];
    (alphas[i] / alphas[i - 1]) * (1.0 - rp * (rp - r[i]) / (g2 + rp * rp))
}

pub fn gaussian_ddim_kappa(gamma: f64, grid: &TimeGrid) -> Result<GaussianKappaTrace> {
    let g2 = gamma * gamma;
    let r = ratios(grid);
    let mut kappas = vec![1.0];
    for i in 1..=grid.steps() {
        if g2 + r[i - 1] * r[i - 1] == 0.0 {
            return Err(Error::Degenerate("gamma = 0 at sigma = 0".into()));
        }
        let k = ddim_factor(g2, &r, &grid.alphas, i) * kappas[i - 1];
        kappas.push(k);
    }
    Ok(GaussianKappaTrace {
        variant: KappaVariant::Ddim,
        kappas,
    })
}

/// Two-step recursion of the second-order solver; step 1 uses the DDIM factor.
pub fn gaussian_solver2_kappa(gamma: f64, grid: &TimeGrid) -> Result<GaussianKappaTrace> {
    let g2 = gamma * gamma;
    let r = ratios(grid);
    let a = &grid.alphas;
    let lam = &grid.lambdas;
    let f = |j: usize, k: f64| r[j] * k / (a[j] * (g2 + r[j] * r[j]));
    let mut kappas = vec![1.0];
    for i in 1..=grid.steps() {
        if g2 + r[i - 1] * r[i - 1] == 0.0 {
            return Err(Error::Degenerate("gamma = 0 at sigma = 0".into()));
        }
        let k = if i == 1 {
            ddim_factor(g2, &r, a, 1) * kappas[0]
        } else {
            // ∫ e^{−λ} dλ and ∫ (λ − λ_{i−1}) e^{−λ} dλ over the step
            let i0 = r[i - 1] - r[i];
            let i1 = if lam[i].is_finite() {
                r[i - 1] - (lam[i] - lam[i - 1] + 1.0) * r[i]
            } else {
                r[i - 1]
            };
            let f1 = f(i - 1, kappas[i - 1]);
            let f2 = f(i - 2, kappas[i - 2]);
            let slope = (f1 - f2) / (lam[i - 1] - lam[i - 2]);
            (a[i] / a[i - 1]) * kappas[i - 1] - a[i] * i0 * f1 - a[i] * i1 * slope
        };
        kappas.push(k);
    }
    Ok(GaussianKappaTrace {
        variant: KappaVariant::Solver2,
        kappas,
    })
}

fn norm(x: &Array1<f64>) -> f64 {
    x.dot(x).sqrt()
}

/// Probability-flow right-hand side in λ: (d log α/dλ) x − σ ε(x).
fn rhs(model: &dyn Predictor, schedule: &NoiseSchedule, lam: f64, x: &Array1<f64>) -> Result<Array1<f64>> {
    let level = schedule.level_at_lambda(lam)?;
    let eps = model.eval_noise(x, &level)?;
    let mut out = x * schedule.dlog_alpha_dlambda(lam);
    out.scaled_add(-level.sigma, &eps);
    Ok(out)
}

fn level_at_ratio(schedule: &NoiseSchedule, r: f64) -> Result<NoiseLevel> {
    if r > 0.0 {
        schedule.level_at_lambda(-r.ln())
    } else {
        schedule.level(schedule.domain().0)
    }
}

/// Classical RK4 with `n` uniform sub-steps from `from` to `to`.
///
/// Finite targets integrate in λ; a σ = 0 target integrates x/α in
/// r = e^{−λ} down to r = 0, where d(x/α)/dr = ε.
pub fn rk4_interval(
    model: &dyn Predictor,
    schedule: &NoiseSchedule,
    x: &Array1<f64>,
    from: &NoiseLevel,
    to: &NoiseLevel,
    n: usize,
) -> Result<Array1<f64>> {
    let n = n.max(1);
    if to.lambda.is_finite() {
        let h = (to.lambda - from.lambda) / n as f64;
        let mut y = x.clone();
        for k in 0..n {
            let l = from.lambda + h * k as f64;
            let k1 = rhs(model, schedule, l, &y)?;
            let k2 = rhs(model, schedule, l + 0.5 * h, &(&y + &(&k1 * (0.5 * h))))?;
            let k3 = rhs(model, schedule, l + 0.5 * h, &(&y + &(&k2 * (0.5 * h))))?;
            let k4 = rhs(model, schedule, l + h, &(&y + &(&k3 * h)))?;
            y = y + (k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (h / 6.0);
        }
        return Ok(y);
    }
    let r0 = from.ratio();
    let h = -r0 / n as f64;
    let f = |r: f64, y: &Array1<f64>| -> Result<Array1<f64>> {
        let level = level_at_ratio(schedule, r)?;
        model.eval_noise(&(y * level.alpha), &level)
    };
    let mut y = x / from.alpha;
    for k in 0..n {
        let r = r0 + h * k as f64;
        let rm = (r + 0.5 * h).max(0.0);
        let re = if k + 1 == n { 0.0 } else { r + h };
        let k1 = f(r, &y)?;
        let k2 = f(rm, &(&y + &(&k1 * (0.5 * h))))?;
        let k3 = f(rm, &(&y + &(&k2 * (0.5 * h))))?;
        let k4 = f(re, &(&y + &(&k3 * h)))?;
        y = y + (k1 + &k2 * 2.0 + &k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(y * to.alpha)
}

/// Dense solution at the grid times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceTrajectory {
    pub role: &'static str,
    #[serde(serialize_with = "crate::solvers::serialize_states")]
    pub states: Vec<Array1<f64>>,
    /// Largest relative change between the last two refinements (0 for κ*).
    pub achieved_tolerance: f64,
    /// RK4 sub-steps per grid interval (0 for κ*).
    pub substeps: usize,
}

impl ReferenceTrajectory {
    pub fn final_state(&self) -> &Array1<f64> {
        self.states.last().expect("reference has at least one state")
    }
}

fn max_rel_diff(a: &[Array1<f64>], b: &[Array1<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| norm(&(u - v)) / norm(v).max(ABS_FLOOR))
        .fold(0.0, f64::max)
}

fn integrate_grid(model: &dyn Predictor, grid: &TimeGrid, x0: &Array1<f64>, n: usize) -> Result<Vec<Array1<f64>>> {
    let mut states = vec![x0.clone()];
    for i in 1..=grid.steps() {
        let x = rk4_interval(model, &grid.schedule, &states[i - 1], &grid.level(i - 1), &grid.level(i), n)?;
        states.push(x);
    }
    Ok(states)
}

/// Refines sub-steps by doubling until successive solutions agree to `opts.tol`.
pub fn reference_trajectory(
    model: &dyn Predictor,
    grid: &TimeGrid,
    x0: &Array1<f64>,
    opts: &OracleOptions,
) -> Result<ReferenceTrajectory> {
    opts.validate()?;
    if x0.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: x0.len(),
        });
    }
    if opts.gaussian_bypass {
        if let Some(g) = model.as_gaussian() {
            let trace = gaussian_exact_kappa(g.gamma, grid)?;
            return Ok(ReferenceTrajectory {
                role: "oracle",
                states: trace.kappas.iter().map(|k| x0 * *k).collect(),
                achieved_tolerance: 0.0,
                substeps: 0,
            });
        }
    }
    let mut n = 1;
    let mut prev = integrate_grid(model, grid, x0, n)?;
    let mut achieved = f64::INFINITY;
    for _ in 0..MAX_DOUBLINGS {
        n *= 2;
        let next = integrate_grid(model, grid, x0, n)?;
        achieved = max_rel_diff(&prev, &next);
        prev = next;
        if achieved <= opts.tol {
            return Ok(ReferenceTrajectory {
                role: "oracle",
                states: prev,
                achieved_tolerance: achieved,
                substeps: n,
            });
        }
    }
    Err(Error::ReferenceTolerance {
        achieved,
        requested: opts.tol,
    })
}

/// x*_{t_i} started from x_prev at t_{i−1}.
pub fn exact_substep(
    model: &dyn Predictor,
    x_prev: &Array1<f64>,
    from: &NoiseLevel,
    to: &NoiseLevel,
    schedule: &NoiseSchedule,
    opts: &OracleOptions,
) -> Result<Array1<f64>> {
    if opts.gaussian_bypass {
        if let Some(g) = model.as_gaussian() {
            let k = kappa_star(g.gamma, from.lambda, to.lambda, from.alpha, to.alpha)?;
            return Ok(x_prev * k);
        }
    }
    let mut n = 1;
    let mut prev = rk4_interval(model, schedule, x_prev, from, to, n)?;
    let mut achieved = f64::INFINITY;
    for _ in 0..MAX_DOUBLINGS {
        n *= 2;
        let next = rk4_interval(model, schedule, x_prev, from, to, n)?;
        achieved = norm(&(&prev - &next)) / norm(&next).max(ABS_FLOOR);
        prev = next;
        if achieved <= opts.tol {
            return Ok(prev);
        }
    }
    Err(Error::ReferenceTolerance {
        achieved,
        requested: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{IsotropicGaussianModel, ModelSpec};
    use crate::schedule::{build_grid, GridKind, GridSpec};
    use ndarray::array;

    fn ve_grid(m: usize) -> TimeGrid {
        build_grid(NoiseSchedule::Ve, &GridSpec::uniform_lambda(m, 10.0, 1e-3)).unwrap()
    }

    #[test]
    fn kappa_star_values() {
        assert_eq!(kappa_star(1.3, 0.4, 0.4, 0.8, 0.8).unwrap(), 1.0);
        let want = 0.953_606_510_327_499_247_69;
        assert!((kappa_star(1.0, 0.0, 0.1, 1.0, 1.0).unwrap() - want).abs() < 1e-15);
        assert!((kappa_star(1e9, -1.0, 2.0, 0.5, 0.9).unwrap() - 0.9 / 0.5).abs() < 1e-12);
        assert!(kappa_star(0.0, f64::INFINITY, f64::INFINITY, 1.0, 1.0).is_err());
    }

    #[test]
    fn semigroup() {
        let mut s = 7u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((s >> 11) as f64) / ((1u64 << 53) as f64)
        };
        for _ in 0..200 {
            let g = 0.1 + 2.0 * next();
            let (l0, l1, l2) = (-3.0 + 6.0 * next(), -3.0 + 6.0 * next(), -3.0 + 6.0 * next());
            let a = kappa_star(g, l0, l1, 1.0, 1.0).unwrap() * kappa_star(g, l1, l2, 1.0, 1.0).unwrap();
            let b = kappa_star(g, l0, l2, 1.0, 1.0).unwrap();
            assert!((a - b).abs() <= 1e-14 * b);
        }
    }

    #[test]
    fn ddim_kappa_pure_noise_and_underestimate() {
        let g = ve_grid(20);
        let t = gaussian_ddim_kappa(0.0, &g).unwrap();
        for i in 1..=20 {
            let want = g.sigmas[i] / g.sigmas[i - 1] * t.kappas[i - 1];
            assert!((t.kappas[i] - want).abs() <= 1e-14 * want);
        }
        let d = gaussian_ddim_kappa(1.0, &g).unwrap();
        let e = gaussian_exact_kappa(1.0, &g).unwrap();
        assert_eq!(d.kappas[0], 1.0);
        for i in 0..=20 {
            assert!(d.kappas[i] <= e.kappas[i] * (1.0 + 1e-15));
        }
    }

    #[test]
    fn solver2_kappa_hand_unrolled() {
        let g = TimeGrid::from_times(NoiseSchedule::Ve, &[1.0, (-0.1f64).exp(), (-0.2f64).exp()]).unwrap();
        let trace = gaussian_solver2_kappa(1.0, &g).unwrap();
        // Step 1: DDIM factor with r0 = 1, r1 = e^{-0.1}.
        let r1 = (-0.1f64).exp();
        let r2 = (-0.2f64).exp();
        let k1 = 1.0 - (1.0 - r1) / 2.0;
        // Step 2: ε_j = r_j κ_j x0/(1 + r_j²), second-order update written out.
        let e1 = r1 * k1 / (1.0 + r1 * r1);
        let e0 = 1.0 / 2.0;
        let d1 = (e1 - e0) / 0.1;
        let phi1 = 1.1 * r2 - r1;
        let k2 = k1 + (r2 - r1) * e1 + phi1 * d1;
        assert!((trace.kappas[1] - k1).abs() < 1e-15);
        assert!((trace.kappas[2] - k2).abs() < 1e-15);
        assert_eq!(trace.kappas[1], gaussian_ddim_kappa(1.0, &g).unwrap().kappas[1]);
    }

    #[test]
    fn rk_reference_matches_kappa_star() {
        let model = IsotropicGaussianModel::new(1.0, 2).unwrap();
        let g = ve_grid(10);
        let x0 = array![1.5, -0.5];
        let opts = OracleOptions {
            tol: 1e-12,
            gaussian_bypass: false,
        };
        let r = reference_trajectory(&model, &g, &x0, &opts).unwrap();
        assert!(r.achieved_tolerance <= 1e-12);
        let exact = gaussian_exact_kappa(1.0, &g).unwrap();
        for (s, k) in r.states.iter().zip(&exact.kappas) {
            let want = &x0 * *k;
            assert!(norm(&(s - &want)) <= 1e-10 * norm(&want));
        }
        let bypass = reference_trajectory(&model, &g, &x0, &OracleOptions::default()).unwrap();
        assert_eq!(bypass.substeps, 0);
        assert!(norm(&(bypass.final_state() - &(&x0 * exact.last()))) <= 1e-12 * norm(&x0));
    }

    #[test]
    fn rk_to_zero_sigma() {
        let model = IsotropicGaussianModel::new(0.7, 1).unwrap();
        let g = build_grid(
            NoiseSchedule::Ve,
            &GridSpec {
                kind: GridKind::UniformTime,
                ..GridSpec::uniform_lambda(4, 2.0, 0.0)
            },
        )
        .unwrap();
        let opts = OracleOptions {
            tol: 1e-12,
            gaussian_bypass: false,
        };
        let r = reference_trajectory(&model, &g, &array![1.0], &opts).unwrap();
        let want = kappa_star(0.7, g.lambdas[0], f64::INFINITY, 1.0, 1.0).unwrap();
        assert!((r.final_state()[0] - want).abs() <= 1e-10 * want);
    }

    #[test]
    fn rk4_order_on_mixture() {
        let model = ModelSpec::symmetric_pair(2).build().unwrap();
        let s = NoiseSchedule::Ve;
        let from = s.level(10.0).unwrap();
        let to = s.level(0.05).unwrap();
        let x = array![3.0, -2.0];
        let sols: Vec<_> = [4, 8, 16, 32]
            .iter()
            .map(|&n| rk4_interval(&model, &s, &x, &from, &to, n).unwrap())
            .collect();
        let d1 = norm(&(&sols[0] - &sols[1]));
        let d2 = norm(&(&sols[1] - &sols[2]));
        let d3 = norm(&(&sols[2] - &sols[3]));
        assert!(d1 / d2 >= 14.0 || d2 < 1e-12, "{d1} {d2}");
        assert!(d2 / d3 >= 14.0 || d3 < 1e-12, "{d2} {d3}");
    }

    #[test]
    fn exact_substep_semigroup_and_composition() {
        let model = ModelSpec::symmetric_pair(2).build().unwrap();
        let g = ve_grid(6);
        let x0 = array![2.0, 1.0];
        let opts = OracleOptions::default();
        let r = reference_trajectory(&model, &g, &x0, &opts).unwrap();
        let mut x = x0.clone();
        for i in 1..=6 {
            x = exact_substep(&model, &x, &g.level(i - 1), &g.level(i), &g.schedule, &opts).unwrap();
        }
        assert!(norm(&(&x - r.final_state())) <= 2.0 * opts.tol * 6.0 * norm(&x).max(1.0));
    }
}
