//! Single-step update rules.
//!
//! `*_update` functions are pure in their ε/μ arguments; `*_step` functions
//! make the model calls themselves.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::history::StepHistory;
use super::phi::{phi, phi1_folded, phi2_folded};
use crate::models::Predictor;
use crate::oracle::{exact_substep, OracleOptions};
use crate::schedule::{NoiseLevel, TimeGrid};
use crate::{Error, Result};

type Vector = Array1<f64>;

fn norm(x: &Vector) -> f64 {
    x.dot(x).sqrt()
}

/// Levels (t_{i−1}, t_i) for step i, checking 1 ≤ i ≤ M.
pub fn step_levels(grid: &TimeGrid, i: usize) -> Result<(NoiseLevel, NoiseLevel)> {
    let m = grid.steps();
    if i == 0 || i > m {
        return Err(Error::InvalidIndex { index: i, m });
    }
    Ok((grid.level(i - 1), grid.level(i)))
}

fn require_noisy_start(from: &NoiseLevel) -> Result<()> {
    if from.sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("step starts at sigma = 0 (t = {})", from.t)))
    }
}

/// α_to σ_from/α_from − σ_to, the weight on ε in a first-order step.
fn ddim_noise_weight(from: &NoiseLevel, to: &NoiseLevel) -> f64 {
    to.alpha * from.sigma / from.alpha - to.sigma
}

/// First-order (DDIM) update with a given ε(x_prev, t_{i−1}).
pub fn ddim_update(x_prev: &Vector, eps: &Vector, from: &NoiseLevel, to: &NoiseLevel) -> Vector {
    let mut x = x_prev * (to.alpha / from.alpha);
    x.scaled_add(-ddim_noise_weight(from, to), eps);
    x
}

pub fn ddim_step(x_prev: &Vector, i: usize, grid: &TimeGrid, model: &dyn Predictor) -> Result<Vector> {
    let (from, to) = step_levels(grid, i)?;
    require_noisy_start(&from)?;
    let eps = model.eval_noise(x_prev, &from)?;
    Ok(ddim_update(x_prev, &eps, &from, &to))
}

/// Solves A·Y = B for the Taylor coefficients y_1..y_p of the interpolant
/// through `nodes`, expanded at `lam_s`.
pub fn taylor_coefficients(lam_s: f64, nodes: &[(f64, &Vector)]) -> Result<Vec<Vector>> {
    let p = nodes.len();
    if p == 0 {
        return Err(Error::InsufficientHistory { needed: 1, have: 0 });
    }
    for a in 0..p {
        for b in (a + 1)..p {
            if nodes[a].0 == nodes[b].0 {
                return Err(Error::Singular(format!("coincident nodes at lambda = {}", nodes[a].0)));
            }
        }
    }
    let d = nodes[0].1.len();
    let mut a = Array2::<f64>::zeros((p, p));
    let mut b = Array2::<f64>::zeros((p, d));
    for (j, (lam, eps)) in nodes.iter().enumerate() {
        if eps.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: eps.len(),
            });
        }
        let h = lam - lam_s;
        let mut v = 1.0;
        for k in 0..p {
            a[[j, k]] = v;
            v *= h / (k + 1) as f64;
        }
        b.row_mut(j).assign(*eps);
    }
    // Gaussian elimination with partial pivoting.
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&r1, &r2| a[[r1, col]].abs().total_cmp(&a[[r2, col]].abs()))
            .unwrap_or(col);
        if a[[piv, col]].abs() < 1e-300 {
            return Err(Error::Singular("interpolation matrix is singular".into()));
        }
        if piv != col {
            for k in 0..p {
                a.swap([piv, k], [col, k]);
            }
            for k in 0..d {
                b.swap([piv, k], [col, k]);
            }
        }
        for r in (col + 1)..p {
            let f = a[[r, col]] / a[[col, col]];
            if f == 0.0 {
                continue;
            }
            for k in col..p {
                a[[r, k]] -= f * a[[col, k]];
            }
            for k in 0..d {
                b[[r, k]] -= f * b[[col, k]];
            }
        }
    }
    let mut y = vec![Array1::zeros(d); p];
    for row in (0..p).rev() {
        let mut acc = b.row(row).to_owned();
        for k in (row + 1)..p {
            acc.scaled_add(-a[[row, k]], &y[k]);
        }
        y[row] = acc / a[[row, row]];
    }
    Ok(y)
}

/// Exponential-integrator update from `from` to `to`, with ε replaced by the
/// polynomial through `nodes` expanded at λ_from.
pub fn exp_integrator_update(
    x_start: &Vector,
    from: &NoiseLevel,
    to: &NoiseLevel,
    nodes: &[(f64, &Vector)],
) -> Result<Vector> {
    require_noisy_start(from)?;
    let y = taylor_coefficients(from.lambda, nodes)?;
    let h = to.lambda - from.lambda;
    let mut x = x_start * (to.alpha / from.alpha);
    x.scaled_add(-ddim_noise_weight(from, to), &y[0]);
    let scale = to.alpha * from.ratio();
    let mut fact = 1.0;
    for (k, yk) in y.iter().enumerate().skip(1) {
        fact *= k as f64;
        x.scaled_add(-scale * phi(k, h) / fact, yk);
    }
    Ok(x)
}

/// Second-order multistep update written with D_1 and the folded φ_1.
pub fn ode_solver_2_update(
    x_prev: &Vector,
    from: &NoiseLevel,
    to: &NoiseLevel,
    e1: (f64, &Vector),
    e2: (f64, &Vector),
) -> Result<Vector> {
    require_noisy_start(from)?;
    if e1.0 == e2.0 {
        return Err(Error::Singular(format!("coincident nodes at lambda = {}", e1.0)));
    }
    let d1 = (e1.1 - e2.1) / (e1.0 - e2.0);
    let mut x = ddim_update(x_prev, e1.1, from, to);
    x.scaled_add(to.alpha * phi1_folded(from, to), &d1);
    Ok(x)
}

/// Third-order multistep update written with D_1, D_2 and the folded φ_1, φ_2.
pub fn ode_solver_3_update(
    x_prev: &Vector,
    from: &NoiseLevel,
    to: &NoiseLevel,
    e1: (f64, &Vector),
    e2: (f64, &Vector),
    e3: (f64, &Vector),
) -> Result<Vector> {
    require_noisy_start(from)?;
    let (l1, l2, l3) = (e1.0, e2.0, e3.0);
    if l1 == l2 || l2 == l3 || l1 == l3 {
        return Err(Error::Singular("coincident nodes in third-order step".into()));
    }
    let d1 = (e1.1 - e2.1) / (l1 - l2);
    let d2 = (e1.1 - e3.1) / (l1 - l3);
    let den = l2 - l3;
    let p1 = phi1_folded(from, to);
    let p2 = phi2_folded(from, to);
    let mut x = ddim_update(x_prev, e1.1, from, to);
    x.scaled_add(to.alpha * p1 * (l1 - l3) / den, &d1);
    x.scaled_add(-to.alpha * p1 * (l1 - l2) / den, &d2);
    x.scaled_add(to.alpha * p2 / den, &(&d1 - &d2));
    Ok(x)
}

/// Order-p step: one fresh call at x_prev plus the newest p−1 history entries.
///
/// Returns the new state and the fresh ε.
pub fn ode_solver_p_step(
    x_prev: &Vector,
    history: &StepHistory,
    i: usize,
    grid: &TimeGrid,
    model: &dyn Predictor,
    p: usize,
) -> Result<(Vector, Vector)> {
    if p == 0 {
        return Err(Error::InvalidSampler("order must be at least 1".into()));
    }
    let (from, to) = step_levels(grid, i)?;
    require_noisy_start(&from)?;
    let prior = history.newest(p - 1)?;
    let eps = model.eval_noise(x_prev, &from)?;
    let mut nodes = vec![(from.lambda, &eps)];
    nodes.extend(prior);
    let x = exp_integrator_update(x_prev, &from, &to, &nodes)?;
    Ok((x, eps))
}

pub fn ode_solver_2_step(
    x_prev: &Vector,
    history: &StepHistory,
    i: usize,
    grid: &TimeGrid,
    model: &dyn Predictor,
) -> Result<(Vector, Vector)> {
    let (from, to) = step_levels(grid, i)?;
    require_noisy_start(&from)?;
    let e2 = history.back(0)?;
    let eps = model.eval_noise(x_prev, &from)?;
    let x = ode_solver_2_update(x_prev, &from, &to, (from.lambda, &eps), e2)?;
    Ok((x, eps))
}

pub fn ode_solver_3_step(
    x_prev: &Vector,
    history: &StepHistory,
    i: usize,
    grid: &TimeGrid,
    model: &dyn Predictor,
) -> Result<(Vector, Vector)> {
    let (from, to) = step_levels(grid, i)?;
    require_noisy_start(&from)?;
    let e2 = history.back(0)?;
    let e3 = history.back(1)?;
    let eps = model.eval_noise(x_prev, &from)?;
    let x = ode_solver_3_update(x_prev, &from, &to, (from.lambda, &eps), e2, e3)?;
    Ok((x, eps))
}

/// Multistep update of order `q` (1, 2 or 3 use the explicit forms).
pub(crate) fn multistep_update(
    x_prev: &Vector,
    from: &NoiseLevel,
    to: &NoiseLevel,
    nodes: &[(f64, &Vector)],
    q: usize,
) -> Result<Vector> {
    if nodes.len() < q {
        return Err(Error::InsufficientHistory {
            needed: q,
            have: nodes.len(),
        });
    }
    match q {
        1 => {
            require_noisy_start(from)?;
            Ok(ddim_update(x_prev, nodes[0].1, from, to))
        }
        2 => ode_solver_2_update(x_prev, from, to, nodes[0], nodes[1]),
        3 => ode_solver_3_update(x_prev, from, to, nodes[0], nodes[1], nodes[2]),
        _ => exp_integrator_update(x_prev, from, to, &nodes[..q]),
    }
}

/// Corrected state at t_{i−1}: the third-order interpolant through the
/// evaluations at t_{i−1}, t_{i−2}, t_{i−3} integrated over [λ_{i−2}, λ_{i−1}].
pub fn unipc_correct(
    x_cor_prev: &Vector,
    from: &NoiseLevel,
    to: &NoiseLevel,
    nodes: &[(f64, &Vector)],
) -> Result<Vector> {
    if nodes.len() < 3 {
        return Err(Error::InsufficientHistory {
            needed: 3,
            have: nodes.len(),
        });
    }
    exp_integrator_update(x_cor_prev, from, to, &nodes[..3])
}

#[derive(Debug, Clone)]
pub struct UnipcOutput {
    pub x_next: Vector,
    pub x_cor: Vector,
    pub eps: Vector,
}

/// One predictor-corrector step from the predictor state x_{i−1}.
///
/// `x_cor_before` is the corrected state at t_{i−2}; `history` holds the
/// evaluations at t_{i−2}, t_{i−3}. The predictor order ramps with the
/// available history, and correction starts once three evaluations exist.
pub fn unipc_step(
    x_prev_pred: &Vector,
    x_cor_before: &Vector,
    history: &StepHistory,
    i: usize,
    grid: &TimeGrid,
    model: &dyn Predictor,
    predictor_order: usize,
) -> Result<UnipcOutput> {
    if !(2..=3).contains(&predictor_order) {
        return Err(Error::InvalidSampler(format!(
            "UniPC predictor order must be 2 or 3, got {predictor_order}"
        )));
    }
    let (from, to) = step_levels(grid, i)?;
    require_noisy_start(&from)?;
    let eps = model.eval_noise(x_prev_pred, &from)?;
    let mut nodes = vec![(from.lambda, &eps)];
    nodes.extend(history.newest(history.len().min(2))?);
    let x_cor = if nodes.len() >= 3 {
        let before = grid.level(i - 2);
        unipc_correct(x_cor_before, &before, &from, &nodes)?
    } else {
        x_prev_pred.clone()
    };
    let q = predictor_order.min(nodes.len());
    let x_next = multistep_update(&x_cor, &from, &to, &nodes, q)?;
    Ok(UnipcOutput { x_next, x_cor, eps })
}

/// (c_1, c_2) with x_i = c_1 x_{i−1} + c_2 μ for the data-prediction update.
pub fn forward_value_coefficients(from: &NoiseLevel, to: &NoiseLevel) -> (f64, f64) {
    if to.sigma == 0.0 {
        return (0.0, to.alpha);
    }
    let c1 = to.sigma / from.sigma;
    (c1, to.alpha - c1 * from.alpha)
}

pub fn forward_value_update(x_prev: &Vector, mu: &Vector, from: &NoiseLevel, to: &NoiseLevel) -> Vector {
    if to.sigma == 0.0 {
        return mu * to.alpha;
    }
    let (c1, c2) = forward_value_coefficients(from, to);
    let mut x = x_prev * c1;
    x.scaled_add(c2, mu);
    x
}

/// Fixed-point controls for the implicit step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iters: usize,
    /// Solve linear models in closed form instead of iterating.
    pub closed_form_linear: bool,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions {
            tol: 1e-12,
            max_iters: 100,
            closed_form_linear: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IdealStep {
    pub x: Vector,
    /// Picard iterations, zero for the closed form.
    pub iters: usize,
    pub residual: f64,
}

/// Solves x = c_1 x_{i−1} + c_2 μ(x, t_i).
pub fn forward_value_ideal_step(
    x_prev: &Vector,
    i: usize,
    grid: &TimeGrid,
    model: &dyn Predictor,
    opts: &PicardOptions,
) -> Result<IdealStep> {
    let (from, to) = step_levels(grid, i)?;
    require_noisy_start(&from)?;
    let (c1, c2) = forward_value_coefficients(&from, &to);
    if opts.closed_form_linear {
        if let Some(g) = model.linear_data_gain(&to) {
            let den = 1.0 - c2 * g;
            if den.abs() <= 1e-14 {
                return Err(Error::Degenerate(
                    "implicit step is the identity map (data prediction equals x/alpha)".into(),
                ));
            }
            return Ok(IdealStep {
                x: x_prev * (c1 / den),
                iters: 0,
                residual: 0.0,
            });
        }
    }
    let mut x = ddim_step(x_prev, i, grid, model)?;
    let mut residual = f64::INFINITY;
    for iter in 1..=opts.max_iters {
        let mu = model.eval_data(&x, &to)?;
        let next = forward_value_update(x_prev, &mu, &from, &to);
        residual = norm(&(&next - &x));
        x = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol * (1.0 + norm(&x)) {
            return Ok(IdealStep { x, iters: iter, residual });
        }
    }
    Err(Error::PicardDiverged {
        iters: opts.max_iters,
        residual,
    })
}

/// How the practical forward-value sampler estimates x̂_{t_i}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lookahead {
    Ddim,
    DpmSolver2,
    Oracle,
}

impl Lookahead {
    pub fn label(&self) -> &'static str {
        match self {
            Lookahead::Ddim => "ddim",
            Lookahead::DpmSolver2 => "dpm-solver2",
            Lookahead::Oracle => "oracle",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardStep {
    pub x: Vector,
    pub x_hat: Vector,
}

/// Lookahead estimate x̂_{t_i}.
///
/// DDIM and DPM-Solver-2 make one counted call at x_{i−1} and record it in
/// `history`; the second-order variant pairs it with the previous step's
/// evaluation. The oracle uses `raw` (uncounted) for the exact sub-step.
pub fn lookahead_estimate(
    x_prev: &Vector,
    i: usize,
    grid: &TimeGrid,
    model: &dyn Predictor,
    raw: &dyn Predictor,
    lookahead: Lookahead,
    history: &mut StepHistory,
    oracle: &OracleOptions,
) -> Result<Vector> {
    let (from, to) = step_levels(grid, i)?;
    require_noisy_start(&from)?;
    match lookahead {
        Lookahead::Oracle => exact_substep(raw, x_prev, &from, &to, &grid.schedule, oracle),
        Lookahead::Ddim | Lookahead::DpmSolver2 => {
            let eps = model.eval_noise(x_prev, &from)?;
            let x_hat = if lookahead == Lookahead::DpmSolver2 && !history.is_empty() {
                let e2 = history.back(0)?;
                ode_solver_2_update(x_prev, &from, &to, (from.lambda, &eps), e2)?
            } else {
                ddim_update(x_prev, &eps, &from, &to)
            };
            history.push(from.lambda, eps)?;
            Ok(x_hat)
        }
    }
}

/// Practical forward-value step: x_i = c_1 x_{i−1} + c_2 μ(x̂_{t_i}, t_i).
#[allow(clippy::too_many_arguments)]
pub fn forward_value_step(
    x_prev: &Vector,
    i: usize,
    grid: &TimeGrid,
    model: &dyn Predictor,
    raw: &dyn Predictor,
    lookahead: Lookahead,
    history: &mut StepHistory,
    oracle: &OracleOptions,
) -> Result<ForwardStep> {
    let x_hat = lookahead_estimate(x_prev, i, grid, model, raw, lookahead, history, oracle)?;
    let (from, to) = step_levels(grid, i)?;
    let mu = model.eval_data(&x_hat, &to)?;
    let x = forward_value_update(x_prev, &mu, &from, &to);
    Ok(ForwardStep { x, x_hat })
}
