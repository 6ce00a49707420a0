//! Sampler update rules and the trajectory driver.

mod history;
pub mod phi;
mod steps;

use std::cell::Cell;

use ndarray::Array1;
use serde::{Deserialize, Serialize, Serializer};

pub use history::StepHistory;
pub use steps::{
    ddim_step, ddim_update, exp_integrator_update, forward_value_coefficients, forward_value_ideal_step,
    forward_value_step, forward_value_update, lookahead_estimate, ode_solver_2_step, ode_solver_2_update,
    ode_solver_3_step, ode_solver_3_update, ode_solver_p_step, step_levels, taylor_coefficients,
    unipc_correct, unipc_step, ForwardStep, IdealStep, Lookahead, PicardOptions, UnipcOutput,
};

use crate::models::{IsotropicGaussianModel, Predictor};
use crate::oracle::{kappa_star, OracleOptions};
use crate::schedule::{NoiseLevel, TimeGrid};
use crate::{Error, Result};

/// Update rule of a sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    Ddim,
    OdeSolver { order: usize },
    Unipc { predictor_order: usize },
    ForwardIdeal,
    ForwardValue { lookahead: Lookahead },
}

/// Multistep warm-up policy; order min(i, p) at step i.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Warmup {
    #[default]
    RampOrder,
}

/// Full sampler configuration.
///
/// In JSON the oracle options are not part of a sampler; experiment plans
/// supply them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SamplerRepr", into = "SamplerRepr")]
pub struct SamplerSpec {
    pub rule: Rule,
    pub warmup: Warmup,
    pub picard: PicardOptions,
    pub oracle: OracleOptions,
}

impl SamplerSpec {
    pub fn new(rule: Rule) -> Self {
        SamplerSpec {
            rule,
            warmup: Warmup::RampOrder,
            picard: PicardOptions::default(),
            oracle: OracleOptions::default(),
        }
    }

    pub fn ddim() -> Self {
        Self::new(Rule::Ddim)
    }

    pub fn ode_solver(order: usize) -> Self {
        Self::new(Rule::OdeSolver { order })
    }

    pub fn unipc(predictor_order: usize) -> Self {
        Self::new(Rule::Unipc { predictor_order })
    }

    pub fn forward_ideal() -> Self {
        Self::new(Rule::ForwardIdeal)
    }

    pub fn forward_value(lookahead: Lookahead) -> Self {
        Self::new(Rule::ForwardValue { lookahead })
    }

    pub fn validate(&self) -> Result<()> {
        match self.rule {
            Rule::OdeSolver { order: 0 } => {
                return Err(Error::InvalidSampler("solver order must be at least 1".into()))
            }
            Rule::Unipc { predictor_order } if !(2..=3).contains(&predictor_order) => {
                return Err(Error::InvalidSampler(format!(
                    "UniPC predictor order must be 2 or 3, got {predictor_order}"
                )))
            }
            _ => {}
        }
        if !(self.picard.tol > 0.0) || self.picard.max_iters == 0 {
            return Err(Error::InvalidSampler("Picard tolerance and iteration cap must be positive".into()));
        }
        self.oracle.validate()
    }

    /// Short name used in reports, e.g. `ode-solver-2` or `unipc-3`.
    pub fn label(&self) -> String {
        match self.rule {
            Rule::Ddim => "ddim".into(),
            Rule::OdeSolver { order } => format!("ode-solver-{order}"),
            Rule::Unipc { predictor_order: 2 } => "unipc-3".into(),
            Rule::Unipc { predictor_order } => format!("unipc-3-p{predictor_order}"),
            Rule::ForwardIdeal => "forward-ideal".into(),
            Rule::ForwardValue { .. } => "forward-value".into(),
        }
    }

    pub fn lookahead(&self) -> Option<Lookahead> {
        match self.rule {
            Rule::ForwardValue { lookahead } => Some(lookahead),
            _ => None,
        }
    }

    /// Nominal predictor calls per step once warm-up is over.
    pub fn calls_per_step(&self) -> usize {
        match self.rule {
            Rule::ForwardValue {
                lookahead: Lookahead::Ddim | Lookahead::DpmSolver2,
            } => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum RuleKind {
    Ddim,
    OdeSolver,
    Unipc,
    ForwardIdeal,
    ForwardValue,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplerRepr {
    rule: RuleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    predictor_order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lookahead: Option<Lookahead>,
    #[serde(default)]
    warmup: Warmup,
    #[serde(default = "default_picard_tol")]
    picard_tol: f64,
    #[serde(default = "default_picard_max_iters")]
    picard_max_iters: usize,
    #[serde(default = "default_true")]
    closed_form_linear: bool,
}

fn default_picard_tol() -> f64 {
    PicardOptions::default().tol
}

fn default_picard_max_iters() -> usize {
    PicardOptions::default().max_iters
}

fn default_true() -> bool {
    true
}

impl TryFrom<SamplerRepr> for SamplerSpec {
    type Error = Error;

    fn try_from(r: SamplerRepr) -> Result<Self> {
        let unexpected = |field: &str| Err(Error::InvalidSampler(format!("`{field}` does not apply to this rule")));
        let rule = match r.rule {
            RuleKind::Ddim | RuleKind::ForwardIdeal => {
                if r.order.is_some() {
                    return unexpected("order");
                }
                if r.predictor_order.is_some() {
                    return unexpected("predictor_order");
                }
                if r.lookahead.is_some() {
                    return unexpected("lookahead");
                }
                if r.rule == RuleKind::Ddim {
                    Rule::Ddim
                } else {
                    Rule::ForwardIdeal
                }
            }
            RuleKind::OdeSolver => {
                if r.predictor_order.is_some() || r.lookahead.is_some() {
                    return unexpected("predictor_order/lookahead");
                }
                Rule::OdeSolver {
                    order: r
                        .order
                        .ok_or_else(|| Error::InvalidSampler("ode-solver needs `order`".into()))?,
                }
            }
            RuleKind::Unipc => {
                if r.order.is_some() && r.order != Some(3) {
                    return Err(Error::InvalidSampler("UniPC corrector order is fixed at 3".into()));
                }
                if r.lookahead.is_some() {
                    return unexpected("lookahead");
                }
                Rule::Unipc {
                    predictor_order: r.predictor_order.unwrap_or(2),
                }
            }
            RuleKind::ForwardValue => {
                if r.order.is_some() || r.predictor_order.is_some() {
                    return unexpected("order/predictor_order");
                }
                Rule::ForwardValue {
                    lookahead: r.lookahead.unwrap_or(Lookahead::Ddim),
                }
            }
        };
        let spec = SamplerSpec {
            rule,
            warmup: r.warmup,
            picard: PicardOptions {
                tol: r.picard_tol,
                max_iters: r.picard_max_iters,
                closed_form_linear: r.closed_form_linear,
            },
            oracle: OracleOptions::default(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<SamplerSpec> for SamplerRepr {
    fn from(s: SamplerSpec) -> Self {
        let (rule, order, predictor_order, lookahead) = match s.rule {
            Rule::Ddim => (RuleKind::Ddim, None, None, None),
            Rule::OdeSolver { order } => (RuleKind::OdeSolver, Some(order), None, None),
            Rule::Unipc { predictor_order } => (RuleKind::Unipc, None, Some(predictor_order), None),
            Rule::ForwardIdeal => (RuleKind::ForwardIdeal, None, None, None),
            Rule::ForwardValue { lookahead } => (RuleKind::ForwardValue, None, None, Some(lookahead)),
        };
        SamplerRepr {
            rule,
            order,
            predictor_order,
            lookahead,
            warmup: s.warmup,
            picard_tol: s.picard.tol,
            picard_max_iters: s.picard.max_iters,
            closed_form_linear: s.picard.closed_form_linear,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepDiagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picard_iters: Option<usize>,
    /// ‖x̂_{t_i} − x*_{t_i}(x_{t_{i−1}})‖, recorded when a closed-form oracle exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lookahead_deviation: Option<f64>,
}

/// States x_{t_0..t_M} with call accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    #[serde(serialize_with = "serialize_states")]
    pub states: Vec<Array1<f64>>,
    #[serde(rename = "NFE")]
    pub model_calls: usize,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn final_state(&self) -> &Array1<f64> {
        self.states.last().expect("trajectory has at least one state")
    }
}

pub(crate) fn serialize_states<S: Serializer>(states: &[Array1<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = states.iter().map(|v| v.to_vec()).collect();
    rows.serialize(s)
}

/// Counts calls made through it.
struct Counted<'a> {
    inner: &'a dyn Predictor,
    calls: Cell<usize>,
}

impl Predictor for Counted<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn eval_noise(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.eval_noise(x, level)
    }

    fn eval_data(&self, x: &Array1<f64>, level: &NoiseLevel) -> Result<Array1<f64>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.eval_data(x, level)
    }

    fn linear_data_gain(&self, level: &NoiseLevel) -> Option<f64> {
        let g = self.inner.linear_data_gain(level);
        if g.is_some() {
            self.calls.set(self.calls.get() + 1);
        }
        g
    }

    fn as_gaussian(&self) -> Option<&IsotropicGaussianModel> {
        self.inner.as_gaussian()
    }
}

fn gaussian_deviation(
    g: &IsotropicGaussianModel,
    x_prev: &Array1<f64>,
    x_hat: &Array1<f64>,
    from: &NoiseLevel,
    to: &NoiseLevel,
) -> Option<f64> {
    let k = kappa_star(g.gamma, from.lambda, to.lambda, from.alpha, to.alpha).ok()?;
    let diff = x_hat - &(x_prev * k);
    Some(diff.dot(&diff).sqrt())
}

/// Runs `spec` over `grid` from x0, i = 1..=M.
pub fn run_sampler(spec: &SamplerSpec, grid: &TimeGrid, model: &dyn Predictor, x0: &Array1<f64>) -> Result<Trajectory> {
    spec.validate()?;
    if x0.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: x0.len(),
        });
    }
    let m = grid.steps();
    if m == 0 {
        return Err(Error::InvalidGrid("grid has no steps".into()));
    }
    let counted = Counted {
        inner: model,
        calls: Cell::new(0),
    };
    let mut states = Vec::with_capacity(m + 1);
    states.push(x0.clone());
    let mut diagnostics = Vec::with_capacity(m);

    let capacity = match spec.rule {
        Rule::OdeSolver { order } => order.max(1),
        Rule::Unipc { .. } => 3,
        _ => 2,
    };
    let mut history = StepHistory::new(capacity);
    let mut x_cor = x0.clone();

    for i in 1..=m {
        let x_prev = &states[i - 1];
        let mut diag = StepDiagnostics::default();
        let mut step = || -> Result<Array1<f64>> {
            let (from, to) = step_levels(grid, i)?;
            match spec.rule {
                Rule::Ddim => ddim_step(x_prev, i, grid, &counted),
                Rule::OdeSolver { order } => {
                    let q = order.min(i);
                    let eps = counted.eval_noise(x_prev, &from)?;
                    let mut nodes = vec![(from.lambda, &eps)];
                    nodes.extend(history.newest(q - 1)?);
                    let x = steps::multistep_update(x_prev, &from, &to, &nodes, q)?;
                    history.push(from.lambda, eps)?;
                    Ok(x)
                }
                Rule::Unipc { predictor_order } => {
                    let out = unipc_step(x_prev, &x_cor, &history, i, grid, &counted, predictor_order)?;
                    history.push(from.lambda, out.eps)?;
                    x_cor = out.x_cor;
                    Ok(out.x_next)
                }
                Rule::ForwardIdeal => {
                    let r = forward_value_ideal_step(x_prev, i, grid, &counted, &spec.picard)?;
                    diag.picard_iters = Some(r.iters);
                    Ok(r.x)
                }
                Rule::ForwardValue { lookahead } => {
                    let r = forward_value_step(x_prev, i, grid, &counted, model, lookahead, &mut history, &spec.oracle)?;
                    if let Some(g) = model.as_gaussian() {
                        diag.lookahead_deviation = gaussian_deviation(g, x_prev, &r.x_hat, &from, &to);
                    }
                    Ok(r.x)
                }
            }
        };
        let x = step().map_err(|e| e.at_step(i))?;
        states.push(x);
        diagnostics.push(diag);
    }
    Ok(Trajectory {
        states,
        model_calls: counted.calls.get(),
        diagnostics,
    })
}
