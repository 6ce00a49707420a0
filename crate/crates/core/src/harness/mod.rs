//! Convergence experiments: sampler runs against oracles, slope fits and
//! report assembly.

mod fit;
mod report;

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use fit::{estimate_order, OrderFit, ERROR_FLOOR};
pub use report::{
    emit_report, render_csv, render_json, CancellationPoint, ConvergenceReport, CsvRow, GroupFit,
    LowerBoundSeries, NfeEntry, OracleSummary, TrackingPoint, CSV_HEADER,
};

use crate::models::{Model, ModelSpec, Predictor};
use crate::oracle::{reference_trajectory, OracleOptions, ReferenceTrajectory};
use crate::schedule::{build_grid, GridKind, GridSpec, NoiseLevel, NoiseSchedule, ReferenceSpacing, TimeGrid};
use crate::solvers::{run_sampler, Rule, SamplerSpec, Trajectory};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Final error vs M for every sampler.
    Orders,
    /// DDIM and the implicit forward-value scheme from a shared start.
    Cancellation,
    /// Practical forward-value samplers against the implicit scheme.
    Tracking,
    /// Normalised errors on the Gaussian lower-bound witness.
    LowerBound,
}

impl ExperimentKind {
    pub fn label(&self) -> &'static str {
        match self {
            ExperimentKind::Orders => "orders",
            ExperimentKind::Cancellation => "cancellation",
            ExperimentKind::Tracking => "tracking",
            ExperimentKind::LowerBound => "lower-bound",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    /// Every sampler runs M steps.
    #[default]
    EqualM,
    /// Sampler step count is M divided by its calls per step.
    EqualNfe,
}

/// Grid request without the step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFamily {
    pub kind: GridKind,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(rename = "M_ref", default, skip_serializing_if = "Option::is_none")]
    pub m_ref: Option<usize>,
    #[serde(default)]
    pub reference_spacing: ReferenceSpacing,
}

impl Default for GridFamily {
    /// Uniform in λ over t ∈ [1e-3, 10].
    fn default() -> Self {
        GridFamily {
            kind: GridKind::UniformLambda,
            t_start: 10.0,
            t_end: 1e-3,
            m_ref: None,
            reference_spacing: ReferenceSpacing::Time,
        }
    }
}

impl GridFamily {
    pub fn spec(&self, m: usize) -> GridSpec {
        GridSpec {
            kind: self.kind,
            m,
            t_start: self.t_start,
            t_end: self.t_end,
            m_ref: self.m_ref,
            reference_spacing: self.reference_spacing,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// One experiment: model, grids, samplers, step counts and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub grid: GridFamily,
    pub model: ModelSpec,
    #[serde(rename = "M_list")]
    pub m_list: Vec<usize>,
    pub samplers: Vec<SamplerSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub comparison: Comparison,
    #[serde(default)]
    pub oracle: OracleOptions,
}

impl ExperimentPlan {
    pub fn new(experiment: ExperimentKind, model: ModelSpec, m_list: Vec<usize>, samplers: Vec<SamplerSpec>) -> Self {
        ExperimentPlan {
            name: None,
            experiment,
            schedule: NoiseSchedule::Ve,
            grid: GridFamily::default(),
            model,
            m_list,
            samplers,
            seeds: default_seeds(),
            comparison: Comparison::EqualM,
            oracle: OracleOptions::default(),
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.experiment.label().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.oracle.validate()?;
        if self.m_list.len() < 4 {
            return Err(Error::InvalidPlan(format!(
                "M_list needs at least 4 entries for slope fitting, got {}",
                self.m_list.len()
            )));
        }
        if self.m_list.windows(2).any(|w| w[1] <= w[0]) || self.m_list[0] == 0 {
            return Err(Error::InvalidPlan("M_list must be positive and strictly increasing".into()));
        }
        if self.samplers.is_empty() {
            return Err(Error::InvalidPlan("no samplers given".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidPlan("no seeds given".into()));
        }
        for s in &self.samplers {
            s.validate()?;
        }
        let has = |pred: &dyn Fn(&Rule) -> bool| self.samplers.iter().any(|s| pred(&s.rule));
        if self.experiment != ExperimentKind::Orders && self.comparison == Comparison::EqualNfe {
            return Err(Error::InvalidPlan(format!(
                "equal-nfe comparison only applies to order experiments, not {}",
                self.experiment.label()
            )));
        }
        match self.experiment {
            ExperimentKind::Orders => {}
            ExperimentKind::Cancellation => {
                if !has(&|r| *r == Rule::Ddim) || !has(&|r| *r == Rule::ForwardIdeal) {
                    return Err(Error::InvalidPlan(
                        "cancellation needs both a ddim and a forward-ideal sampler".into(),
                    ));
                }
            }
            ExperimentKind::Tracking => {
                if !has(&|r| matches!(r, Rule::ForwardValue { .. })) {
                    return Err(Error::InvalidPlan("tracking needs at least one forward-value sampler".into()));
                }
            }
            ExperimentKind::LowerBound => {
                if !matches!(self.model, ModelSpec::Gaussian { .. }) {
                    return Err(Error::InvalidPlan("lower-bound witness needs a gaussian model".into()));
                }
            }
        }
        // Catch grid errors before any work is scheduled.
        build_grid(self.schedule, &self.grid.spec(self.m_list[0]))?;
        Ok(())
    }

    /// The model actually used; the lower-bound witness fixes γ = e^{−λ(t_end)}.
    pub fn effective_model(&self) -> Result<ModelSpec> {
        match (&self.experiment, &self.model) {
            (ExperimentKind::LowerBound, ModelSpec::Gaussian { dim, .. }) => {
                let end = self.schedule.level(self.grid.t_end)?;
                Ok(ModelSpec::Gaussian {
                    gamma: end.ratio(),
                    dim: *dim,
                })
            }
            _ => Ok(self.model.clone()),
        }
    }

    fn sampler_with_oracle(&self, s: &SamplerSpec) -> SamplerSpec {
        SamplerSpec {
            oracle: self.oracle,
            ..s.clone()
        }
    }

    fn steps_for(&self, s: &SamplerSpec, m: usize) -> usize {
        match self.comparison {
            Comparison::EqualM => m,
            Comparison::EqualNfe => (m / s.calls_per_step()).max(1),
        }
    }
}

/// x_{t_0} ~ q_{t_0}, drawn from a ChaCha8 stream keyed by `seed`.
pub fn initial_state(model: &Model, level: &NoiseLevel, seed: u64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let d = model.dim();
    let z = Array1::from_iter((0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
    match model {
        Model::Gaussian(g) => {
            let ag = level.alpha * g.gamma;
            z * (ag * ag + level.sigma * level.sigma).sqrt()
        }
        Model::Mixture(mix) => mix.sample_marginal(level, u, &z),
        Model::Poly(_) => z * (level.alpha * level.alpha + level.sigma * level.sigma).sqrt(),
    }
}

/// ‖x_{t_M} − x*_{t_M}‖₂.
pub fn final_error(traj: &Trajectory, reference: &ReferenceTrajectory) -> Result<f64> {
    if traj.states.len() != reference.states.len() {
        return Err(Error::InvalidPlan(format!(
            "trajectory has {} states, reference {}",
            traj.states.len(),
            reference.states.len()
        )));
    }
    let a = traj.final_state();
    let b = reference.final_state();
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: b.len(),
            got: a.len(),
        });
    }
    let d = a - b;
    Ok(d.dot(&d).sqrt())
}

fn norm(x: &Array1<f64>) -> f64 {
    x.dot(x).sqrt()
}

/// Everything computed for one (M, seed) pair.
struct Cell {
    ref_tol: f64,
    /// One entry per plan sampler: (steps, NFE, final state).
    runs: Vec<(usize, usize, Array1<f64>)>,
    reference: Array1<f64>,
    /// Implicit forward-value final state, when the experiment needs it.
    ideal: Option<Array1<f64>>,
}

struct Context {
    model: Model,
    samplers: Vec<SamplerSpec>,
}

fn run_cell(plan: &ExperimentPlan, ctx: &Context, m: usize, seed: u64, sampler_idx: Option<usize>) -> Result<Cell> {
    let grid_for = |steps: usize| -> Result<TimeGrid> { build_grid(plan.schedule, &plan.grid.spec(steps)) };
    let base_grid = grid_for(m)?;
    let x0 = initial_state(&ctx.model, &base_grid.level(0), seed);
    let mut refs: BTreeMap<usize, ReferenceTrajectory> = BTreeMap::new();
    let mut reference_for = |steps: usize, grid: &TimeGrid| -> Result<Array1<f64>> {
        if let std::collections::btree_map::Entry::Vacant(e) = refs.entry(steps) {
            e.insert(reference_trajectory(&ctx.model, grid, &x0, &plan.oracle)?);
        }
        Ok(refs[&steps].final_state().clone())
    };
    let indices: Vec<usize> = match sampler_idx {
        Some(k) => vec![k],
        None => (0..ctx.samplers.len()).collect(),
    };
    let mut runs = Vec::new();
    let mut reference = None;
    for k in indices {
        let s = &ctx.samplers[k];
        let steps = plan.steps_for(s, m);
        let grid = if steps == m { base_grid.clone() } else { grid_for(steps)? };
        let traj = run_sampler(s, &grid, &ctx.model, &x0)?;
        let r = reference_for(steps, &grid)?;
        if steps == m || reference.is_none() {
            reference = Some(r);
        }
        runs.push((steps, traj.model_calls, traj.final_state().clone()));
    }
    let reference = match reference {
        Some(r) => r,
        None => reference_for(m, &base_grid)?,
    };
    let ideal = if plan.experiment == ExperimentKind::Tracking {
        let s = plan.sampler_with_oracle(&SamplerSpec::forward_ideal());
        Some(run_sampler(&s, &base_grid, &ctx.model, &x0)?.final_state().clone())
    } else {
        None
    };
    let ref_tol = refs.values().map(|r| r.achieved_tolerance).fold(0.0, f64::max);
    Ok(Cell {
        ref_tol,
        runs,
        reference,
        ideal,
    })
}

fn sampler_group(s: &SamplerSpec) -> String {
    match s.lookahead() {
        Some(l) => format!("{}/{}", s.label(), l.label()),
        None => s.label(),
    }
}

fn lookahead_label(s: &SamplerSpec) -> String {
    s.lookahead().map(|l| l.label().to_string()).unwrap_or_default()
}

/// Runs a plan on `threads` worker threads (0 = rayon default).
///
/// The result does not depend on the thread count.
pub fn run_plan(plan: &ExperimentPlan, threads: usize) -> Result<ConvergenceReport> {
    plan.validate()?;
    let effective = plan.effective_model()?;
    let ctx = Context {
        model: effective.build()?,
        samplers: plan.samplers.iter().map(|s| plan.sampler_with_oracle(s)).collect(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Io(e.to_string()))?;

    // Per-sampler cells only matter when step counts differ between samplers.
    let per_sampler = plan.comparison == Comparison::EqualNfe;
    let mut jobs: Vec<(usize, u64, Option<usize>)> = Vec::new();
    if per_sampler {
        for k in 0..ctx.samplers.len() {
            for &m in &plan.m_list {
                for &seed in &plan.seeds {
                    jobs.push((m, seed, Some(k)));
                }
            }
        }
    } else {
        for &m in &plan.m_list {
            for &seed in &plan.seeds {
                jobs.push((m, seed, None));
            }
        }
    }
    let cells: Vec<Cell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, seed, k)| run_cell(plan, &ctx, m, seed, k))
            .collect::<Result<Vec<_>>>()
    })?;

    assemble(plan, &ctx, effective, &cells, per_sampler)
}

fn assemble(
    plan: &ExperimentPlan,
    ctx: &Context,
    effective: ModelSpec,
    cells: &[Cell],
    per_sampler: bool,
) -> Result<ConvergenceReport> {
    let experiment = plan.display_name();
    let mut rows: Vec<CsvRow> = Vec::new();
    // Combined-error and gap rows: fitted and kept in JSON, not in the CSV.
    let mut derived: Vec<CsvRow> = Vec::new();

    // Cells are laid out as [sampler?][M][seed]; returns the cell and the run index in it.
    let lookup = |k: usize, m: usize, seed: u64| -> (&Cell, usize) {
        let im = plan.m_list.iter().position(|&x| x == m).expect("M from plan");
        let is = plan.seeds.iter().position(|&s| s == seed).expect("seed from plan");
        let base = im * plan.seeds.len() + is;
        if per_sampler {
            (&cells[k * plan.m_list.len() * plan.seeds.len() + base], 0)
        } else {
            (&cells[base], k)
        }
    };

    for (k, s) in ctx.samplers.iter().enumerate() {
        for &m in &plan.m_list {
            for &seed in &plan.seeds {
                let (cell, j) = lookup(k, m, seed);
                let (steps, nfe, x) = &cell.runs[j];
                rows.push(CsvRow {
                    experiment: experiment.clone(),
                    sampler: s.label(),
                    lookahead: lookahead_label(s),
                    m: *steps,
                    nfe: *nfe,
                    seed,
                    final_error: norm(&(x - &cell.reference)),
                    slope_group: sampler_group(s),
                });
            }
        }
    }

    let mut cancellation = None;
    let mut tracking = None;
    let mut lower_bound = None;

    match plan.experiment {
        ExperimentKind::Orders => {}
        ExperimentKind::Cancellation => {
            let kb = ctx.samplers.iter().position(|s| s.rule == Rule::Ddim).expect("validated");
            let kf = ctx.samplers.iter().position(|s| s.rule == Rule::ForwardIdeal).expect("validated");
            let mut series = Vec::new();
            for &m in &plan.m_list {
                let (mut sc, mut sb, mut sf) = (0.0, 0.0, 0.0);
                let mut inner = Vec::new();
                for &seed in &plan.seeds {
                    let (cell, _) = lookup(0, m, seed);
                    let eb = &cell.runs[kb].2 - &cell.reference;
                    let ef = &cell.runs[kf].2 - &cell.reference;
                    let combined = norm(&(&eb + &ef));
                    sc += combined;
                    sb += norm(&eb);
                    sf += norm(&ef);
                    inner.push(eb.dot(&ef));
                    derived.push(CsvRow {
                        experiment: experiment.clone(),
                        sampler: "combined".into(),
                        lookahead: String::new(),
                        m,
                        nfe: cell.runs[kb].1 + cell.runs[kf].1,
                        seed,
                        final_error: combined,
                        slope_group: "combined".into(),
                    });
                }
                let n = plan.seeds.len() as f64;
                let (c, b, f) = (sc / n, sb / n, sf / n);
                series.push(CancellationPoint {
                    m,
                    combined: c,
                    backward: b,
                    forward: f,
                    ratio: c / b.max(f).max(f64::MIN_POSITIVE),
                    inner_products: inner,
                });
            }
            cancellation = Some(series);
        }
        ExperimentKind::Tracking => {
            let mut series = Vec::new();
            for (k, s) in ctx.samplers.iter().enumerate() {
                let Some(l) = s.lookahead() else { continue };
                for &m in &plan.m_list {
                    let mut sum = 0.0;
                    for &seed in &plan.seeds {
                        let (cell, _) = lookup(k, m, seed);
                        let ideal = cell.ideal.as_ref().expect("tracking cells carry the implicit run");
                        let gap = norm(&(&cell.runs[k].2 - ideal));
                        sum += gap;
                        derived.push(CsvRow {
                            experiment: experiment.clone(),
                            sampler: "gap".into(),
                            lookahead: l.label().into(),
                            m,
                            nfe: cell.runs[k].1,
                            seed,
                            final_error: gap,
                            slope_group: format!("gap/{}", l.label()),
                        });
                    }
                    series.push(TrackingPoint {
                        lookahead: l,
                        m,
                        gap: sum / plan.seeds.len() as f64,
                    });
                }
            }
            tracking = Some(series);
        }
        ExperimentKind::LowerBound => {
            let mut out = Vec::new();
            for s in &ctx.samplers {
                let exponent = if s.rule == Rule::Ddim { 1 } else { 2 };
                let values: Vec<(usize, f64)> = plan
                    .m_list
                    .iter()
                    .map(|&m| {
                        let mean = rows
                            .iter()
                            .filter(|r| r.slope_group == sampler_group(s) && r.m == m)
                            .map(|r| r.final_error)
                            .sum::<f64>()
                            / plan.seeds.len() as f64;
                        (m, (m as f64).powi(exponent) * mean)
                    })
                    .collect();
                let max = values.iter().map(|v| v.1).fold(0.0, f64::max);
                let min = values.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
                let last = values.last().map(|v| v.1).unwrap_or(0.0);
                out.push(LowerBoundSeries {
                    sampler: s.label(),
                    exponent: exponent as u32,
                    values,
                    min_over_max: if max > 0.0 { min / max } else { 0.0 },
                    last_over_max: if max > 0.0 { last / max } else { 0.0 },
                });
            }
            lower_bound = Some(out);
        }
    }

    let all: Vec<CsvRow> = rows.iter().chain(&derived).cloned().collect();
    let fits = fit_groups(&all);
    let mut nfe: Vec<NfeEntry> = Vec::new();
    let first_seed = plan.seeds[0];
    for r in rows.iter().filter(|r| r.seed == first_seed) {
        nfe.push(NfeEntry {
            sampler: r.sampler.clone(),
            lookahead: r.lookahead.clone(),
            m: r.m,
            nfe: r.nfe,
        });
    }
    let max_tol = cells.iter().map(|c| c.ref_tol).fold(0.0, f64::max);
    Ok(ConvergenceReport {
        experiment,
        kind: plan.experiment,
        config: plan.clone(),
        effective_model: effective,
        rows,
        derived_rows: derived,
        fits,
        cancellation,
        tracking,
        lower_bound,
        nfe,
        oracle: OracleSummary {
            gaussian_bypass: plan.oracle.gaussian_bypass,
            requested_tolerance: plan.oracle.tol,
            max_achieved_tolerance: max_tol,
        },
    })
}

/// Seed-averaged error per (group, M) and the fitted slope of each group.
fn fit_groups(rows: &[CsvRow]) -> Vec<GroupFit> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    let mut meta: BTreeMap<String, (String, String)> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.slope_group) {
            order.push(r.slope_group.clone());
            meta.insert(r.slope_group.clone(), (r.sampler.clone(), r.lookahead.clone()));
        }
        let e = acc.entry((r.slope_group.clone(), r.m)).or_insert((0.0, 0));
        e.0 += r.final_error;
        e.1 += 1;
    }
    order
        .into_iter()
        .map(|g| {
            let points: Vec<(usize, f64)> = acc
                .iter()
                .filter(|((grp, _), _)| *grp == g)
                .map(|((_, m), (s, n))| (*m, s / *n as f64))
                .collect();
            let (sampler, lookahead) = meta[&g].clone();
            match estimate_order(&points) {
                Ok(f) => GroupFit {
                    group: g,
                    sampler,
                    lookahead,
                    points,
                    slope: Some(f.slope),
                    residual: Some(f.residual),
                    points_used: f.points_used,
                    fit_error: None,
                },
                Err(e) => GroupFit {
                    group: g,
                    sampler,
                    lookahead,
                    points,
                    slope: None,
                    residual: None,
                    points_used: 0,
                    fit_error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::Lookahead;

    #[test]
    fn initial_state_is_deterministic_and_shared() {
        let model = ModelSpec::Gaussian { gamma: 1.0, dim: 4 }.build().unwrap();
        let lvl = NoiseSchedule::Ve.level(10.0).unwrap();
        let a = initial_state(&model, &lvl, 3);
        let b = initial_state(&model, &lvl, 3);
        assert_eq!(a, b);
        assert_ne!(a, initial_state(&model, &lvl, 4));
    }

    #[test]
    fn plan_validation() {
        let mut p = ExperimentPlan::new(
            ExperimentKind::Cancellation,
            ModelSpec::Gaussian { gamma: 1.0, dim: 2 },
            vec![10, 20, 40, 80],
            vec![SamplerSpec::ddim()],
        );
        assert!(matches!(p.validate(), Err(Error::InvalidPlan(_))));
        p.samplers.push(SamplerSpec::forward_ideal());
        p.validate().unwrap();
        p.m_list = vec![10, 20, 20, 40];
        assert!(p.validate().is_err());
        p.m_list = vec![10, 20, 40];
        assert!(p.validate().is_err());
    }

    #[test]
    fn plan_json_rejects_unknown_keys() {
        let good = r#"{"experiment":"orders","model":{"model":"gaussian","gamma":1.0,"dim":4},
            "M_list":[10,20,40,80],"samplers":[{"rule":"ddim"},{"rule":"ode-solver","order":2}]}"#;
        let p: ExperimentPlan = serde_json::from_str(good).unwrap();
        assert_eq!(p.seeds, vec![0, 1, 2]);
        assert_eq!(p.grid, GridFamily::default());
        let bad = good.replacen("\"experiment\"", "\"bogus\":1,\"experiment\"", 1);
        assert!(serde_json::from_str::<ExperimentPlan>(&bad).is_err());
    }

    #[test]
    fn equal_nfe_halves_forward_value_steps() {
        let mut p = ExperimentPlan::new(
            ExperimentKind::Orders,
            ModelSpec::Gaussian { gamma: 1.0, dim: 2 },
            vec![10, 20, 40, 80],
            vec![SamplerSpec::ddim(), SamplerSpec::forward_value(Lookahead::Ddim)],
        );
        p.comparison = Comparison::EqualNfe;
        p.seeds = vec![0];
        let r = run_plan(&p, 1).unwrap();
        let fv: Vec<_> = r.rows.iter().filter(|row| row.sampler == "forward-value").collect();
        assert_eq!(fv.iter().map(|row| row.m).collect::<Vec<_>>(), vec![5, 10, 20, 40]);
        assert!(fv.iter().all(|row| row.nfe == 2 * row.m));
        let dd: Vec<_> = r.rows.iter().filter(|row| row.sampler == "ddim").collect();
        assert_eq!(dd.iter().map(|row| row.nfe).collect::<Vec<_>>(), vec![10, 20, 40, 80]);
    }
}
