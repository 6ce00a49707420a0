use serde::{Deserialize, Serialize};

use super::{NoiseLevel, NoiseSchedule};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    UniformLambda,
    UniformTime,
    SubsampleReference,
    /// Hand-built from explicit times; never produced by [`build_grid`].
    Explicit,
}

/// Spacing of the reference grid that `subsample-reference` draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSpacing {
    #[default]
    Time,
    Lambda,
}

/// Grid request as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub kind: GridKind,
    #[serde(rename = "M")]
    pub m: usize,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(rename = "M_ref", default, skip_serializing_if = "Option::is_none")]
    pub m_ref: Option<usize>,
    #[serde(default)]
    pub reference_spacing: ReferenceSpacing,
}

impl GridSpec {
    pub fn uniform_lambda(m: usize, t_start: f64, t_end: f64) -> Self {
        GridSpec {
            kind: GridKind::UniformLambda,
            m,
            t_start,
            t_end,
            m_ref: None,
            reference_spacing: ReferenceSpacing::Time,
        }
    }

    pub fn with_m(&self, m: usize) -> Self {
        GridSpec { m, ..self.clone() }
    }
}

/// Decreasing times t_0 > … > t_M with cached schedule values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    pub schedule: NoiseSchedule,
    pub kind: GridKind,
    pub times: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Indices into the reference grid for `subsample-reference` grids.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_indices: Option<Vec<usize>>,
}

impl TimeGrid {
    /// Builds a grid from explicit times without checking monotonicity.
    pub fn from_times(schedule: NoiseSchedule, times: &[f64]) -> Result<Self> {
        let levels = times
            .iter()
            .map(|&t| schedule.level(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_levels(schedule, GridKind::Explicit, &levels))
    }

    fn from_levels(schedule: NoiseSchedule, kind: GridKind, levels: &[NoiseLevel]) -> Self {
        TimeGrid {
            schedule,
            kind,
            times: levels.iter().map(|l| l.t).collect(),
            lambdas: levels.iter().map(|l| l.lambda).collect(),
            alphas: levels.iter().map(|l| l.alpha).collect(),
            sigmas: levels.iter().map(|l| l.sigma).collect(),
            reference_indices: None,
        }
    }

    /// Number of steps M.
    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn level(&self, i: usize) -> NoiseLevel {
        NoiseLevel {
            t: self.times[i],
            alpha: self.alphas[i],
            sigma: self.sigmas[i],
            lambda: self.lambdas[i],
        }
    }

    /// δ_i = λ_{t_i} − λ_{t_{i−1}} for i = 1..=M (index 0 of the result is δ_1).
    pub fn deltas(&self) -> Vec<f64> {
        self.lambdas.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn has_terminal_zero_sigma(&self) -> bool {
        self.sigmas.last().is_some_and(|&s| s == 0.0)
    }
}

/// Reference indices i' = round(i·M_ref/M), i = 0..=M.
pub fn subsample_indices(m: usize, m_ref: usize) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::InvalidGrid("M must be at least 1".into()));
    }
    if m_ref < m {
        return Err(Error::InvalidGrid(format!("M_ref ({m_ref}) must be at least M ({m})")));
    }
    // Integer round-half-up of i·M_ref/M.
    Ok((0..=m).map(|i| (2 * i * m_ref + m) / (2 * m)).collect())
}

pub fn build_grid(schedule: NoiseSchedule, spec: &GridSpec) -> Result<TimeGrid> {
    schedule.validate()?;
    let m = spec.m;
    if m == 0 {
        return Err(Error::InvalidGrid("M must be at least 1".into()));
    }
    let (t_start, t_end) = (spec.t_start, spec.t_end);
    if !(t_start > t_end) {
        return Err(Error::InvalidGrid(format!(
            "t_start ({t_start}) must exceed t_end ({t_end})"
        )));
    }
    let (t_min, _) = schedule.domain();
    if t_end < t_min {
        return Err(Error::InvalidGrid(format!("t_end ({t_end}) below t_min ({t_min})")));
    }

    match spec.kind {
        GridKind::UniformLambda => {
            let levels = uniform_lambda_levels(schedule, t_start, t_end, m)?;
            Ok(TimeGrid::from_levels(schedule, spec.kind, &levels))
        }
        GridKind::UniformTime => {
            let levels = uniform_time_levels(schedule, t_start, t_end, m)?;
            Ok(TimeGrid::from_levels(schedule, spec.kind, &levels))
        }
        GridKind::SubsampleReference => {
            let m_ref = spec
                .m_ref
                .ok_or_else(|| Error::InvalidGrid("subsample-reference needs M_ref".into()))?;
            let idx = subsample_indices(m, m_ref)?;
            let reference = match spec.reference_spacing {
                ReferenceSpacing::Time => uniform_time_levels(schedule, t_start, t_end, m_ref)?,
                ReferenceSpacing::Lambda => uniform_lambda_levels(schedule, t_start, t_end, m_ref)?,
            };
            let levels: Vec<NoiseLevel> = idx.iter().map(|&k| reference[k]).collect();
            let mut grid = TimeGrid::from_levels(schedule, spec.kind, &levels);
            grid.reference_indices = Some(idx);
            Ok(grid)
        }
        GridKind::Explicit => Err(Error::InvalidGrid(
            "explicit grids are built with TimeGrid::from_times".into(),
        )),
    }
}

fn uniform_time_levels(
    schedule: NoiseSchedule,
    t_start: f64,
    t_end: f64,
    m: usize,
) -> Result<Vec<NoiseLevel>> {
    (0..=m)
        .map(|i| {
            let t = if i == m {
                t_end
            } else {
                t_start + (t_end - t_start) * (i as f64) / (m as f64)
            };
            schedule.level(t)
        })
        .collect()
}

fn uniform_lambda_levels(
    schedule: NoiseSchedule,
    t_start: f64,
    t_end: f64,
    m: usize,
) -> Result<Vec<NoiseLevel>> {
    let first = schedule.level(t_start)?;
    let last = schedule.level(t_end)?;
    if !last.lambda.is_finite() {
        return Err(Error::InvalidGrid(
            "uniform-lambda grids cannot end where sigma = 0".into(),
        ));
    }
    let (l0, l1) = (first.lambda, last.lambda);
    let step = (l1 - l0) / (m as f64);
    (0..=m)
        .map(|i| {
            if i == 0 {
                Ok(first)
            } else if i == m {
                Ok(last)
            } else {
                schedule.level_at_lambda(l0 + step * i as f64)
            }
        })
        .collect()
}

/// Result of a successful [`validate_grid`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridReport {
    pub steps: usize,
    pub max_delta: f64,
}

/// Checks δ_i > 0, α nondecreasing and σ nonincreasing along the grid.
pub fn validate_grid(grid: &TimeGrid) -> Result<GridReport> {
    let m = grid.steps();
    if m == 0 {
        return Err(Error::GridViolation {
            index: 0,
            what: "grid needs at least two nodes".into(),
        });
    }
    let mut max_delta: f64 = 0.0;
    for i in 1..=m {
        let delta = grid.lambdas[i] - grid.lambdas[i - 1];
        if !(delta > 0.0) {
            return Err(Error::GridViolation {
                index: i,
                what: format!("delta = {delta} is not positive"),
            });
        }
        if grid.alphas[i] < grid.alphas[i - 1] {
            return Err(Error::GridViolation {
                index: i,
                what: "alpha decreases".into(),
            });
        }
        if grid.sigmas[i] > grid.sigmas[i - 1] {
            return Err(Error::GridViolation {
                index: i,
                what: "sigma increases".into(),
            });
        }
        max_delta = max_delta.max(delta);
    }
    Ok(GridReport {
        steps: m,
        max_delta,
    })
}
