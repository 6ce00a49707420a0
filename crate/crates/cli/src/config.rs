use std::path::PathBuf;

use odeslab::harness::{Comparison, ExperimentKind, ExperimentPlan, GridFamily};
use odeslab::oracle::OracleOptions;
use odeslab::{ModelSpec, NoiseSchedule, SamplerSpec};
use serde::Deserialize;

/// A `run` configuration file: an experiment plan plus output settings.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
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
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub comparison: Comparison,
    #[serde(default)]
    pub oracle: OracleOptions,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn plan(&self) -> ExperimentPlan {
        let mut p = ExperimentPlan::new(self.experiment, self.model.clone(), self.m_list.clone(), self.samplers.clone());
        p.name = self.name.clone();
        p.schedule = self.schedule;
        p.grid = self.grid.clone();
        if let Some(s) = &self.seeds {
            p.seeds = s.clone();
        }
        p.comparison = self.comparison;
        p.oracle = self.oracle;
        p
    }
}
