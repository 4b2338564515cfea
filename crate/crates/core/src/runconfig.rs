//! The run-config document shared by the CLI and the session service.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::driver::{DriverConfig, Problem};
use crate::error::{Error, Result};
use crate::oracle::{DatasetOracle, ExpertSpec, SyntheticSurfaceSpec};
use crate::space::ConfigSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSource {
    Surface(SyntheticSurfaceSpec),
    Dataset(DatasetSource),
}

/// A recorded dataset, either inline or as a path relative to the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
}

fn d_test_n() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSuiteSpec {
    /// Held-out configurations; 0 disables held-out evaluation.
    #[serde(default = "d_test_n")]
    pub n: usize,
}

impl Default for TestSuiteSpec {
    fn default() -> Self {
        Self { n: d_test_n() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub space: ConfigSpace,
    pub oracle: OracleSource,
    /// Simulated expert; used by batch runs and by auto-advance in the service.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expert: Option<ExpertSpec>,
    #[serde(default)]
    pub driver: DriverConfig,
    #[serde(default)]
    pub test_suite: TestSuiteSpec,
}

impl RunConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Validation {
                parameter: path,
                reason: inner.to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.driver.validate()?;
        if let Some(e) = &self.expert {
            e.validate()?;
        }
        match &self.oracle {
            OracleSource::Surface(s) => {
                if s.optimum.len() != self.space.encoded_dim() || s.weights.len() != self.space.encoded_dim() {
                    return Err(Error::validation(
                        "oracle.surface",
                        format!("weights and optimum need {} entries", self.space.encoded_dim()),
                    ));
                }
            }
            OracleSource::Dataset(d) => {
                if d.path.is_some() == d.csv.is_some() {
                    return Err(Error::validation("oracle.dataset", "give exactly one of `path` or `csv`"));
                }
            }
        }
        if self.test_suite.n == 1 {
            return Err(Error::validation("test_suite.n", "must be 0 or at least 2"));
        }
        Ok(())
    }

    /// The simulated expert, defaulting to a perfect one seeded from the run.
    pub fn expert_or_default(&self) -> ExpertSpec {
        self.expert.clone().unwrap_or(ExpertSpec {
            abstain_prob: 0.0,
            ..ExpertSpec::new(1.0, self.driver.seed)
        })
    }

    /// Materializes candidates, oracle and held-out suite. Dataset paths are
    /// resolved against `base_dir`.
    pub fn build_problem(&self, base_dir: Option<&Path>) -> Result<Problem> {
        let cost = self.driver.budgets.measurement_cost_s;
        match &self.oracle {
            OracleSource::Surface(spec) => Problem::synthetic(
                self.space.clone(),
                spec.clone(),
                self.driver.candidates,
                self.test_suite.n,
                self.driver.seed,
            ),
            OracleSource::Dataset(d) => {
                let oracle = match (&d.path, &d.csv) {
                    (Some(p), _) => {
                        let full = match base_dir {
                            Some(b) if p.is_relative() => b.join(p),
                            _ => p.clone(),
                        };
                        DatasetOracle::from_csv(self.space.clone(), std::fs::File::open(full)?, cost)?
                    }
                    (None, Some(text)) => DatasetOracle::from_csv(self.space.clone(), text.as_bytes(), cost)?,
                    (None, None) => unreachable!("validated"),
                };
                Problem::from_dataset(oracle, Some(self.driver.candidates), self.test_suite.n, self.driver.seed)
            }
        }
    }
}
