use serde::{Deserialize, Serialize};

use crate::comparator::LearnerSpec;
use crate::error::{Error, Result};

/// Which learning strategy a session runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Cluster-based AL plus verified median-distance pseudolabels.
    #[serde(alias = "cm-casl")]
    CmCasl,
    /// Cluster-based AL only.
    #[serde(alias = "al-ir")]
    AlIr,
    /// Uncertainty-only AL (no clustering).
    #[serde(alias = "al-i")]
    AlI,
    /// Self-training with the most confident predictions, no expert.
    #[serde(alias = "ssl-only", alias = "ssl")]
    SslOnly,
    /// As `CmCasl` but pseudolabels the farthest verified pairs.
    #[serde(alias = "assl-h")]
    AsslH,
    /// Randomly chosen expert-labeled pairs, one final fit.
    #[serde(alias = "passive-svm", alias = "svm")]
    PassiveSvm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::PassiveSvm,
        Variant::AlI,
        Variant::AlIr,
        Variant::SslOnly,
        Variant::AsslH,
        Variant::CmCasl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CmCasl => "cm-casl",
            Variant::AlIr => "al-ir",
            Variant::AlI => "al-i",
            Variant::SslOnly => "ssl-only",
            Variant::AsslH => "assl-h",
            Variant::PassiveSvm => "passive-svm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::validation("variant", format!("unknown variant `{s}`")))
    }

    pub(crate) fn uses_expert(self) -> bool {
        !matches!(self, Variant::SslOnly)
    }

    pub(crate) fn verified_ssl(self) -> bool {
        matches!(self, Variant::CmCasl | Variant::AsslH)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_measurement_cost() -> f64 {
    300.0
}

fn default_label_cost() -> f64 {
    30.0
}

/// Simulated wall-clock accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budgets {
    /// Total allowed simulated time; `None` disables the start-up check.
    #[serde(default)]
    pub time_constraint_s: Option<f64>,
    #[serde(default = "default_measurement_cost")]
    pub measurement_cost_s: f64,
    #[serde(default = "default_label_cost")]
    pub label_cost_s: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            time_constraint_s: None,
            measurement_cost_s: default_measurement_cost(),
            label_cost_s: default_label_cost(),
        }
    }
}

fn d_budget() -> usize {
    200
}
fn d_q() -> usize {
    10
}
fn d_n() -> usize {
    3
}
fn d_p() -> usize {
    5
}
fn d_t() -> usize {
    20
}
fn d_initial() -> usize {
    10
}
fn d_candidates() -> usize {
    60
}
fn d_kmeans_iter() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    /// Expert-label budget Q.
    #[serde(rename = "Q", alias = "budget", default = "d_budget")]
    pub budget: usize,
    /// AL batch size.
    #[serde(default = "d_q")]
    pub q: usize,
    /// Uncertainty divisor of the query strategy.
    #[serde(default = "d_n")]
    pub n: usize,
    /// AL iterations per SSL step.
    #[serde(rename = "P", alias = "p", default = "d_p")]
    pub p: usize,
    /// Pseudolabels per SSL step.
    #[serde(default = "d_t")]
    pub t: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    /// Configurations measured up front to seed S_L.
    #[serde(default = "d_initial")]
    pub initial_measured: usize,
    /// Size of the candidate configuration set C.
    #[serde(default = "d_candidates")]
    pub candidates: usize,
    /// When set, overrides `initial_measured` with the number of measurements
    /// that fit in this fraction of the time constraint.
    #[serde(default)]
    pub selection_ratio: Option<f64>,
    #[serde(default = "d_kmeans_iter")]
    pub kmeans_max_iter: usize,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub learner: LearnerSpec,
    /// Evaluate held-out CA after every retrain (needs a test suite).
    #[serde(default)]
    pub track_held_out: bool,
}

fn default_variant() -> Variant {
    Variant::CmCasl
}

impl Default for DriverConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl DriverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::validation("driver.Q", "must be at least 1"));
        }
        if self.q == 0 {
            return Err(Error::validation("driver.q", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(Error::validation("driver.n", "must be at least 1"));
        }
        if self.p == 0 {
            return Err(Error::validation("driver.P", "must be at least 1"));
        }
        if self.t == 0 || !self.t.is_multiple_of(2) {
            return Err(Error::validation("driver.t", "must be a positive even number"));
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::validation("driver.kmeans_max_iter", "must be at least 1"));
        }
        let b = &self.budgets;
        if !(b.measurement_cost_s >= 0.0 && b.label_cost_s >= 0.0) {
            return Err(Error::validation("driver.budgets", "costs must be non-negative"));
        }
        if let Some(r) = self.selection_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::validation("driver.selection_ratio", "must lie in (0, 1]"));
            }
            if b.time_constraint_s.is_none() {
                return Err(Error::validation(
                    "driver.selection_ratio",
                    "requires budgets.time_constraint_s",
                ));
            }
        }
        if self.effective_initial_measured() < 2 {
            return Err(Error::validation(
                "driver.initial_measured",
                "at least 2 configurations must be measured",
            ));
        }
        if self.effective_initial_measured() > self.candidates {
            return Err(Error::validation(
                "driver.initial_measured",
                "cannot exceed the candidate count",
            ));
        }
        self.learner.validate()
    }

    /// Measurements that fit in `ratio` of the time constraint.
    pub fn initial_for_ratio(ratio: f64, budgets: &Budgets) -> usize {
        match budgets.time_constraint_s {
            Some(tc) if budgets.measurement_cost_s > 0.0 => {
                (ratio * tc / budgets.measurement_cost_s).floor() as usize
            }
            _ => 0,
        }
    }

    pub fn effective_initial_measured(&self) -> usize {
        match self.selection_ratio {
            Some(r) => Self::initial_for_ratio(r, &self.budgets),
            None => self.initial_measured,
        }
    }

    pub fn plan(&self) -> Plan {
        Plan::new(self.budget, self.q, self.p)
    }
}

/// Iteration counts of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    /// AL iterations, `floor(Q / q)`.
    pub al_iterations: usize,
    /// SSL steps, `floor(M / P)`.
    pub ssl_steps: usize,
    /// AL iterations after the last SSL step, `M - P * T`.
    pub tail: usize,
}

impl Plan {
    pub fn new(budget: usize, q: usize, p: usize) -> Self {
        let m = budget / q;
        let t = m / p;
        Self {
            al_iterations: m,
            ssl_steps: t,
            tail: m - p * t,
        }
    }
}
