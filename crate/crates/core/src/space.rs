//! Configuration spaces, configurations and their numeric encoding.
//!
//! Numeric parameters are min-max scaled against their declared bounds and
//! categorical parameters are one-hot encoded, so every encoded coordinate
//! lies in `[0, 1]` and the encoding never depends on observed data.

use std::collections::HashSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub enum ParameterKind {
    Continuous { lower: f64, upper: f64 },
    Integer { lower: i64, upper: i64 },
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParameter", into = "RawParameter")]
pub struct ParameterDef {
    pub name: String,
    pub kind: ParameterKind,
}

impl ParameterDef {
    pub fn continuous(name: impl Into<String>, lower: f64, upper: f64) -> Result<Self> {
        Self::checked(name.into(), ParameterKind::Continuous { lower, upper })
    }

    pub fn integer(name: impl Into<String>, lower: i64, upper: i64) -> Result<Self> {
        Self::checked(name.into(), ParameterKind::Integer { lower, upper })
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let categories = categories.into_iter().map(Into::into).collect();
        Self::checked(name.into(), ParameterKind::Categorical { categories })
    }

    fn checked(name: String, kind: ParameterKind) -> Result<Self> {
        let bad = |reason: String| Err(Error::validation(name.clone(), reason));
        match &kind {
            ParameterKind::Continuous { lower, upper } => {
                if !(lower.is_finite() && upper.is_finite()) {
                    return bad("bounds must be finite".into());
                }
                if lower >= upper {
                    return bad(format!("lower bound {lower} must be below upper bound {upper}"));
                }
            }
            ParameterKind::Integer { lower, upper } => {
                if lower >= upper {
                    return bad(format!("lower bound {lower} must be below upper bound {upper}"));
                }
            }
            ParameterKind::Categorical { categories } => {
                if categories.is_empty() {
                    return bad("categorical parameter needs at least one category".into());
                }
                let mut seen = HashSet::new();
                for c in categories {
                    if !seen.insert(c.as_str()) {
                        return bad(format!("duplicate category `{c}`"));
                    }
                }
            }
        }
        Ok(Self { name, kind })
    }

    pub fn encoded_width(&self) -> usize {
        match &self.kind {
            ParameterKind::Categorical { categories } => categories.len(),
            _ => 1,
        }
    }

    /// Returns a reason if `value` is not admissible for this parameter.
    pub fn check(&self, value: &ParamValue) -> Option<String> {
        match (&self.kind, value) {
            (ParameterKind::Continuous { lower, upper }, ParamValue::Number(v)) => {
                if !v.is_finite() {
                    Some(format!("value {v} is not finite"))
                } else if v < lower || v > upper {
                    Some(format!("value {v} outside [{lower}, {upper}]"))
                } else {
                    None
                }
            }
            (ParameterKind::Integer { lower, upper }, ParamValue::Number(v)) => {
                if !v.is_finite() || v.fract() != 0.0 {
                    Some(format!("value {v} is not an integer"))
                } else if *v < *lower as f64 || *v > *upper as f64 {
                    Some(format!("value {v} outside [{lower}, {upper}]"))
                } else {
                    None
                }
            }
            (ParameterKind::Categorical { categories }, ParamValue::Category(c)) => {
                if categories.iter().any(|k| k == c) {
                    None
                } else {
                    Some(format!("`{c}` is not one of {categories:?}"))
                }
            }
            (ParameterKind::Categorical { .. }, ParamValue::Number(v)) => {
                Some(format!("expected a category, got number {v}"))
            }
            (_, ParamValue::Category(c)) => Some(format!("expected a number, got `{c}`")),
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> ParamValue {
        match &self.kind {
            ParameterKind::Continuous { lower, upper } => {
                ParamValue::Number(rng.random_range(*lower..=*upper))
            }
            ParameterKind::Integer { lower, upper } => {
                ParamValue::Number(rng.random_range(*lower..=*upper) as f64)
            }
            ParameterKind::Categorical { categories } => {
                ParamValue::Category(categories[rng.random_range(0..categories.len())].clone())
            }
        }
    }

    /// Parses a textual cell (CSV) into a value of this parameter's kind.
    pub fn parse_value(&self, text: &str) -> Result<ParamValue> {
        let text = text.trim();
        match &self.kind {
            ParameterKind::Categorical { .. } => Ok(ParamValue::Category(text.to_string())),
            _ => text.parse::<f64>().map(ParamValue::Number).map_err(|_| {
                Error::validation(self.name.clone(), format!("cannot parse `{text}` as a number"))
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawParameter {
    name: String,
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
}

impl TryFrom<RawParameter> for ParameterDef {
    type Error = Error;

    fn try_from(raw: RawParameter) -> Result<Self> {
        let bounds = |raw: &RawParameter| match (raw.min, raw.max) {
            (Some(lo), Some(hi)) => Ok((lo, hi)),
            _ => Err(Error::validation(raw.name.clone(), "numeric parameter needs `min` and `max`")),
        };
        match raw.kind.as_str() {
            "continuous" | "real" | "float" => {
                let (lo, hi) = bounds(&raw)?;
                ParameterDef::continuous(raw.name, lo, hi)
            }
            "integer" | "int" => {
                let (lo, hi) = bounds(&raw)?;
                if lo.fract() != 0.0 || hi.fract() != 0.0 {
                    return Err(Error::validation(raw.name, "integer bounds must be integral"));
                }
                ParameterDef::integer(raw.name, lo as i64, hi as i64)
            }
            "categorical" | "enum" => {
                let values = raw.values.ok_or_else(|| {
                    Error::validation(raw.name.clone(), "categorical parameter needs `values`")
                })?;
                ParameterDef::categorical(raw.name, values)
            }
            other => Err(Error::validation(raw.name, format!("unknown parameter type `{other}`"))),
        }
    }
}

impl From<ParameterDef> for RawParameter {
    fn from(p: ParameterDef) -> Self {
        match p.kind {
            ParameterKind::Continuous { lower, upper } => RawParameter {
                name: p.name,
                kind: "continuous".into(),
                min: Some(lower),
                max: Some(upper),
                values: None,
            },
            ParameterKind::Integer { lower, upper } => RawParameter {
                name: p.name,
                kind: "integer".into(),
                min: Some(lower as f64),
                max: Some(upper as f64),
                values: None,
            },
            ParameterKind::Categorical { categories } => RawParameter {
                name: p.name,
                kind: "categorical".into(),
                min: None,
                max: None,
                values: Some(categories),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "higher")]
    HigherIsBetter,
    #[serde(rename = "lower")]
    LowerIsBetter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub name: String,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace", into = "RawSpace")]
pub struct ConfigSpace {
    parameters: Vec<ParameterDef>,
    objective: Objective,
    encoded_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawSpace {
    parameters: Vec<ParameterDef>,
    objective: Objective,
}

impl TryFrom<RawSpace> for ConfigSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        ConfigSpace::new(raw.parameters, raw.objective)
    }
}

impl From<ConfigSpace> for RawSpace {
    fn from(s: ConfigSpace) -> Self {
        RawSpace {
            parameters: s.parameters,
            objective: s.objective,
        }
    }
}

impl ConfigSpace {
    pub fn new(parameters: Vec<ParameterDef>, objective: Objective) -> Result<Self> {
        if parameters.is_empty() {
            return Err(Error::InvalidSpace("no parameters declared".into()));
        }
        let mut names = HashSet::new();
        for p in &parameters {
            if !names.insert(p.name.as_str()) {
                return Err(Error::InvalidSpace(format!("duplicate parameter name `{}`", p.name)));
            }
        }
        let encoded_dim = parameters.iter().map(ParameterDef::encoded_width).sum();
        Ok(Self {
            parameters,
            objective,
            encoded_dim,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn parameters(&self) -> &[ParameterDef] {
        &self.parameters
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn encoded_dim(&self) -> usize {
        self.encoded_dim
    }

    /// Maps a raw objective value onto the internal higher-is-better scale.
    pub fn to_internal(&self, raw: f64) -> f64 {
        match self.objective.direction {
            Direction::HigherIsBetter => raw,
            Direction::LowerIsBetter => -raw,
        }
    }

    pub fn to_raw(&self, internal: f64) -> f64 {
        self.to_internal(internal)
    }

    /// Every bound or category violation; empty iff the configuration is valid.
    pub fn validate(&self, config: &Configuration) -> Vec<Violation> {
        if config.values.len() != self.parameters.len() {
            return vec![Violation {
                parameter: "<configuration>".into(),
                reason: format!(
                    "expected {} values, got {}",
                    self.parameters.len(),
                    config.values.len()
                ),
            }];
        }
        self.parameters
            .iter()
            .zip(&config.values)
            .filter_map(|(p, v)| {
                p.check(v).map(|reason| Violation {
                    parameter: p.name.clone(),
                    reason,
                })
            })
            .collect()
    }

    pub fn encode(&self, config: &Configuration) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.encoded_dim);
        self.encode_into(config, &mut out)?;
        Ok(out)
    }

    /// Appends the encoding of `config` to `out`.
    pub fn encode_into(&self, config: &Configuration, out: &mut Vec<f64>) -> Result<()> {
        if let Some(v) = self.validate(config).into_iter().next() {
            return Err(Error::validation(v.parameter, v.reason));
        }
        for (p, v) in self.parameters.iter().zip(&config.values) {
            match (&p.kind, v) {
                (ParameterKind::Continuous { lower, upper }, ParamValue::Number(x)) => {
                    out.push((x - lower) / (upper - lower));
                }
                (ParameterKind::Integer { lower, upper }, ParamValue::Number(x)) => {
                    out.push((x - *lower as f64) / (*upper - *lower) as f64);
                }
                (ParameterKind::Categorical { categories }, ParamValue::Category(c)) => {
                    out.extend(categories.iter().map(|k| if k == c { 1.0 } else { 0.0 }));
                }
                _ => unreachable!("validated above"),
            }
        }
        Ok(())
    }

    /// Inverse of [`encode`](Self::encode) for numeric parameters and argmax for
    /// one-hot blocks; integers are rounded to the nearest admissible value.
    pub fn decode(&self, encoded: &[f64], id: u64) -> Result<Configuration> {
        if encoded.len() != self.encoded_dim {
            return Err(Error::DimensionMismatch {
                expected: self.encoded_dim,
                actual: encoded.len(),
            });
        }
        let mut values = Vec::with_capacity(self.parameters.len());
        let mut at = 0;
        for p in &self.parameters {
            match &p.kind {
                ParameterKind::Continuous { lower, upper } => {
                    let x = encoded[at].clamp(0.0, 1.0);
                    values.push(ParamValue::Number(lower + x * (upper - lower)));
                    at += 1;
                }
                ParameterKind::Integer { lower, upper } => {
                    let x = encoded[at].clamp(0.0, 1.0);
                    let v = (*lower as f64 + x * (*upper - *lower) as f64).round();
                    values.push(ParamValue::Number(v));
                    at += 1;
                }
                ParameterKind::Categorical { categories } => {
                    let block = &encoded[at..at + categories.len()];
                    let best = block
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, x)| if *x > block[b] { i } else { b });
                    values.push(ParamValue::Category(categories[best].clone()));
                    at += categories.len();
                }
            }
        }
        Ok(Configuration { id, values })
    }

    /// Draws one uniformly random valid configuration.
    pub fn random_config(&self, id: u64, rng: &mut impl Rng) -> Configuration {
        Configuration {
            id,
            values: self.parameters.iter().map(|p| p.sample(rng)).collect(),
        }
    }

    /// Resamples a single parameter uniformly, in place.
    pub fn resample_value(&self, index: usize, rng: &mut impl Rng) -> ParamValue {
        self.parameters[index].sample(rng)
    }
}

/// `count` uniformly random configurations with ids `0..count`.
pub fn sample_uniform(space: &ConfigSpace, count: usize, seed: u64) -> Result<Vec<Configuration>> {
    sample_uniform_from(space, count, seed, 0)
}

/// As [`sample_uniform`] with ids starting at `first_id`.
pub fn sample_uniform_from(
    space: &ConfigSpace,
    count: usize,
    seed: u64,
    first_id: u64,
) -> Result<Vec<Configuration>> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, "sample_uniform", 0);
    Ok((0..count as u64)
        .map(|i| space.random_config(first_id + i, &mut rng))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Category(String),
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Number(v) => write!(f, "{v}"),
            ParamValue::Category(c) => f.write_str(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configuration {
    pub id: u64,
    pub values: Vec<ParamValue>,
}

impl Configuration {
    pub fn new(id: u64, values: Vec<ParamValue>) -> Self {
        Self { id, values }
    }

    /// True when both configurations carry the same parameter values.
    pub fn same_values(&self, other: &Configuration) -> bool {
        self.values == other.values
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub parameter: String,
    pub reason: String,
}
