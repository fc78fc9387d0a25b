//! Run configuration: one TOML file, `--set` overrides, validation at load.

use std::path::{Path, PathBuf};

use bk_thermo::{BkMapDescriptor, PotentialParams, SamplingPolicy, TruncationPolicy};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// A configuration problem, reported with the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub lambda: f64,
    pub r0: Option<f64>,
    pub delta: Option<f64>,
    pub t_floor: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            name: "tangent".into(),
            lambda: 0.5,
            r0: None,
            delta: None,
            t_floor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialSection {
    pub tau: f64,
    pub t: f64,
}

impl Default for PotentialSection {
    fn default() -> Self {
        Self { tau: 1.5, t: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruncationSection {
    pub k: u32,
    pub k_max: u32,
    pub tail_tol: f64,
    pub node_tol: f64,
    pub node_budget: usize,
    /// Depth of preimage trees and operator powers.
    pub n_max: usize,
}

impl Default for TruncationSection {
    fn default() -> Self {
        let t = TruncationPolicy::default();
        Self {
            k: t.k,
            k_max: t.k_max,
            tail_tol: t.tail_tol,
            node_tol: t.node_tol,
            node_budget: t.node_budget,
            n_max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    /// Starting guess `[re, im]` for the repelling fixed point used as root.
    pub seed_hint: [f64; 2],
    pub depth: u32,
    pub budget: usize,
    pub branch_range: u32,
    pub rng_seed: u64,
    pub weighted_fraction: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let s = SamplingPolicy::default();
        Self {
            seed_hint: [4.6, 0.0],
            depth: s.depth,
            budget: s.budget,
            branch_range: s.branch_range,
            rng_seed: s.rng_seed,
            weighted_fraction: s.weighted_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Overrides `BKTHERMO_OUT`; `--out` overrides both.
    pub directory: Option<PathBuf>,
    /// Subset of `csv` and `json`.
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: None,
            formats: vec!["csv".into(), "json".into()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    pub t_min: f64,
    pub t_max: f64,
    pub steps: usize,
}

impl Default for CurveSection {
    fn default() -> Self {
        Self {
            t_min: 2.5,
            t_max: 4.0,
            steps: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitySection {
    pub n_terms: usize,
}

impl Default for DensitySection {
    fn default() -> Self {
        Self { n_terms: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsSection {
    pub n_range: Vec<usize>,
    /// Radii for the quasi-invariance decay and the escaping-mass sensitivity.
    pub radii: Vec<f64>,
    pub iterated_steps: usize,
}

impl Default for GibbsSection {
    fn default() -> Self {
        Self {
            n_range: vec![2, 3, 4, 5, 6],
            radii: vec![5.0, 10.0, 20.0],
            iterated_steps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimensionSection {
    /// Search bracket for `t`; `None` starts just above the admissibility floor.
    pub bracket: Option<[f64; 2]>,
    pub tol: f64,
}

impl Default for DimensionSection {
    fn default() -> Self {
        Self {
            bracket: None,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub potential: PotentialSection,
    pub truncation: TruncationSection,
    pub sampling: SamplingSection,
    pub output: OutputSection,
    pub curve: CurveSection,
    pub density: DensitySection,
    pub gibbs: GibbsSection,
    pub dimension: DimensionSection,
}

impl RunConfig {
    /// Reads `path` (or the defaults when `None`), applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    ConfigError::new("config", format!("cannot read {}: {e}", p.display()))
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::new("config", format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::new("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[cfg(test)]
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> Result<BkMapDescriptor, ConfigError> {
        if self.model.name != "tangent" {
            return Err(ConfigError::new(
                "model.name",
                format!("unknown family {:?}; available: tangent", self.model.name),
            ));
        }
        let mut m = BkMapDescriptor::tangent(self.model.lambda)
            .map_err(|e| ConfigError::new("model.lambda", e.to_string()))?;
        if let Some(r0) = self.model.r0 {
            m.r0 = r0;
        }
        if let Some(d) = self.model.delta {
            m.delta = d;
        }
        if let Some(t) = self.model.t_floor {
            m.t_floor = t;
        }
        m.validate()
            .map_err(|e| ConfigError::new("model", e.to_string()))?;
        Ok(m)
    }

    pub fn params(&self) -> PotentialParams {
        PotentialParams::new(self.potential.tau, self.potential.t)
    }

    pub fn truncation(&self) -> TruncationPolicy {
        let t = &self.truncation;
        TruncationPolicy {
            k: t.k,
            k_max: t.k_max,
            tail_tol: t.tail_tol,
            node_tol: t.node_tol,
            node_budget: t.node_budget,
        }
    }

    pub fn sampling(&self) -> SamplingPolicy {
        let s = &self.sampling;
        SamplingPolicy {
            depth: s.depth,
            budget: s.budget,
            branch_range: s.branch_range,
            rng_seed: s.rng_seed,
            weighted_fraction: s.weighted_fraction,
        }
    }

    pub fn seed_hint(&self) -> Complex64 {
        Complex64::new(self.sampling.seed_hint[0], self.sampling.seed_hint[1])
    }

    pub fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }

    /// Field-level checks, including admissibility of `(τ, t)` for the model.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = self.model()?;
        let (tau, t) = (self.potential.tau, self.potential.t);
        let upper = 1.0 + 1.0 / f64::from(m.max_multiplicity);
        if !(tau > 1.0 && tau < upper) {
            return Err(ConfigError::new(
                "potential.tau",
                format!("{tau} must lie in (1, {upper})"),
            ));
        }
        let floor = m.order / (tau - 1.0);
        if !(t > floor) {
            return Err(ConfigError::new(
                "potential.t",
                format!("{t} must exceed rho/(tau-1) = {floor}"),
            ));
        }
        self.truncation()
            .validate()
            .map_err(|e| ConfigError::new("truncation", e.to_string()))?;
        if self.truncation.n_max < 2 {
            return Err(ConfigError::new("truncation.n_max", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.sampling.weighted_fraction) {
            return Err(ConfigError::new(
                "sampling.weighted_fraction",
                "must lie in [0, 1]",
            ));
        }
        if self.sampling.budget == 0 || self.sampling.depth == 0 {
            return Err(ConfigError::new(
                "sampling",
                "depth and budget must be positive",
            ));
        }
        if let Some(f) = self
            .output
            .formats
            .iter()
            .find(|f| *f != "csv" && *f != "json")
        {
            return Err(ConfigError::new(
                "output.formats",
                format!("unknown format {f:?}"),
            ));
        }
        let c = &self.curve;
        if !(c.t_min < c.t_max) || c.steps < 2 {
            return Err(ConfigError::new(
                "curve",
                "need t_min < t_max and at least 2 steps",
            ));
        }
        if self.density.n_terms < 1 {
            return Err(ConfigError::new("density.n_terms", "must be at least 1"));
        }
        if self.gibbs.radii.iter().any(|r| !(*r > 0.0)) {
            return Err(ConfigError::new("gibbs.radii", "radii must be positive"));
        }
        if let Some([lo, hi]) = self.dimension.bracket {
            if !(lo < hi) {
                return Err(ConfigError::new("dimension.bracket", "need lo < hi"));
            }
        }
        if !(self.dimension.tol > 0.0) {
            return Err(ConfigError::new("dimension.tol", "must be positive"));
        }
        Ok(())
    }
}

/// `section.key=value` with a TOML value; bare words are taken as strings.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::new(spec, "override must look like section.key=value"))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::new(key, format!("{part} is not a section")))?;
    }
    Err(ConfigError::new(spec, "empty key"))
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "potential.t=3.5".into(),
                "model.name=tangent".into(),
                "gibbs.n_range=[2, 4]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.potential.t, 3.5);
        assert_eq!(cfg.gibbs.n_range, vec![2, 4]);
    }

    #[test]
    fn inadmissible_t_names_the_field() {
        let err = RunConfig::load(None, &["potential.t=1.5".into()]).unwrap_err();
        assert_eq!(err.field, "potential.t");
        let err = RunConfig::load(None, &["potential.tau=2.5".into()]).unwrap_err();
        assert_eq!(err.field, "potential.tau");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["potential.beta=1".into()]).unwrap_err();
        assert!(err.message.contains("beta"), "{err}");
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
    }
}
