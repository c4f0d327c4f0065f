//! Run configuration: a TOML file with `[budget]`, `[timestep]`,
//! `[inversion]`, `[centroid]` and `[eval]` sections.
//!
//! Values resolve in three layers: built-in defaults, then the config file,
//! then command-line flags. Every key is optional in the file; unknown keys
//! are rejected. Fractions such as `"12/255"` are accepted wherever a pixel
//! quantity is expected.

use std::path::Path;

use digress_core::attack::{AttackBudget, Norm};
use digress_core::centroid::CentroidConfig;
use digress_core::eval::{EvalConfig, DEFAULT_STEPS};
use digress_core::inversion::{InversionConfig, NoiseLevel, ProjectionMetric};
use digress_core::timestep::TimestepDistribution;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{AppError, Result};

/// A float that may be written as a number or as a `"a/b"` string.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Fraction(pub f64);

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Fraction(v)),
            Raw::Int(v) => Ok(Fraction(v as f64)),
            Raw::Text(s) => parse_fraction(&s).map(Fraction).map_err(serde::de::Error::custom),
        }
    }
}

/// Parses `"0.5"` or `"12/255"`.
pub fn parse_fraction(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            if b == 0.0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            a / b
        }
        None => s.parse().map_err(|_| format!("not a number: {s:?}"))?,
    };
    if !v.is_finite() {
        return Err(format!("not finite: {s:?}"));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub epsilon: Fraction,
    pub step_size: Fraction,
    pub iterations: usize,
    pub grad_avg: usize,
    pub norm: String,
}

impl Default for BudgetSection {
    fn default() -> Self {
        let b = AttackBudget::default();
        Self {
            epsilon: Fraction(b.epsilon),
            step_size: Fraction(b.step_size),
            iterations: b.iterations,
            grad_avg: b.grad_avg,
            norm: b.norm.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimestepSection {
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub max: usize,
}

impl Default for TimestepSection {
    fn default() -> Self {
        let d = TimestepDistribution::default();
        Self {
            mean: d.mean,
            std: d.std,
            min: d.clamp_range.0,
            max: d.clamp_range.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionSection {
    pub num_tokens: usize,
    pub steps: usize,
    pub step_size: f64,
    /// `"cosine"` or `"euclidean"`.
    pub metric: String,
    /// `"sampled"` or `"terminal"`.
    pub noise_level: String,
    pub project: bool,
}

impl Default for InversionSection {
    fn default() -> Self {
        let c = InversionConfig::default();
        Self {
            num_tokens: c.num_tokens,
            steps: c.steps,
            step_size: c.step_size,
            metric: "cosine".into(),
            noise_level: "sampled".into(),
            project: c.project,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentroidSection {
    pub samples: usize,
    /// `"inverted"` (fitted prompt) or `"null"` (empty prompt).
    pub text: String,
    /// Attention layers in the distance; empty means all.
    pub layers: Vec<String>,
    /// Re-estimate the centroid every attack step (ablation).
    pub live: bool,
}

impl Default for CentroidSection {
    fn default() -> Self {
        Self {
            samples: CentroidConfig::default().samples,
            text: "inverted".into(),
            layers: Vec::new(),
            live: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub strengths: Vec<f64>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub augmentations: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            strengths: e.strengths,
            seeds: e.seeds,
            steps: DEFAULT_STEPS,
            augmentations: Vec::new(),
        }
    }
}

pub const AUGMENTATION_NAMES: [&str; 4] = ["gaussian_noise", "jpeg", "jitter", "rotate_crop"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every stage derives its own stream from it.
    pub seed: u64,
    pub budget: BudgetSection,
    pub timestep: TimestepSection,
    pub inversion: InversionSection,
    pub centroid: CentroidSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Defaults overlaid with `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| AppError::input(p, e))?;
                Self::from_toml(&text).map_err(|e| match e {
                    AppError::Config(m) => AppError::Config(format!("{}: {m}", p.display())),
                    e => e,
                })
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn budget(&self) -> Result<AttackBudget> {
        let b = AttackBudget {
            epsilon: self.budget.epsilon.0,
            step_size: self.budget.step_size.0,
            iterations: self.budget.iterations,
            grad_avg: self.budget.grad_avg,
            seed: self.seed,
            norm: Norm::parse(&self.budget.norm)
                .ok_or_else(|| AppError::Config(format!("unknown norm {:?}", self.budget.norm)))?,
        };
        b.validate().map_err(|e| AppError::Config(e.to_string()))?;
        Ok(b)
    }

    pub fn timestep(&self) -> Result<TimestepDistribution> {
        let d = TimestepDistribution {
            mean: self.timestep.mean,
            std: self.timestep.std,
            clamp_range: (self.timestep.min, self.timestep.max),
        };
        d.validate().map_err(|e| AppError::Config(e.to_string()))?;
        Ok(d)
    }

    pub fn inversion(&self) -> Result<InversionConfig> {
        let metric = match self.inversion.metric.as_str() {
            "cosine" => ProjectionMetric::Cosine,
            "euclidean" => ProjectionMetric::Euclidean,
            m => return Err(AppError::Config(format!("unknown projection metric {m:?}"))),
        };
        let noise_level = match self.inversion.noise_level.as_str() {
            "sampled" => NoiseLevel::Sampled,
            "terminal" => NoiseLevel::Terminal,
            m => return Err(AppError::Config(format!("unknown noise level {m:?}"))),
        };
        let c = InversionConfig {
            num_tokens: self.inversion.num_tokens,
            steps: self.inversion.steps,
            step_size: self.inversion.step_size,
            timestep_dist: self.timestep()?,
            seed: self.seed,
            metric,
            noise_level,
            project: self.inversion.project,
        };
        c.validate().map_err(|e| AppError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn centroid(&self) -> Result<CentroidConfig> {
        if self.centroid.samples == 0 {
            return Err(AppError::Config("centroid.samples must be at least 1".into()));
        }
        if !matches!(self.centroid.text.as_str(), "inverted" | "null") {
            return Err(AppError::Config(format!("unknown centroid text {:?}", self.centroid.text)));
        }
        Ok(CentroidConfig {
            samples: self.centroid.samples,
            seed: self.seed,
            dist: self.timestep()?,
            identical_draws: false,
        })
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        if let Some(a) = self.eval.augmentations.iter().find(|a| !AUGMENTATION_NAMES.contains(&a.as_str())) {
            return Err(AppError::Config(format!("unknown augmentation {a:?}")));
        }
        if self.eval.strengths.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(AppError::Config("eval strengths must lie in (0, 1]".into()));
        }
        Ok(EvalConfig {
            strengths: self.eval.strengths.clone(),
            seeds: self.eval.seeds.clone(),
            steps: self.eval.steps,
        })
    }

    /// Checks every section.
    pub fn validate(&self) -> Result<()> {
        self.budget()?;
        self.inversion()?;
        self.centroid()?;
        self.eval()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions() {
        assert_eq!(parse_fraction("12/255").unwrap(), 12.0 / 255.0);
        assert_eq!(parse_fraction(" 0.5 ").unwrap(), 0.5);
        assert!(parse_fraction("1/0").is_err());
        assert!(parse_fraction("x").is_err());
    }

    #[test]
    fn file_overrides_defaults_and_rejects_unknown_keys() {
        let c = RunConfig::from_toml("seed = 3\n[budget]\nepsilon = \"8/255\"\niterations = 10\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.budget.epsilon.0, 8.0 / 255.0);
        assert_eq!(c.budget.step_size.0, 3.0 / 255.0);
        assert_eq!(c.budget().unwrap().iterations, 10);
        assert!(matches!(RunConfig::from_toml("[budget]\nepsilonn = 1\n"), Err(AppError::Config(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn semantic_validation() {
        let mut c = RunConfig::default();
        c.budget.step_size = Fraction(1.0);
        assert!(c.budget().is_err());
        let mut c = RunConfig::default();
        c.eval.augmentations = vec!["blur".into()];
        assert!(c.eval().is_err());
    }
}
