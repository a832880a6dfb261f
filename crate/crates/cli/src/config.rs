//! Run configuration (TOML). Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use frk_core::covpar::{PriorVariant, DEFAULT_TAPER};
use frk_core::family::{Family, Link};
use frk_core::predict::{DEFAULT_N_MC, DEFAULT_PERCENTILES};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: Paths,
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub predict: PredictSection,
    #[serde(default)]
    pub score: ScoreSection,
}

/// File locations. Relative paths are taken relative to the config file.
/// Unset inputs default to the files `simulate` writes into `output_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub output_dir: PathBuf,
    pub data: Option<PathBuf>,
    pub baus: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub regions: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { output_dir: PathBuf::from("."), data: None, baus: None, truth: None, regions: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub scenario: String,
    pub grid_size: Option<usize>,
    pub n_obs: Option<usize>,
    pub size: Option<f64>,
    pub n_times: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub family: String,
    /// Defaults to the usual link of the family.
    pub link: Option<String>,
    /// `tapered` (covariance), `leroux` (precision), `distance`, or `auto`.
    pub prior: String,
    pub n_res: usize,
    /// Temporal basis functions (spatio-temporal grids only).
    pub r_t: usize,
    pub taper_multiplier: f64,
    pub fs_by_spatial_bau: bool,
    pub known_sigma2fs: Option<f64>,
    /// `average` normalises incidence weights; `sum` does not.
    pub aggregation: String,
    pub fine_scale: bool,
    /// `linear` (intercept, x, y) or `intercept`.
    pub covariates: String,
    /// Parameter names held at their starting values.
    pub fixed: Vec<String>,
    pub max_iter: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: "gaussian".into(),
            link: None,
            prior: "auto".into(),
            n_res: 2,
            r_t: 4,
            taper_multiplier: DEFAULT_TAPER,
            fs_by_spatial_bau: false,
            known_sigma2fs: None,
            aggregation: "average".into(),
            fine_scale: true,
            covariates: "linear".into(),
            fixed: Vec::new(),
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSection {
    pub n_mc: usize,
    pub percentiles: Vec<f64>,
    /// Target whose sample matrix is written for scoring.
    pub samples: String,
    pub plots: bool,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            n_mc: DEFAULT_N_MC,
            percentiles: DEFAULT_PERCENTILES.to_vec(),
            samples: "mu".into(),
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    /// Column of the truth file compared with the sampled target.
    pub target: String,
    /// `unobserved` or `all`.
    pub subset: String,
    /// Restrict to one time bin.
    pub time: Option<usize>,
    pub label: Option<String>,
    /// Append a row to an existing scores file instead of replacing it.
    pub append: bool,
    /// Add the fit's elapsed seconds (breaks byte-for-byte reproducibility).
    pub wall_time: bool,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            target: "mu".into(),
            subset: "unobserved".into(),
            time: None,
            label: None,
            append: false,
            wall_time: false,
        }
    }
}

/// Model choices after validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedModel {
    pub family: Family,
    pub link: Link,
    pub variant: PriorVariant,
    pub normalise: bool,
    pub linear_trend: bool,
}

pub fn default_link(family: Family) -> Link {
    match family {
        Family::Gaussian => Link::Identity,
        Family::Binomial | Family::NegativeBinomial => Link::Logit,
        Family::Poisson | Family::Gamma | Family::InverseGaussian => Link::Log,
    }
}

impl ModelSection {
    pub fn resolve(&self) -> CliResult<ResolvedModel> {
        let family = Family::parse(&self.family).context("model.family")?;
        let link = match &self.link {
            Some(l) => Link::parse(l).context("model.link")?,
            None => default_link(family),
        };
        frk_core::family::check_combination(family, link).context("model.family/model.link")?;
        let variant = match self.prior.as_str() {
            "auto" if family == Family::Gaussian && link == Link::Identity => PriorVariant::KTapered,
            "auto" => PriorVariant::QLeroux,
            "tapered" | "covariance" => PriorVariant::KTapered,
            "leroux" | "precision" => PriorVariant::QLeroux,
            "distance" => PriorVariant::QDist,
            other => {
                return Err(CliError::Config(format!(
                    "model.prior: unknown prior `{other}` (expected auto, tapered, leroux or distance)"
                )))
            }
        };
        let normalise = match self.aggregation.as_str() {
            "average" => true,
            "sum" => false,
            other => return Err(CliError::Config(format!("model.aggregation: expected `average` or `sum`, got `{other}`"))),
        };
        let linear_trend = match self.covariates.as_str() {
            "linear" => true,
            "intercept" => false,
            other => {
                return Err(CliError::Config(format!("model.covariates: expected `linear` or `intercept`, got `{other}`")))
            }
        };
        if self.n_res == 0 {
            return Err(CliError::Config("model.n_res: must be at least 1".into()));
        }
        if let Some(v) = self.known_sigma2fs {
            if !(v >= 0.0) {
                return Err(CliError::Config(format!("model.known_sigma2fs: {v} must be non-negative")));
            }
        }
        Ok(ResolvedModel { family, link, variant, normalise, linear_trend })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Reads a config file and makes its relative paths absolute.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.rebase(base);
        Ok(cfg)
    }

    pub fn require_seed(&self) -> CliResult<u64> {
        self.seed.ok_or_else(|| CliError::Config("seed: required for this command".into()))
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for p in [&mut self.data, &mut self.baus, &mut self.truth, &mut self.regions].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn data(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.output_dir.join("data.csv"))
    }

    pub fn baus(&self) -> PathBuf {
        self.baus.clone().unwrap_or_else(|| self.output_dir.join("baus.toml"))
    }

    pub fn truth(&self) -> PathBuf {
        self.truth.clone().unwrap_or_else(|| self.output_dir.join("truth.csv"))
    }

    pub fn fit_state(&self) -> PathBuf {
        self.output_dir.join("fit_state.bin")
    }

    pub fn fit_report(&self) -> PathBuf {
        self.output_dir.join("fit_report.json")
    }

    pub fn predictions(&self) -> PathBuf {
        self.output_dir.join("predictions.csv")
    }

    pub fn samples(&self) -> PathBuf {
        self.output_dir.join("samples.bin")
    }

    pub fn scores(&self) -> PathBuf {
        self.output_dir.join("scores.csv")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("seed = 1\n[model]\nfamly = \"poisson\"\n").unwrap_err();
        assert!(err.to_string().contains("famly"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::parse("seed = 3\n[model]\nfamily = \"poisson\"\n").unwrap();
        let m = cfg.model.resolve().unwrap();
        assert_eq!(m.link, Link::Log);
        assert_eq!(m.variant, PriorVariant::QLeroux);
        assert!(m.normalise);
        assert_eq!(cfg.predict.n_mc, DEFAULT_N_MC);
        assert_eq!(cfg.predict.percentiles, vec![5.0, 95.0]);
    }

    #[test]
    fn forbidden_pair_names_the_keys() {
        let cfg = RunConfig::parse("[model]\nfamily = \"binomial\"\nlink = \"log\"\n").unwrap();
        let err = cfg.model.resolve().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.family/model.link") && msg.contains("compatibility table"), "{msg}");
    }

    #[test]
    fn seed_is_required_when_asked() {
        let cfg = RunConfig::parse("").unwrap();
        assert!(cfg.require_seed().unwrap_err().to_string().starts_with("seed"));
    }
}
