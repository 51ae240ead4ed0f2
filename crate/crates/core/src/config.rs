//! Run configuration, read from TOML.
//!
//! Every key is optional. Sections may be written as tables (`[sac]`) or as
//! dotted keys (`sac.gamma = 0.98`). Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::esac::EsacConfig;
use crate::sac_core::SacConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Esac,
    Es,
    Sac,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Esac => "esac",
            Algorithm::Es => "es",
            Algorithm::Sac => "sac",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "esac" => Ok(Algorithm::Esac),
            "es" => Ok(Algorithm::Es),
            "sac" => Ok(Algorithm::Sac),
            other => Err(Error::config(
                "algorithm",
                format!("unknown algorithm `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub hidden: Vec<usize>,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsSection {
    pub population: usize,
    pub sigma: f64,
    pub alpha: f64,
    pub winner_fraction: f64,
    pub episodes_per_offspring: usize,
}

impl Default for EsSection {
    fn default() -> Self {
        EsSection {
            population: 50,
            sigma: 5e-3,
            alpha: 5e-3,
            winner_fraction: 0.4,
            episodes_per_offspring: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmtSection {
    pub zeta: f64,
}

impl Default for AmtSection {
    fn default() -> Self {
        AmtSection { zeta: 5e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EsacSection {
    pub gradient_interval: u64,
    pub p_sac_initial: f64,
    pub p_sac_decay: f64,
    pub sac_episodes_per_phase: usize,
    pub crossover_swap_prob: f64,
}

impl Default for EsacSection {
    fn default() -> Self {
        EsacSection {
            gradient_interval: 10,
            p_sac_initial: 1.0,
            p_sac_decay: 0.8,
            sac_episodes_per_phase: 5,
            crossover_swap_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationSection {
    /// Generations between validations (episodes for `sac`).
    pub interval: u64,
    pub episodes: usize,
}

impl Default for ValidationSection {
    fn default() -> Self {
        ValidationSection {
            interval: 5,
            episodes: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub env: EnvKind,
    pub algorithm: Algorithm,
    pub seed: u64,
    /// Generation limit; for `sac`, the episode limit.
    pub generations: u64,
    /// Optional environment-step limit, applied in addition to `generations`.
    pub env_step_budget: Option<u64>,
    /// Stop once a validation reaches this return.
    pub target_return: Option<f64>,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub network: NetworkSection,
    pub es: EsSection,
    pub amt: AmtSection,
    pub esac: EsacSection,
    pub sac: SacConfig,
    pub validation: ValidationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvKind::Pendulum,
            algorithm: Algorithm::Esac,
            seed: 0,
            generations: 100,
            env_step_budget: None,
            target_return: None,
            workers: 1,
            out_dir: PathBuf::from("runs/default"),
            network: NetworkSection::default(),
            es: EsSection::default(),
            amt: AmtSection::default(),
            esac: EsacSection::default(),
            sac: SacConfig::default(),
            validation: ValidationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn esac_config(&self) -> EsacConfig {
        EsacConfig {
            population: self.es.population,
            winner_fraction: self.es.winner_fraction,
            sigma: self.es.sigma,
            alpha_es: self.es.alpha,
            zeta: self.amt.zeta,
            gradient_interval: self.esac.gradient_interval,
            p_sac_initial: self.esac.p_sac_initial,
            p_sac_decay: self.esac.p_sac_decay,
            sac_episodes_per_phase: self.esac.sac_episodes_per_phase,
            crossover_swap_prob: self.esac.crossover_swap_prob,
            episodes_per_offspring: self.es.episodes_per_offspring,
            hidden: self.network.hidden.clone(),
            sac: self.sac.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if self.validation.interval == 0 {
            return Err(Error::config("validation.interval", "must be at least 1"));
        }
        if self.validation.episodes == 0 {
            return Err(Error::config("validation.episodes", "must be at least 1"));
        }
        if let Some(t) = self.target_return {
            if !t.is_finite() {
                return Err(Error::config("target_return", "must be finite"));
            }
        }
        match self.algorithm {
            Algorithm::Sac => {
                if self.network.hidden.contains(&0) {
                    return Err(Error::config(
                        "network.hidden",
                        "layer sizes must be positive",
                    ));
                }
                self.sac.validate()
            }
            Algorithm::Es | Algorithm::Esac => self.esac_config().validate(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads, parses and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ConfigParse(format!("cannot read {}: {e}", path.display())))?;
    RunConfig::from_toml_str(&text)
}
