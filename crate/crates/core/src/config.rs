//! One TOML file drives a whole run. Every knob has a default and
//! [`ExperimentConfig::template`] writes all of them out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contagion::GraphParams;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::failure::InterventionConfig;
use crate::policyprov::{ProbeFit, ScriptedGains, TrainHyper};
use crate::stage1::{ProbeConfig, ProfileSettings};
use crate::stage2::TracebackConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum PolicySource {
    /// Hand-built controllers with exact critics. Without `gains` the
    /// environment's defaults apply.
    Scripted {
        #[serde(default)]
        gains: Option<ScriptedGains>,
    },
    /// Trained in-process with the lightweight centralized trainer.
    TrainLite {
        #[serde(default)]
        hyper: TrainHyper,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum CriticSource {
    /// Whatever the policy source produced.
    Native,
    /// A probe critic fitted on the profile episodes.
    Probe { fit: ProbeFit },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub policy: PolicySource,
    pub critic: CriticSource,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: PolicySource::Scripted { gains: None },
            critic: CriticSource::Native,
        }
    }
}

impl PolicyConfig {
    /// Scripted controllers with the environment's default gains spelled
    /// out.
    pub fn scripted(env: &EnvConfig) -> Self {
        PolicyConfig {
            policy: PolicySource::Scripted {
                gains: Some(ScriptedGains::for_env(env)),
            },
            critic: CriticSource::Native,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    #[serde(flatten)]
    pub settings: ProfileSettings,
    /// Fault-free episodes rolled out to build the profile.
    pub profile_episodes: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            settings: ProfileSettings::default(),
            profile_episodes: 100,
        }
    }
}

/// Sustained attack used for the Patient-0 episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// First attacked step is drawn uniformly from `[start_min, start_max]`.
    pub start_min: usize,
    pub start_max: usize,
    pub length: usize,
    pub strength: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            start_min: 8,
            start_max: 12,
            length: 10,
            strength: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    /// Episodes with a sustained attack on a uniformly drawn source.
    pub attacked_episodes: usize,
    /// Held-out fault-free episodes for the false-positive rate.
    pub heldout_episodes: usize,
    /// Fault-free base episodes for paired interventions; 0 disables them.
    pub paired_episodes: usize,
    pub attack: AttackConfig,
    pub intervention: InterventionConfig,
    /// Write every variant episode of the paired study.
    pub log_variants: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 0,
            attacked_episodes: 200,
            heldout_episodes: 200,
            paired_episodes: 0,
            attack: AttackConfig::default(),
            intervention: InterventionConfig::default(),
            log_variants: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub policies: PolicyConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: TracebackConfig,
    #[serde(default)]
    pub contagion: GraphParams,
    #[serde(default)]
    pub experiment: RunConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let env = EnvConfig::chain(chain_coupling(4, 0.6));
        ExperimentConfig {
            policies: PolicyConfig::scripted(&env),
            env,
            probe: ProbeConfig::default(),
            stage1: Stage1Config::default(),
            stage2: TracebackConfig::default(),
            contagion: GraphParams::default(),
            experiment: RunConfig::default(),
        }
    }
}

/// `n×n` coupling with `weight` on the sub-diagonal.
pub fn chain_coupling(n: usize, weight: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|k| (0..n).map(|j| if j + 1 == k { weight } else { 0.0 }).collect())
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Default config with every field written out.
    pub fn template() -> String {
        Self::default().to_toml()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        self.env.validate()?;
        self.probe.validate()?;
        self.stage2.validate()?;
        self.contagion.omega.validate()?;
        if !(0.0..=1.0).contains(&self.contagion.tau) {
            return bad("contagion.tau must lie in [0, 1]");
        }
        if self.stage1.settings.k <= 0.0 {
            return bad("stage1.k must be positive");
        }
        let run = &self.experiment;
        let a = &run.attack;
        if a.start_min > a.start_max {
            return bad("experiment.attack.start_min exceeds start_max");
        }
        if a.length == 0 || a.start_max + a.length > self.env.horizon {
            return bad("experiment.attack window must fit inside the horizon");
        }
        if !(a.strength > 0.0 && a.strength <= 1.0) {
            return bad("experiment.attack.strength must lie in (0, 1]");
        }
        let iv = &run.intervention;
        if iv.attack_steps == 0 || !(iv.strength > 0.0 && iv.strength <= 1.0) {
            return bad("experiment.intervention needs attack_steps ≥ 1 and strength in (0, 1]");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_round_trips() {
        let text = ExperimentConfig::template();
        for section in [
            "[env]",
            "[policies",
            "[probe]",
            "[stage1]",
            "[stage2",
            "[contagion",
            "[experiment",
        ] {
            assert!(text.contains(section), "{section} missing from\n{text}");
        }
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.experiment.attack.start_max = 29;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        assert!(ExperimentConfig::from_toml("[env]\nenv_id = \"nowhere\"").is_err());
        let unknown = ExperimentConfig::template().replace("[experiment]", "[experiment]\nbogus = 1");
        assert!(ExperimentConfig::from_toml(&unknown).is_err());
    }

    #[test]
    fn sections_default_when_omitted() {
        let text = "[env]\nenv_id = \"spread\"\nlandmarks = 3\nn = 3\nhorizon = 25\ndt = 0.1\nworld_bounds = 1.0\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.env.n, 3);
        assert_eq!(cfg.stage2, TracebackConfig::default());
    }
}
