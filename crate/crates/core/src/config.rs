//! Pipeline configuration: one TOML tree with a section per stage and two
//! built-in profiles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::ControlConfig;
use crate::datagen::GenConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::io_util::sha256_hex;
use crate::policy::Variant;
use crate::sim::{SuccessTolerance, TaskKind, WorldConfig};
use crate::skilldb::Metric;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    PaperScale,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper-scale" => Ok(Profile::PaperScale),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected desk or paper-scale)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub radius: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub variants: Vec<Variant>,
    pub epochs: usize,
    pub finetune_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VizSection {
    /// Every `stride`-th skill vector of each demonstration is projected.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub success: SuccessTolerance,
    pub datagen: GenConfig,
    pub encoder: EncoderConfig,
    pub retrieval: RetrievalSection,
    pub policy: PolicySection,
    pub control: ControlConfig,
    pub eval: EvalSection,
    pub viz: VizSection,
}

impl PipelineConfig {
    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Desk => PipelineConfig {
                seed: 0,
                world: WorldConfig::default(),
                success: SuccessTolerance::default(),
                datagen: GenConfig::default(),
                encoder: EncoderConfig::desk(),
                retrieval: RetrievalSection { k: 10, radius: 1 },
                policy: PolicySection {
                    variants: vec![Variant::Ours, Variant::TargetOnly],
                    epochs: 50,
                    finetune_epochs: 10,
                },
                control: ControlConfig::default(),
                eval: EvalSection { n_episodes: 30 },
                viz: VizSection { stride: 5 },
            },
            Profile::PaperScale => PipelineConfig {
                seed: 0,
                world: WorldConfig::default(),
                success: SuccessTolerance::default(),
                datagen: GenConfig {
                    per_policy_count: 2500,
                    n_agents_list: vec![2, 3, 4],
                    ..GenConfig::default()
                },
                encoder: EncoderConfig::default(),
                retrieval: RetrievalSection { k: 10, radius: 1 },
                policy: PolicySection {
                    variants: Variant::ALL.to_vec(),
                    epochs: 50,
                    finetune_epochs: 10,
                },
                control: ControlConfig::default(),
                eval: EvalSection { n_episodes: 70 },
                viz: VizSection { stride: 5 },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.datagen.validate()?;
        self.encoder.validate()?;
        self.control.validate()?;
        if self.retrieval.k == 0 {
            return Err(Error::Config("retrieval.k must be >= 1".into()));
        }
        if self.policy.variants.is_empty() || self.policy.epochs == 0 {
            return Err(Error::Config("policy.variants must be non-empty and policy.epochs >= 1".into()));
        }
        if self.eval.n_episodes == 0 || self.viz.stride == 0 {
            return Err(Error::Config("eval.n_episodes and viz.stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        PipelineConfig::from_toml(&text)
    }

    /// Canonical JSON (sorted keys) of the whole config.
    pub fn canonical(&self) -> Result<serde_json::Value> {
        // serde_json maps are ordered by key, so re-parsing canonicalizes
        Ok(serde_json::to_value(self)?)
    }

    /// SHA-256 over the canonical form; independent of key order in the file.
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&self.canonical()?)?.as_bytes()))
    }

    /// Hash over only the named top-level sections.
    pub fn section_hash(&self, sections: &[&str]) -> Result<String> {
        let all = self.canonical()?;
        let mut picked = serde_json::Map::new();
        for s in sections {
            let v = all
                .get(*s)
                .ok_or_else(|| Error::Config(format!("no config section {s}")))?;
            picked.insert((*s).to_string(), v.clone());
        }
        Ok(sha256_hex(serde_json::to_string(&picked)?.as_bytes()))
    }

    /// Every target task family: each agent count crossed with each task.
    pub fn tasks(&self) -> Vec<TaskKind> {
        let mut out = Vec::new();
        for &n in &self.datagen.n_agents_list {
            for t in &self.datagen.tasks {
                out.push(TaskKind::new(n, t.shape, t.difficulty));
            }
        }
        out
    }

    /// Prior demonstrations generated per agent count.
    pub fn prior_count_per_n(&self) -> usize {
        self.datagen.per_policy_count * self.datagen.tiers.len() * self.datagen.tasks.len()
    }

    pub fn metric_for(&self, v: Variant) -> Metric {
        if v == Variant::Euclidean {
            Metric::Euclidean
        } else {
            Metric::Cosine
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip_through_toml() {
        for p in [Profile::Desk, Profile::PaperScale] {
            let cfg = PipelineConfig::profile(p);
            cfg.validate().unwrap();
            let text = cfg.to_toml().unwrap();
            let back = PipelineConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.config_hash().unwrap(), cfg.config_hash().unwrap());
        }
    }

    #[test]
    fn paper_scale_generates_thirty_thousand_per_agent_count() {
        let cfg = PipelineConfig::profile(Profile::PaperScale);
        assert_eq!(cfg.prior_count_per_n(), 30_000);
        assert_eq!(cfg.tasks().len(), 12);
        assert_eq!(cfg.eval.n_episodes, 70);
        let desk = PipelineConfig::profile(Profile::Desk);
        assert_eq!(desk.prior_count_per_n(), 600);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = PipelineConfig::profile(Profile::Desk).to_toml().unwrap();
        text.push_str("\n[extra]\nfoo = 1\n");
        assert!(matches!(PipelineConfig::from_toml(&text), Err(Error::Config(_))));
        let text = PipelineConfig::profile(Profile::Desk)
            .to_toml()
            .unwrap()
            .replace("[eval]\n", "[eval]\nbogus = 3\n");
        assert!(matches!(PipelineConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_key_order() {
        let cfg = PipelineConfig::profile(Profile::Desk);
        let text = cfg.to_toml().unwrap();
        // move the scalar seed into a reordered table layout
        let mut doc: toml::Table = toml::from_str(&text).unwrap();
        let eval = doc.remove("eval").unwrap();
        let seed = doc.remove("seed").unwrap();
        let mut reordered = toml::Table::new();
        reordered.insert("seed".into(), seed);
        reordered.insert("eval".into(), eval);
        for (k, v) in doc.into_iter().rev() {
            reordered.insert(k, v);
        }
        let other = PipelineConfig::from_toml(&toml::to_string(&reordered).unwrap()).unwrap();
        assert_eq!(other.config_hash().unwrap(), cfg.config_hash().unwrap());
        let mut changed = cfg.clone();
        changed.eval.n_episodes += 1;
        assert_ne!(changed.config_hash().unwrap(), cfg.config_hash().unwrap());
        assert_eq!(
            changed.section_hash(&["datagen"]).unwrap(),
            cfg.section_hash(&["datagen"]).unwrap()
        );
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = PipelineConfig::profile(Profile::Desk);
        cfg.retrieval.k = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!("huge".parse::<Profile>().is_err());
        assert_eq!("paper-scale".parse::<Profile>().unwrap(), Profile::PaperScale);
    }
}
