//! Run configuration: one JSON file drives the whole pipeline. Every stage
//! derives its randomness from the single top-level seed through fixed tags,
//! and every artifact embeds the hash of the effective configuration so
//! downstream commands can verify provenance.
//!
//! Sub-seed tags: `prototypes`, `train`, `test` (dataset generation, consumed
//! through the dataset seed `derive(seed, "data")`), `init` (model
//! initialization), `random-layer` (the random-layer strategy).

use crate::data::ConceptSpec;
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::rng::{fnv1a64, Rng};
use crate::selection::SelectionStrategy;
use crate::train::PretrainConfig;
use crate::unlearn::BaselineConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub concepts: u32,
    pub train_per_concept: usize,
    pub test_per_concept: usize,
    pub vision_dim: usize,
    pub text_dim: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let spec = ConceptSpec::default();
        DatasetConfig {
            concepts: spec.concepts,
            train_per_concept: spec.train_per_concept,
            test_per_concept: spec.test_per_concept,
            vision_dim: spec.vision_dim,
            text_dim: spec.text_dim,
            noise_sigma: spec.noise_sigma,
        }
    }
}

impl DatasetConfig {
    /// Dataset spec with the stage-derived seed filled in.
    pub fn to_spec(&self, run_seed: u64) -> ConceptSpec {
        ConceptSpec {
            concepts: self.concepts,
            train_per_concept: self.train_per_concept,
            test_per_concept: self.test_per_concept,
            vision_dim: self.vision_dim,
            text_dim: self.text_dim,
            noise_sigma: self.noise_sigma,
            seed: Rng::derive(run_seed, "data"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Pareto,
    ImportanceOnly,
    AlignmentOnly,
    RandomLayer,
    AllPareto,
    AllLayers,
    DistributedWeights,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pareto" => StrategyKind::Pareto,
            "importance_only" => StrategyKind::ImportanceOnly,
            "alignment_only" => StrategyKind::AlignmentOnly,
            "random_layer" => StrategyKind::RandomLayer,
            "all_pareto" => StrategyKind::AllPareto,
            "all_layers" => StrategyKind::AllLayers,
            "distributed_weights" => StrategyKind::DistributedWeights,
            other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnSection {
    /// Binary-search steps S.
    pub search_steps: usize,
    /// Share of the test pool used by the search evaluator.
    pub validation_fraction: f64,
    pub strategy: StrategyKind,
    /// Top fraction for the distributed-weights strategy.
    pub distributed_top_fraction: f64,
    pub target_concepts: Vec<u32>,
    /// Top-k used for the search's forget accuracy (1 or 5).
    pub search_top_k: usize,
}

impl Default for UnlearnSection {
    fn default() -> Self {
        UnlearnSection {
            search_steps: 10,
            validation_fraction: 0.05,
            strategy: StrategyKind::Pareto,
            distributed_top_fraction: 0.5,
            target_concepts: vec![3],
            search_top_k: 1,
        }
    }
}

impl UnlearnSection {
    pub fn resolve_strategy(&self, run_seed: u64) -> SelectionStrategy {
        match self.strategy {
            StrategyKind::Pareto => SelectionStrategy::Pareto,
            StrategyKind::ImportanceOnly => SelectionStrategy::ImportanceOnly,
            StrategyKind::AlignmentOnly => SelectionStrategy::AlignmentOnly,
            StrategyKind::RandomLayer => SelectionStrategy::RandomLayer {
                seed: Rng::derive(run_seed, "random-layer"),
            },
            StrategyKind::AllPareto => SelectionStrategy::AllPareto,
            StrategyKind::AllLayers => SelectionStrategy::AllLayers,
            StrategyKind::DistributedWeights => SelectionStrategy::DistributedWeights {
                top_fraction: self.distributed_top_fraction,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: String,
    pub dataset: DatasetConfig,
    pub architecture: Architecture,
    pub pretrain: PretrainConfig,
    pub unlearn: UnlearnSection,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out_dir: "runs/default".to_string(),
            dataset: DatasetConfig::default(),
            architecture: Architecture::default(),
            pretrain: PretrainConfig::default(),
            unlearn: UnlearnSection::default(),
            baseline: BaselineConfig {
                method: crate::unlearn::BaselineMethod::Ga,
                learning_rate: 0.05,
                iterations: 10,
                alpha: 1.0,
            },
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.to_spec(self.seed).validate()?;
        self.architecture.validate()?;
        if self.architecture.vision_dims[0] != self.dataset.vision_dim
            || self.architecture.text_dims[0] != self.dataset.text_dim
        {
            return Err(Error::Config(
                "architecture input dims must match dataset dims".into(),
            ));
        }
        if self.unlearn.search_steps == 0 {
            return Err(Error::Config("search_steps must be >= 1".into()));
        }
        if !(self.unlearn.validation_fraction > 0.0 && self.unlearn.validation_fraction <= 1.0) {
            return Err(Error::Config(
                "validation_fraction must be in (0, 1]".into(),
            ));
        }
        if self.unlearn.target_concepts.is_empty() {
            return Err(Error::Config("target_concepts must be non-empty".into()));
        }
        for &t in &self.unlearn.target_concepts {
            if t >= self.dataset.concepts {
                return Err(Error::Config(format!("target concept {t} out of range")));
            }
        }
        if !(self.unlearn.search_top_k == 1 || self.unlearn.search_top_k == 5) {
            return Err(Error::Config("search_top_k must be 1 or 5".into()));
        }
        self.unlearn.resolve_strategy(self.seed).validate()?;
        self.baseline.validate()?;
        if self.pretrain.epochs == 0 {
            return Err(Error::Config("pretrain epochs must be >= 1".into()));
        }
        if self.pretrain.learning_rate <= 0.0 || !self.pretrain.learning_rate.is_finite() {
            return Err(Error::Config("pretrain learning rate must be > 0".into()));
        }
        Ok(())
    }

    /// Hash of the effective configuration (canonical JSON serialization with
    /// the output directory cleared: where artifacts land does not change
    /// what they are). Embedded in every artifact for provenance checks.
    pub fn config_hash(&self) -> u64 {
        let mut semantic = self.clone();
        semantic.out_dir = String::new();
        fnv1a64(
            serde_json::to_string(&semantic)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn init_seed(&self) -> u64 {
        Rng::derive(self.seed, "init")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hash_stable() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.config_hash(), config.config_hash());
        let json = config.to_json();
        let reparsed = RunConfig::from_json(&json).unwrap();
        assert_eq!(reparsed, config);
        assert_eq!(reparsed.config_hash(), config.config_hash());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = RunConfig::default();
        let mut changed = base.clone();
        changed.unlearn.search_steps = 11;
        assert_ne!(base.config_hash(), changed.config_hash());
        let mut seeded = base.clone();
        seeded.seed = 43;
        assert_ne!(base.config_hash(), seeded.config_hash());
    }

    #[test]
    fn malformed_and_invalid_configs_rejected() {
        assert!(matches!(
            RunConfig::from_json("{ not json"),
            Err(Error::Config(_))
        ));
        let mut bad = RunConfig::default();
        bad.unlearn.target_concepts = vec![99];
        assert!(bad.validate().is_err());
        let mut bad = RunConfig::default();
        bad.unlearn.validation_fraction = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = RunConfig::default();
        bad.dataset.vision_dim = 16; // architecture mismatch
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let config = RunConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.unlearn.search_steps, 10);
        assert_eq!(config.unlearn.validation_fraction, 0.05);
    }
}
