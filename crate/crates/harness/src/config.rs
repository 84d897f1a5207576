use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sparling::annealing::AnnealConfig;
use sparling::datagen::DomainSpec;
use sparling::engine::AdamConfig;
use sparling::models::{BottleneckKind, ModelConfig};
use sparling::training::TrainConfig;

/// Everything that determines a run. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub anneal: AnnealConfig,
    /// Training stream seed (1 to 9 by convention).
    pub seed: i64,
    pub validation_seed: i64,
    pub validation_size: usize,
    pub test_seed: i64,
    pub test_size: usize,
    /// Training examples per run.
    pub budget: u64,
    /// Decoder fine-tuning examples after the bottleneck is removed.
    pub retrain_budget: u64,
    /// Bits per nonzero activation used for the entropy bound.
    pub eta: f64,
    /// Floor for annealing, as a multiple of the domain's minimum density.
    /// Overrides `anneal.delta_min` when set.
    pub delta_floor_factor: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            domain: t.domain,
            model: t.model,
            optimizer: t.optimizer,
            anneal: t.anneal,
            seed: t.seed,
            validation_seed: t.validation_seed,
            validation_size: t.validation_size,
            test_seed: -2,
            test_size: 1000,
            budget: t.budget,
            retrain_budget: 100_000,
            eta: 4.0,
            delta_floor_factor: Some(1.1),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(sparling::Error::from)
            .with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut anneal = self.anneal;
        if let Some(f) = self.delta_floor_factor {
            anneal.delta_min = f * self.domain.min_density();
        }
        if !matches!(self.model.bottleneck, BottleneckKind::Sparling { .. }) {
            anneal.enabled = false;
        }
        TrainConfig {
            domain: self.domain.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer,
            anneal,
            seed: self.seed,
            validation_seed: self.validation_seed,
            validation_size: self.validation_size,
            budget: self.budget,
        }
    }

    pub fn validate(&self) -> Result<(), sparling::Error> {
        self.train_config().validate()?;
        let reserved = [self.validation_seed, self.test_seed];
        if reserved.contains(&self.seed) || self.validation_seed == self.test_seed {
            return Err(sparling::Error::InvalidArgument(
                "training, validation and test seeds must all differ".into(),
            ));
        }
        if self.test_size == 0 {
            return Err(sparling::Error::InvalidArgument("test size must be positive".into()));
        }
        if !self.retrain_budget.is_multiple_of(self.anneal.batch_size as u64) {
            return Err(sparling::Error::InvalidArgument(
                "retrain budget must be a multiple of the batch size".into(),
            ));
        }
        Ok(())
    }

    /// The same configuration with a different training seed.
    pub fn with_seed(&self, seed: i64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// The configuration with everything but the seed, for comparing runs.
    pub fn without_seed(&self) -> Self {
        Self { seed: 0, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 3, "budget": 1000}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.budget, 1000);
        assert_eq!(cfg.model, ModelConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
    }

    #[test]
    fn reserved_seeds_rejected() {
        assert!(RunConfig::default().with_seed(-2).validate().is_err());
        assert!(RunConfig::default().with_seed(-1).validate().is_err());
    }

    #[test]
    fn floor_follows_domain() {
        let t = RunConfig::default().train_config();
        assert!((t.anneal.delta_min - 1.1 * 3.0 / 4096.0).abs() < 1e-15);
    }
}
