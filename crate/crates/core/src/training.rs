//! The training loop: fresh examples from a seeded stream, one optimizer
//! step per batch, and a validation pass every `eval_every` examples that
//! feeds the density annealing controller.

use serde::{Deserialize, Serialize};

use crate::annealing::{AnnealConfig, AnnealEvent, AnnealState};
use crate::datagen::{generate, DomainSpec, Sample};
use crate::engine::{Adam, AdamConfig, Tensor};
use crate::error::{Error, Result};
use crate::models::{Batch, Model, ModelConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub domain: DomainSpec,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub anneal: AnnealConfig,
    /// Seed of the training stream; also seeds weight initialisation.
    pub seed: i64,
    pub validation_seed: i64,
    pub validation_size: usize,
    /// Training examples to consume.
    pub budget: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let domain = DomainSpec::default();
        let anneal = AnnealConfig {
            delta_min: 1.1 * domain.min_density(),
            ..AnnealConfig::default()
        };
        Self {
            domain,
            model: ModelConfig::default(),
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            anneal,
            seed: 1,
            validation_seed: -1,
            validation_size: 1000,
            budget: 300_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.model.validate()?;
        self.anneal.validate()?;
        if self.seed == self.validation_seed {
            return Err(Error::InvalidArgument("training and validation seeds must differ".into()));
        }
        if self.validation_size == 0 || self.budget == 0 {
            return Err(Error::InvalidArgument("validation size and budget must be positive".into()));
        }
        if self.model.image_size != self.domain.size
            || self.model.alphabet != self.domain.glyphs
            || self.model.max_len < self.domain.max_count
        {
            return Err(Error::InvalidArgument("model config does not fit the domain".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn new_model(&self) -> Result<Model> {
        Model::new(self.model.clone(), self.seed as u64)
    }

    pub fn new_optimizer(&self, model: &Model) -> Adam {
        Adam::new(self.optimizer, &model.store.shapes())
    }
}

/// Held-out images with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub images: Tensor<f32>,
    pub samples: Vec<Sample>,
}

impl EvalSet {
    pub fn generate(spec: &DomainSpec, seed: i64, count: usize) -> Result<Self> {
        Self::from_samples(generate(spec, seed, 0, count)?)
    }

    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty evaluation set".into()))?;
        let mut dims = vec![samples.len()];
        dims.extend_from_slice(first.input.shape());
        let mut data = Vec::with_capacity(samples.len() * first.input.len());
        for s in &samples {
            data.extend_from_slice(s.input.data());
        }
        Ok(Self {
            images: Tensor::new(dims, data)?,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Exact sequence match rate and bottleneck density on `set`.
pub fn exact_match(model: &mut Model, set: &EvalSet) -> Result<(f64, f64)> {
    let out = model.infer(&set.images)?;
    let hits = out
        .decoded
        .iter()
        .zip(&set.samples)
        .filter(|(d, s)| **d == s.label)
        .count();
    Ok((hits as f64 / set.len() as f64, out.motifs.density()))
}

/// What the observer sees after each validation pass.
pub struct Checkpointable<'a> {
    pub event: AnnealEvent,
    /// The density in force before this pass; it ends here when `reduces`.
    pub delta_before: Option<f64>,
    pub reduces: bool,
    pub density: f64,
    pub mean_loss: f64,
    pub final_pass: bool,
    pub model: &'a Model,
    pub adam: &'a Adam,
}

/// Runs `budget` further examples of the training stream, starting at the
/// controller's current example count.
///
/// The observer is called after every validation pass, before the density
/// is reduced, and once more at the end of the budget if that does not fall
/// on a validation boundary.
pub fn run(
    model: &mut Model,
    adam: &mut Adam,
    anneal: &mut AnnealState,
    spec: &DomainSpec,
    seed: i64,
    validation: &EvalSet,
    budget: u64,
    mut observer: impl FnMut(&Checkpointable<'_>) -> Result<()>,
) -> Result<()> {
    let b = anneal.config.batch_size;
    if !budget.is_multiple_of(b as u64) {
        return Err(Error::InvalidArgument(format!(
            "budget {budget} is not a multiple of the batch size {b}"
        )));
    }
    let end = anneal.examples() + budget;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    while anneal.examples() < end {
        let samples = generate(spec, seed, anneal.examples(), b)?;
        let batch = Batch::new(&samples, model.config.max_len, model.config.blank())?;
        let stats = model.train_step(&batch, adam)?;
        loss_sum += stats.loss;
        loss_count += 1;
        let due = anneal.advance();
        let last = anneal.examples() >= end;
        if !due && !last {
            continue;
        }
        let (accuracy, density) = exact_match(model, validation)?;
        let delta_before = model.sparsity.as_ref().map(|s| s.delta());
        let reduces = due && delta_before.is_some_and(|d| anneal.would_reduce(accuracy, d));
        let event = if due {
            anneal.record(accuracy, model.sparsity.as_mut())?
        } else {
            AnnealEvent {
                examples: anneal.examples(),
                accuracy,
                target: anneal.target(),
                delta: delta_before.unwrap_or(1.0),
            }
        };
        // Report the pre-reduction state so the model matches its density.
        let restore = reduces.then(|| model.sparsity.as_ref().map(|s| s.delta())).flatten();
        if let (Some(d), Some(sp)) = (delta_before, model.sparsity.as_mut()) {
            sp.set_delta(d)?;
        }
        let view = Checkpointable {
            event,
            delta_before,
            reduces,
            density,
            mean_loss: loss_sum / loss_count.max(1) as f64,
            final_pass: last,
            model,
            adam,
        };
        let observed = observer(&view);
        if let (Some(d), Some(sp)) = (restore, model.sparsity.as_mut()) {
            sp.set_delta(d)?;
        }
        observed?;
        loss_sum = 0.0;
        loss_count = 0;
    }
    Ok(())
}

/// Everything a finished run leaves behind.
pub struct Trained {
    pub model: Model,
    pub adam: Adam,
    pub anneal: AnnealState,
}

/// Trains a fresh model under `config`.
pub fn train(
    config: &TrainConfig,
    observer: impl FnMut(&Checkpointable<'_>) -> Result<()>,
) -> Result<Trained> {
    config.validate()?;
    let mut model = config.new_model()?;
    let mut adam = config.new_optimizer(&model);
    let mut anneal = AnnealState::new(config.anneal)?;
    let validation = EvalSet::generate(&config.domain, config.validation_seed, config.validation_size)?;
    run(
        &mut model,
        &mut adam,
        &mut anneal,
        &config.domain,
        config.seed,
        &validation,
        config.budget,
        observer,
    )?;
    Ok(Trained { model, adam, anneal })
}

/// Removes the thresholds of a trained sparsity model, freezes its encoder
/// and fine-tunes the decoder for `budget` examples of the training stream
/// (continuing where the original run stopped).
pub fn retrain_head(
    config: &TrainConfig,
    model: &mut Model,
    examples_seen: u64,
    budget: u64,
    observer: impl FnMut(&Checkpointable<'_>) -> Result<()>,
) -> Result<AnnealState> {
    model.retrain_head()?;
    let mut adam = config.new_optimizer(model);
    let mut anneal = AnnealState::new(AnnealConfig {
        enabled: false,
        ..config.anneal
    })?;
    // Skip the part of the stream the model was trained on.
    for _ in 0..examples_seen / config.anneal.batch_size as u64 {
        anneal.advance();
    }
    let validation = EvalSet::generate(&config.domain, config.validation_seed, config.validation_size)?;
    run(
        model,
        &mut adam,
        &mut anneal,
        &config.domain,
        config.seed,
        &validation,
        budget,
        observer,
    )?;
    Ok(anneal)
}
