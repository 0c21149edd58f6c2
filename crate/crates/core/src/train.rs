//! Plain gradient-descent training and accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::model::{LanguageModel, LogitModel};
use crate::rng::derive_seed;
use crate::task::{gen_batch, TaskSpec};
use crate::tensor::ParamSet;

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const MONITOR_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;

fn default_eval_batches() -> usize {
    8
}

fn default_eval_batch_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_every: usize,
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_batches == 0 || self.eval_batch_size == 0 {
            return Err(GamError::Config(
                "batch_size, eval_every, eval_batches and eval_batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(GamError::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Seed for parameter initialization.
    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, INIT_STREAM, 0)
    }

    /// Seed of the held-out evaluation stream.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.seed, EVAL_STREAM, 0)
    }
}

/// One record of the metric stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub step: usize,
    /// Mean cross-entropy on a fixed batch drawn from the training distribution.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<Metric>,
    pub params: ParamSet,
}

impl TrainOutcome {
    pub fn final_metric(&self) -> Metric {
        *self.metrics.last().expect("training always records a final metric")
    }
}

/// Fraction of positions whose argmax logit is the target, over `batches`
/// batches seeded from `seed`.
pub fn evaluate(
    model: &dyn LogitModel,
    task: &TaskSpec,
    seed: u64,
    batches: usize,
    batch_size: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for b in 0..batches {
        for ex in gen_batch(task, derive_seed(seed, 0, b as u64), batch_size)? {
            let logits = model.logits(&ex.tokens)?;
            for (r, &target) in ex.targets.iter().enumerate() {
                let row = logits.row(r);
                // first maximum wins
                let best = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
                hits += (best == target) as usize;
                total += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Trains freshly initialized parameters.
pub fn train(model: &LanguageModel, task: &TaskSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    let params = model.init_params(config.init_seed())?;
    train_from(model, task, config, params)
}

/// `params ← params − lr · ∇loss` for `config.steps` steps, with metrics at
/// step 0, every `eval_every` steps and after the last step.
pub fn train_from(
    model: &LanguageModel,
    task: &TaskSpec,
    config: &TrainConfig,
    mut params: ParamSet,
) -> Result<TrainOutcome> {
    config.validate()?;
    task.validate()?;
    model.check_params(&params)?;
    if task.vocab() != model.vocab {
        return Err(GamError::Config(format!(
            "task vocabulary {} differs from model vocabulary {}",
            task.vocab(),
            model.vocab
        )));
    }
    let monitor = gen_batch(task, derive_seed(config.seed, MONITOR_STREAM, 0), config.batch_size)?;
    let record = |step: usize, params: &ParamSet| -> Result<Metric> {
        let loss = model.loss(params, &monitor)?;
        if !loss.is_finite() {
            return Err(GamError::Diverged { step, loss, param_norm: params.global_norm() });
        }
        let accuracy = evaluate(
            &model.with(params),
            task,
            config.eval_seed(),
            config.eval_batches,
            config.eval_batch_size,
        )?;
        Ok(Metric { step, loss, accuracy })
    };

    let mut metrics = Vec::new();
    for step in 0..config.steps {
        if step % config.eval_every == 0 {
            metrics.push(record(step, &params)?);
        }
        let batch = gen_batch(task, derive_seed(config.seed, TRAIN_STREAM, step as u64), config.batch_size)?;
        let grad = model.loss_and_grad(&params, &batch).map_err(|e| match e {
            GamError::NonFinite(_) => GamError::Diverged {
                step,
                loss: f64::NAN,
                param_norm: params.global_norm(),
            },
            other => other,
        })?;
        if !grad.loss.is_finite() {
            return Err(GamError::Diverged { step, loss: grad.loss, param_norm: params.global_norm() });
        }
        for ((_, p), (_, g)) in params.iter_mut().zip(grad.grads.iter()) {
            p.add_scaled_assign(g, -config.learning_rate);
        }
    }
    metrics.push(record(config.steps, &params)?);
    Ok(TrainOutcome { metrics, params })
}
