use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{generate_dataset, Dataset, SyntheticDatasetSpec};
use super::optim::{Adam, AdamConfig};
use crate::costmodel::model_cost;
use crate::error::{Error, Result};
use crate::vit::{accuracy, cross_entropy, Model, ModelConfig};

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub model: ModelConfig,
    pub dataset: SyntheticDatasetSpec,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_fraction: f64,
    /// Evaluate every this many steps (and always after the last one).
    pub eval_every: usize,
    /// Train only the classifier head (toy linear probe).
    pub head_only: bool,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            dataset: SyntheticDatasetSpec::default(),
            optimizer: AdamConfig::default(),
            batch_size: 64,
            steps: 2000,
            seed: 0,
            eval_fraction: 0.2,
            eval_every: 250,
            head_only: false,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        self.optimizer.validate()?;
        if self.steps < 1 || self.batch_size < 1 || self.eval_every < 1 {
            return Err(Error::config("steps, batch_size and eval_every must be at least 1"));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::config("eval_fraction must be in (0, 1)"));
        }
        if self.dataset.image_size != self.model.image_size
            || self.dataset.channels != self.model.channels
            || self.dataset.num_classes != self.model.num_classes
        {
            return Err(Error::config(
                "dataset image_size/channels/num_classes must match the model",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

/// Result of a run. Serializes deterministically; wall-clock time is kept
/// out of the serialized form so identical runs produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub spec: TrainSpec,
    pub seed: u64,
    pub status: RunStatus,
    /// Per-step training loss.
    pub loss_curve: Vec<f32>,
    pub evals: Vec<EvalPoint>,
    pub final_eval_accuracy: f64,
    /// Analytic forward FLOPs per image.
    pub flops_forward: u64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Equality over the serialized content; wall-clock time is ignored.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.seed == other.seed
            && self.status == other.status
            && self.loss_curve == other.loss_curve
            && self.evals == other.evals
            && self.final_eval_accuracy == other.final_eval_accuracy
            && self.flops_forward == other.flops_forward
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Model<f32>,
}

/// Accuracy over all of `indices`, in chunks.
pub fn evaluate(model: &Model<f32>, data: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut correct = 0.0;
    for chunk in indices.chunks(128) {
        let (images, labels) = data.batch(chunk);
        let logits = model.forward(&images)?;
        correct += accuracy(&logits, &labels) * chunk.len() as f64;
    }
    Ok(correct / indices.len().max(1) as f64)
}

/// Held-out tail of the (already shuffled) dataset is the eval split.
fn split(n: usize, eval_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
    ((0..n - n_eval).collect(), (n - n_eval..n).collect())
}

/// Trains a freshly initialized model from `spec`.
pub fn train(spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let model = Model::init(spec.model.clone(), &mut rng)?;
    train_model(model, spec)
}

/// Continues training `model` under `spec` (used for finetuning at a new
/// resolution). The model config must match `spec.model`.
pub fn train_model(mut model: Model<f32>, spec: &TrainSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    if model.config != spec.model {
        return Err(Error::config("model does not match the training spec"));
    }
    let started = Instant::now();
    let data = generate_dataset(&spec.dataset)?;
    let (train_idx, eval_idx) = split(data.len(), spec.eval_fraction);
    let probe_idx: Vec<usize> = train_idx.iter().copied().take(eval_idx.len()).collect();

    // Separate stream from initialization so batch order is stable across configs.
    let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_ba7c4);
    let mut order = train_idx.clone();
    order.shuffle(&mut order_rng);
    let mut cursor = 0;

    let mut adam = Adam::new(spec.optimizer.clone(), &model.params);
    let trainable = |name: &str| !spec.head_only || name.starts_with("head/");
    let mut loss_curve = Vec::with_capacity(spec.steps);
    let mut evals = Vec::new();
    let mut status = RunStatus::Completed;
    let mut batch_idx = Vec::with_capacity(spec.batch_size);

    for step in 0..spec.steps {
        batch_idx.clear();
        while batch_idx.len() < spec.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let (images, labels) = data.batch(&batch_idx);
        let (logits, cache) = match model.forward_cached(&images) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                status = RunStatus::Diverged { step };
                break;
            }
            Err(e) => return Err(e),
        };
        let (loss, dlogits) = cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            status = RunStatus::Diverged { step };
            break;
        }
        loss_curve.push(loss);
        let grads = model.backward(&cache, &dlogits)?;
        let lr = spec.optimizer.lr_at(step, spec.steps);
        adam.step(&mut model.params, &grads, lr, trainable);

        if (step + 1) % spec.eval_every == 0 || step + 1 == spec.steps {
            evals.push(EvalPoint {
                step: step + 1,
                train_accuracy: evaluate(&model, &data, &probe_idx)?,
                eval_accuracy: evaluate(&model, &data, &eval_idx)?,
            });
        }
    }

    let final_eval_accuracy = match status {
        RunStatus::Completed => evals.last().map_or(0.0, |e| e.eval_accuracy),
        RunStatus::Diverged { .. } => 0.0,
    };
    let report = TrainReport {
        spec: spec.clone(),
        seed: spec.seed,
        status,
        loss_curve,
        evals,
        final_eval_accuracy,
        flops_forward: model_cost(&spec.model)?.flops_forward,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { report, model })
}
