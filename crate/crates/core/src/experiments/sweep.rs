use std::io::Write;

use serde::{Deserialize, Serialize};

use super::dataset::{generate_dataset, SyntheticDatasetSpec};
use super::train::{evaluate, train, train_model, RunStatus, TrainReport, TrainSpec};
use crate::costmodel::model_cost;
use crate::error::{Error, Result};
use crate::merger::MergerConfig;
use crate::vit::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Placement,
    Tokens,
}

/// One training run of a sweep. `x` is the placement or the output-token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: usize,
    pub seed: u64,
    pub flops: u64,
    pub accuracy: f64,
    pub status: String,
    /// Full report of the run; absent when it failed before producing one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainReport>,
}

fn run_row(spec: &TrainSpec, x: usize) -> SweepRow {
    let flops = model_cost(&spec.model).map(|c| c.flops_forward).unwrap_or(0);
    let (accuracy, status, report) = match train(spec) {
        Ok(out) => match out.report.status {
            RunStatus::Completed => (out.report.final_eval_accuracy, "ok".to_string(), Some(out.report)),
            RunStatus::Diverged { step } => (0.0, format!("diverged at step {step}"), Some(out.report)),
        },
        Err(e) => (0.0, format!("error: {e}"), None),
    };
    SweepRow {
        x,
        seed: spec.seed,
        flops,
        accuracy,
        status,
        report,
    }
}

fn run_grid(jobs: Vec<(TrainSpec, usize)>) -> Vec<SweepRow> {
    jobs.iter().map(|(spec, x)| run_row(spec, *x)).collect()
}

fn seeded(base: &TrainSpec, seed: u64) -> TrainSpec {
    let mut s = base.clone();
    s.seed = seed;
    s
}

/// One run per (placement, seed) with `output_tokens` fixed. Rows are ordered
/// by placement, then seed.
pub fn sweep_placement(
    base: &TrainSpec,
    placements: &[usize],
    output_tokens: usize,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let depth = base.model.depth;
    if let Some(&bad) = placements.iter().find(|&&p| p < 1 || p > depth) {
        return Err(Error::config(format!("placement {bad} outside 1..={depth}")));
    }
    let mut jobs = Vec::new();
    for &p in placements {
        for &seed in seeds {
            let mut spec = seeded(base, seed);
            spec.model.merger = Some(MergerConfig {
                placement: p,
                output_tokens,
                preserve_cls: base.model.merger.is_none_or(|m| m.preserve_cls),
            });
            jobs.push((spec, p));
        }
    }
    Ok(run_grid(jobs))
}

/// One run per (output-token count, seed) at `placement`.
pub fn sweep_tokens(
    base: &TrainSpec,
    token_counts: &[usize],
    placement: usize,
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if token_counts.contains(&0) {
        return Err(Error::config("output token counts must be at least 1"));
    }
    MergerConfig::new(placement, 1).validate(base.model.depth)?;
    let mut jobs = Vec::new();
    for &m in token_counts {
        for &seed in seeds {
            let mut spec = seeded(base, seed);
            spec.model.merger = Some(MergerConfig {
                placement,
                output_tokens: m,
                preserve_cls: base.model.merger.is_none_or(|c| c.preserve_cls),
            });
            jobs.push((spec, m));
        }
    }
    Ok(run_grid(jobs))
}

/// Writes sweep rows as CSV with a header naming the x axis.
pub fn write_sweep_csv(kind: SweepKind, rows: &[SweepRow], out: impl Write) -> Result<()> {
    let x_name = match kind {
        SweepKind::Placement => "placement",
        SweepKind::Tokens => "output_tokens",
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record([x_name, "seed", "flops", "accuracy", "status"])?;
    for r in rows {
        w.write_record([
            r.x.to_string(),
            r.seed.to_string(),
            r.flops.to_string(),
            format!("{:.6}", r.accuracy),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableResolutionReport {
    pub image_size: usize,
    pub tokens_per_block: Vec<usize>,
    pub activations_finite: bool,
    pub accuracy_before_finetune: f64,
    pub accuracy_after_finetune: f64,
    pub finetune_steps: usize,
}

/// Moves a trained model to `image_size`: resizes the positional embeddings,
/// checks a forward pass, measures accuracy on a regenerated dataset at the new
/// size, finetunes for `finetune_steps` and measures again.
pub fn eval_variable_resolution(
    model: &Model<f32>,
    spec: &TrainSpec,
    image_size: usize,
    finetune_steps: usize,
) -> Result<VariableResolutionReport> {
    let mut adapted = model.clone();
    adapted.adapt_to_image_size(image_size)?;

    let mut ft = spec.clone();
    ft.model = adapted.config.clone();
    ft.dataset = SyntheticDatasetSpec {
        image_size,
        ..spec.dataset.clone()
    };
    ft.steps = finetune_steps.max(1);
    ft.eval_every = ft.steps;
    // Short schedule: brief warmup, then cosine decay.
    ft.optimizer.warmup_steps = ft.optimizer.warmup_steps.min(ft.steps / 10);

    let data = generate_dataset(&ft.dataset)?;
    let n = data.len();
    let n_eval = ((n as f64 * ft.eval_fraction).round() as usize).clamp(1, n - 1);
    let eval_idx: Vec<usize> = (n - n_eval..n).collect();

    let probe: Vec<usize> = eval_idx.iter().copied().take(8).collect();
    let (images, _) = data.batch(&probe);
    let (_, cache) = adapted.forward_cached(&images)?;
    let activations_finite = cache.all_finite();
    let tokens_per_block = cache.tokens_per_block().to_vec();
    let accuracy_before_finetune = evaluate(&adapted, &data, &eval_idx)?;

    let accuracy_after_finetune = if finetune_steps == 0 {
        accuracy_before_finetune
    } else {
        train_model(adapted, &ft)?.report.final_eval_accuracy
    };
    Ok(VariableResolutionReport {
        image_size,
        tokens_per_block,
        activations_finite,
        accuracy_before_finetune,
        accuracy_after_finetune,
        finetune_steps,
    })
}
