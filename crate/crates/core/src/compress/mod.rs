//! Compression laboratory: uniform quantization, magnitude pruning,
//! fine-tuning and ordered pipelines.

mod plan;
mod prune;
mod quant;

use serde::{Deserialize, Serialize};

use crate::dt::{run_steps, DecisionTransformer, TrainingSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trajectory::Trajectory;

pub use plan::{CompressionPlan, Strategy, PLAN_GRAMMAR};
pub use prune::{magnitude_mask, prune_structured, prune_unstructured, rows_to_keep, LayerMask, PruneMask};
pub use quant::{
    check_bits, dequantize, pack_codes, packed_len, quantize_model, quantize_tensor, unpack_codes, QuantizedTensor,
    MAX_BITS, MIN_BITS,
};

/// What has been done to a model's parameters beyond the per-layer masks and
/// quantization grids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionState {
    /// Plan label, empty for an uncompressed model.
    pub label: String,
    /// Kept feed-forward hidden units per block, when structured pruning ran.
    pub kept_hidden: Option<Vec<Vec<usize>>>,
}

/// Number of fine-tuning steps for `fraction` of a `steps`-step training run.
pub fn fine_tune_steps(steps: usize, fraction: f64) -> usize {
    (fraction * steps as f64).round() as usize
}

/// Continue training a pruned model for `ft_fraction` of its original
/// training steps. Masked weights stay exactly zero and shrunk dimensions
/// stay shrunk. Returns the model and the per-step loss.
pub fn fine_tune<S: Scalar>(
    model: &DecisionTransformer<S>,
    dataset: &[Trajectory],
    ft_fraction: f64,
    seed: u64,
) -> Result<(DecisionTransformer<S>, Vec<f32>)> {
    fine_tune_for(model, dataset, fine_tune_steps(model.config.steps, ft_fraction), seed)
}

/// [`fine_tune`] for an explicit number of steps.
pub fn fine_tune_for<S: Scalar>(
    model: &DecisionTransformer<S>,
    dataset: &[Trajectory],
    steps: usize,
    seed: u64,
) -> Result<(DecisionTransformer<S>, Vec<f32>)> {
    if model.layers().iter().any(|l| l.params.quant.is_some()) {
        return Err(Error::Contract("fine-tuning a quantized model would leave its grid".into()));
    }
    let mut out = model.clone();
    if steps == 0 {
        return Ok((out, Vec::new()));
    }
    let set = TrainingSet::new(dataset, &model.norm)?;
    let losses = run_steps(&mut out, &set, steps, seed, |_, _| {})?;
    Ok((out, losses))
}

fn prune<S: Scalar>(model: &DecisionTransformer<S>, plan: &CompressionPlan) -> Result<DecisionTransformer<S>> {
    let shrunk = prune_structured(model, plan.p_s)?;
    Ok(prune_unstructured(&shrunk, plan.p_u)?.0)
}

/// Apply the plan's stages in order. `dataset` is needed only when the plan
/// fine-tunes; `seed` drives fine-tuning batches and dropout.
pub fn run_pipeline<S: Scalar>(
    model: &DecisionTransformer<S>,
    plan: &CompressionPlan,
    dataset: Option<&[Trajectory]>,
    seed: u64,
) -> Result<DecisionTransformer<S>> {
    plan.validate()?;
    if !model.compression.label.is_empty() {
        return Err(Error::Contract(format!("model is already compressed ({})", model.compression.label)));
    }
    let mut out = match plan.strategy {
        Strategy::Fp32 => return Ok(model.clone()),
        Strategy::Quant(b) => quantize_model(model, b)?,
        Strategy::Prune => prune(model, plan)?,
        Strategy::QuantPrune(b) => prune(&quantize_model(model, b)?, plan)?,
        Strategy::PruneQuant(b) => quantize_model(&prune(model, plan)?, b)?,
        Strategy::PruneFtQuant(b) => {
            let data = dataset.ok_or_else(|| Error::Config(format!("strategy {} needs a dataset", plan.strategy)))?;
            let pruned = prune(model, plan)?;
            let (tuned, _) = fine_tune(&pruned, data, plan.ft_fraction, seed)?;
            quantize_model(&tuned, b)?
        }
    };
    out.compression.label = plan.label();
    Ok(out)
}
