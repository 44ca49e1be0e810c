use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dt::batch::{sample_batch, TrainBatch, TrainingSet};
use crate::dt::config::DtConfig;
use crate::dt::model::DecisionTransformer;
use crate::error::{Error, Result};
use crate::nn::{adam_step, clip_grad_norm, AdamConfig, AdamState, BoundLayer, Graph, LayerKind, ParamSlot};
use crate::scalar::Scalar;
use crate::trajectory::{fit_norm_stats, Trajectory};

const SAMPLER_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Fit normalisation, build a fresh model and train it for `cfg.steps`
/// steps. Returns the model and the per-step training loss.
pub fn train<S: Scalar>(dataset: &[Trajectory], cfg: &DtConfig, seed: u64) -> Result<(DecisionTransformer<S>, Vec<f32>)> {
    train_with(dataset, cfg, seed, |_, _| {})
}

/// [`train`] with a per-step callback receiving `(step, loss)`.
pub fn train_with<S: Scalar>(
    dataset: &[Trajectory],
    cfg: &DtConfig,
    seed: u64,
    on_step: impl FnMut(usize, f32),
) -> Result<(DecisionTransformer<S>, Vec<f32>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training needs at least one trajectory".into()));
    }
    let horizon = dataset.iter().map(Trajectory::len).max().unwrap_or(0);
    cfg.check_horizon(horizon)?;
    let mut model = DecisionTransformer::<S>::build(cfg, seed)?;
    model.norm = fit_norm_stats(dataset)?;
    model.target_return = dataset.iter().map(|t| t.total_return).fold(0.0, f32::max);
    let set = TrainingSet::new(dataset, &model.norm)?;
    let losses = run_steps(&mut model, &set, cfg.steps, seed, on_step)?;
    Ok((model, losses))
}

/// `steps` AdamW updates on windows drawn from `set`, starting from fresh
/// optimizer state. Pruning masks on the model stay enforced.
pub fn run_steps<S: Scalar>(
    model: &mut DecisionTransformer<S>,
    set: &TrainingSet<S>,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, f32),
) -> Result<Vec<f32>> {
    let cfg = model.config.clone();
    cfg.check_horizon(set.max_len())?;
    let adam = AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    let mut state = AdamState::<S>::new();
    let mut sampler = ChaCha8Rng::seed_from_u64(seed);
    sampler.set_stream(SAMPLER_STREAM);
    let mut dropout = ChaCha8Rng::seed_from_u64(seed);
    dropout.set_stream(DROPOUT_STREAM);
    for layer in model.layers_mut() {
        layer.params.apply_mask();
    }

    let mut losses = Vec::with_capacity(steps);
    for step in 1..=steps {
        let batch = sample_batch(set, cfg.context, cfg.batch, &mut sampler);
        let mut g = Graph::new();
        let (pred, bound) = model.forward(&mut g, &batch.input, true, Some(&mut dropout))?;
        let loss_var = g.masked_mse(pred, &batch.targets, &batch.weights)?;
        let loss = g.value(loss_var)[0];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: loss.as_f64() });
        }
        let mut grads = g.backward(loss_var)?;
        attach_grads(model, &bound, &mut grads)?;
        let mut slots = param_slots(model);
        clip_grad_norm(&mut slots, cfg.grad_clip);
        adam_step(&mut slots, &mut state, &adam)?;
        drop(slots);
        for layer in model.layers_mut() {
            layer.params.weight.clear_grad();
            if let Some(b) = layer.params.bias.as_mut() {
                b.clear_grad();
            }
        }
        let loss = loss.as_f32();
        losses.push(loss);
        on_step(step, loss);
    }
    Ok(losses)
}

fn attach_grads<S: Scalar>(
    model: &mut DecisionTransformer<S>,
    bound: &[BoundLayer],
    grads: &mut crate::nn::Gradients<S>,
) -> Result<()> {
    for (layer, b) in model.layers_mut().iter_mut().zip(bound) {
        let w = &mut layer.params.weight;
        let gw = grads.take(b.weight).unwrap_or_else(|| vec![S::zero(); w.numel()]);
        w.set_grad(gw)?;
        if let (Some(bias), Some(bv)) = (layer.params.bias.as_mut(), b.bias) {
            let gb = grads.take(bv).unwrap_or_else(|| vec![S::zero(); bias.numel()]);
            bias.set_grad(gb)?;
        }
    }
    Ok(())
}

/// Optimizer view of every parameter in storage order. Weight decay applies
/// to linear weights only.
pub fn param_slots<S: Scalar>(model: &mut DecisionTransformer<S>) -> Vec<ParamSlot<'_, S>> {
    let mut slots = Vec::new();
    for layer in model.layers_mut() {
        let name = &layer.name;
        let p = &mut layer.params;
        let linear = p.kind == LayerKind::Linear;
        slots.push(ParamSlot {
            name: format!("{name}.weight"),
            tensor: &mut p.weight,
            mask: p.mask.as_deref(),
            decay: linear,
        });
        if let Some(b) = p.bias.as_mut() {
            slots.push(ParamSlot { name: format!("{name}.bias"), tensor: b, mask: None, decay: false });
        }
    }
    slots
}

/// Deterministic (dropout-free) loss of `model` on a batch.
pub fn batch_loss<S: Scalar>(model: &DecisionTransformer<S>, batch: &TrainBatch<S>) -> Result<f64> {
    let mut g = Graph::new();
    let (pred, _) = model.forward(&mut g, &batch.input, false, None)?;
    let loss = g.masked_mse(pred, &batch.targets, &batch.weights)?;
    Ok(g.value(loss)[0].as_f64())
}

/// Mean dropout-free loss over `batches` freshly sampled batches.
pub fn dataset_loss<S: Scalar>(model: &DecisionTransformer<S>, set: &TrainingSet<S>, batches: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..batches {
        let batch = sample_batch(set, model.config.context, model.config.batch, &mut rng);
        total += batch_loss(model, &batch)?;
    }
    Ok(total / batches.max(1) as f64)
}
