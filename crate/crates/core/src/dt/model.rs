use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compress::CompressionState;
use crate::dt::config::DtConfig;
use crate::error::{Error, Result};
use crate::nn::{
    causal_self_attention, forward_layer_norm, forward_linear, BoundLayer, Graph, LayerKind, LayerParams, QueryRows, Var,
};
use crate::scalar::Scalar;
use crate::trajectory::NormStats;

const EMBED_TIMESTEP: usize = 0;
const EMBED_RETURN: usize = 1;
const EMBED_STATE: usize = 2;
const EMBED_ACTION: usize = 3;
const EMBED_LN: usize = 4;
const FIRST_BLOCK: usize = 5;
const PER_BLOCK: usize = 6;

// Offsets inside a block.
const LN1: usize = 0;
const QKV: usize = 1;
const PROJ: usize = 2;
const LN2: usize = 3;
const FC_IN: usize = 4;
const FC_OUT: usize = 5;

/// Canonical layer names in storage order.
pub fn layer_names(blocks: usize) -> Vec<String> {
    let mut names: Vec<String> =
        ["embed_timestep", "embed_return", "embed_state", "embed_action", "embed_ln"].map(String::from).to_vec();
    for b in 0..blocks {
        for part in ["ln1", "attn.qkv", "attn.proj", "ln2", "mlp.fc_in", "mlp.fc_out"] {
            names.push(format!("blocks.{b}.{part}"));
        }
    }
    names.push("ln_f".into());
    names.push("head".into());
    names
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedLayer<S: Scalar = f32> {
    pub name: String,
    pub params: LayerParams<S>,
}

/// One forward pass worth of inputs: `batch` windows of `context` slots.
///
/// Per-slot buffers are row-major `[batch, context, ..]`. States must already
/// be normalised. Slots with `valid == false` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct DtInput<S: Scalar = f32> {
    pub batch: usize,
    pub context: usize,
    pub rtg: Vec<S>,
    pub states: Vec<S>,
    pub actions: Vec<S>,
    pub timesteps: Vec<usize>,
    pub valid: Vec<bool>,
}

impl<S: Scalar> DtInput<S> {
    pub fn zeros(batch: usize, context: usize, state_dim: usize, act_dim: usize) -> Self {
        let slots = batch * context;
        DtInput {
            batch,
            context,
            rtg: vec![S::zero(); slots],
            states: vec![S::zero(); slots * state_dim],
            actions: vec![S::zero(); slots * act_dim],
            timesteps: vec![0; slots],
            valid: vec![false; slots],
        }
    }

    fn check(&self, cfg: &DtConfig) -> Result<()> {
        let slots = self.batch * self.context;
        if self.batch == 0 || self.context == 0 || self.context > cfg.context {
            return Err(Error::dim("dt input", &[self.batch, self.context], &[cfg.context]));
        }
        let lens = [self.rtg.len(), self.states.len(), self.actions.len(), self.timesteps.len(), self.valid.len()];
        let want = [slots, slots * cfg.state_dim, slots * cfg.act_dim, slots, slots];
        if lens != want {
            return Err(Error::dim("dt input", &want, &lens));
        }
        if let Some(&t) = self.timesteps.iter().find(|&&t| t >= cfg.max_timestep) {
            return Err(Error::Contract(format!("timestep {t} overflows max_timestep {}", cfg.max_timestep)));
        }
        Ok(())
    }
}

/// Decision transformer over interleaved (return-to-go, state, action)
/// tokens with a learned timestep embedding, pre-norm GPT blocks and a tanh
/// action head read at state-token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTransformer<S: Scalar = f32> {
    pub config: DtConfig,
    pub norm: NormStats,
    /// Return-to-go used when evaluation asks for an automatic target.
    pub target_return: f32,
    pub compression: CompressionState,
    layers: Vec<NamedLayer<S>>,
}

impl<S: Scalar> DecisionTransformer<S> {
    /// Fresh model: normal(0, init_std) weights, zero biases, unit LayerNorm
    /// gains.
    pub fn build(cfg: &DtConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::init(cfg, &mut rng))
    }

    fn init<R: Rng>(cfg: &DtConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let std = cfg.init_std;
        let mut params = vec![
            LayerParams::embedding(cfg.max_timestep, d, std, rng),
            LayerParams::linear(1, d, std, rng),
            LayerParams::linear(cfg.state_dim, d, std, rng),
            LayerParams::linear(cfg.act_dim, d, std, rng),
            LayerParams::layer_norm(d),
        ];
        for _ in 0..cfg.layers {
            params.push(LayerParams::layer_norm(d));
            params.push(LayerParams::linear(d, 3 * d, std, rng));
            params.push(LayerParams::linear(d, d, std, rng));
            params.push(LayerParams::layer_norm(d));
            params.push(LayerParams::linear(d, cfg.mlp_hidden(), std, rng));
            params.push(LayerParams::linear(cfg.mlp_hidden(), d, std, rng));
        }
        params.push(LayerParams::layer_norm(d));
        params.push(LayerParams::linear(d, cfg.act_dim, std, rng));
        let layers =
            layer_names(cfg.layers).into_iter().zip(params).map(|(name, params)| NamedLayer { name, params }).collect();
        DecisionTransformer {
            config: cfg.clone(),
            norm: NormStats::identity(cfg.state_dim),
            target_return: 0.0,
            compression: CompressionState::default(),
            layers,
        }
    }

    /// Reassemble a model from stored layers, checking names and shapes.
    pub fn from_layers(
        config: DtConfig,
        norm: NormStats,
        target_return: f32,
        compression: CompressionState,
        layers: Vec<NamedLayer<S>>,
    ) -> Result<Self> {
        config.validate()?;
        let model = DecisionTransformer { config, norm, target_return, compression, layers };
        model.validate()?;
        Ok(model)
    }

    /// Structural consistency: names, kinds, shapes and masks agree with the
    /// config (feed-forward widths may be shrunk).
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        let names = layer_names(cfg.layers);
        if names.len() != self.layers.len() {
            return Err(Error::Contract(format!("expected {} layers, found {}", names.len(), self.layers.len())));
        }
        if self.norm.mean.len() != cfg.state_dim || self.norm.std.len() != cfg.state_dim {
            return Err(Error::dim("norm stats", &[cfg.state_dim], &[self.norm.mean.len(), self.norm.std.len()]));
        }
        let d = cfg.embed_dim;
        for (i, (layer, name)) in self.layers.iter().zip(&names).enumerate() {
            if &layer.name != name {
                return Err(Error::Contract(format!("layer {i} is named {:?}, expected {name:?}", layer.name)));
            }
            layer.params.validate()?;
            let expected: Option<(LayerKind, Vec<usize>)> = match i {
                EMBED_TIMESTEP => Some((LayerKind::Embedding, vec![cfg.max_timestep, d])),
                EMBED_RETURN => Some((LayerKind::Linear, vec![d, 1])),
                EMBED_STATE => Some((LayerKind::Linear, vec![d, cfg.state_dim])),
                EMBED_ACTION => Some((LayerKind::Linear, vec![d, cfg.act_dim])),
                _ if i + 1 == self.layers.len() => Some((LayerKind::Linear, vec![cfg.act_dim, d])),
                _ if i + 2 == self.layers.len() || i == EMBED_LN => Some((LayerKind::LayerNorm, vec![d])),
                _ => match (i - FIRST_BLOCK) % PER_BLOCK {
                    LN1 | LN2 => Some((LayerKind::LayerNorm, vec![d])),
                    QKV => Some((LayerKind::Linear, vec![3 * d, d])),
                    PROJ => Some((LayerKind::Linear, vec![d, d])),
                    _ => None,
                },
            };
            match expected {
                Some((kind, shape)) => {
                    if layer.params.kind != kind || layer.params.weight.shape() != shape.as_slice() {
                        return Err(Error::dim("layer shape", layer.params.weight.shape(), &shape));
                    }
                }
                None => {
                    if layer.params.kind != LayerKind::Linear {
                        return Err(Error::Contract(format!("{name} must be a linear layer")));
                    }
                }
            }
        }
        for b in 0..cfg.layers {
            let fc_in = &self.layers[FIRST_BLOCK + b * PER_BLOCK + FC_IN].params;
            let fc_out = &self.layers[FIRST_BLOCK + b * PER_BLOCK + FC_OUT].params;
            let hidden = fc_in.out_dim();
            if hidden == 0 || fc_in.in_dim() != d || fc_out.weight.shape() != [d, hidden] {
                return Err(Error::dim("feed-forward", fc_in.weight.shape(), fc_out.weight.shape()));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[NamedLayer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NamedLayer<S>] {
        &mut self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&NamedLayer<S>> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// `(fc_in, fc_out)` of block `b`.
    pub fn mlp_mut(&mut self, b: usize) -> (&mut LayerParams<S>, &mut LayerParams<S>) {
        let base = FIRST_BLOCK + b * PER_BLOCK;
        let (lo, hi) = self.layers.split_at_mut(base + FC_OUT);
        (&mut lo[base + FC_IN].params, &mut hi[0].params)
    }

    pub fn mlp(&self, b: usize) -> (&LayerParams<S>, &LayerParams<S>) {
        let base = FIRST_BLOCK + b * PER_BLOCK;
        (&self.layers[base + FC_IN].params, &self.layers[base + FC_OUT].params)
    }

    /// Feed-forward hidden width of every block.
    pub fn mlp_widths(&self) -> Vec<usize> {
        (0..self.config.layers).map(|b| self.mlp(b).0.out_dim()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.params.num_params()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> DecisionTransformer<T> {
        DecisionTransformer {
            config: self.config.clone(),
            norm: self.norm.clone(),
            target_return: self.target_return,
            compression: self.compression.clone(),
            layers: self.layers.iter().map(|l| NamedLayer { name: l.name.clone(), params: l.params.cast() }).collect(),
        }
    }

    /// Record the forward pass on `g`. Returns the action predictions
    /// `[batch*context, act_dim]` and the graph handles of every layer in
    /// storage order. Dropout is active iff `dropout_rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        input: &DtInput<S>,
        trainable: bool,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Vec<BoundLayer>)> {
        self.forward_slots(g, input, trainable, dropout_rng, false)
    }

    /// Predictions at every slot (`last_only == false`) or at the final slot
    /// of each window only. The final block and the head run on just the
    /// state tokens that feed those predictions.
    fn forward_slots(
        &self,
        g: &mut Graph<S>,
        input: &DtInput<S>,
        trainable: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        last_only: bool,
    ) -> Result<(Var, Vec<BoundLayer>)> {
        let cfg = &self.config;
        input.check(cfg)?;
        let (b, k) = (input.batch, input.context);
        let slots = b * k;
        let seq = 3 * k;
        let bound: Vec<BoundLayer> = self.layers.iter().map(|l| l.params.bind(g, trainable)).collect();
        let p = cfg.dropout;
        let mut drop = |g: &mut Graph<S>, x: Var| match dropout_rng.as_deref_mut() {
            Some(rng) => g.dropout(x, p, rng),
            None => x,
        };

        let rtg = g.input(vec![slots, 1], input.rtg.clone())?;
        let states = g.input(vec![slots, cfg.state_dim], input.states.clone())?;
        let actions = g.input(vec![slots, cfg.act_dim], input.actions.clone())?;
        let time = g.gather_rows(bound[EMBED_TIMESTEP].weight, input.timesteps.clone())?;
        let r = forward_linear(g, rtg, bound[EMBED_RETURN])?;
        let s = forward_linear(g, states, bound[EMBED_STATE])?;
        let a = forward_linear(g, actions, bound[EMBED_ACTION])?;
        let r = g.add(r, time)?;
        let s = g.add(s, time)?;
        let a = g.add(a, time)?;

        // Rows of the stacked [r; s; a] block, reordered to (r̂_t, s_t, a_t)
        // per window.
        let stacked = g.concat_rows(&[r, s, a])?;
        let mut order = Vec::with_capacity(b * seq);
        for bi in 0..b {
            for t in 0..k {
                for modality in 0..3 {
                    order.push(modality * slots + bi * k + t);
                }
            }
        }
        let tokens = g.gather_rows(stacked, order)?;
        let mut key_valid = Vec::with_capacity(b * seq);
        for &v in &input.valid {
            key_valid.extend([v; 3]);
        }

        // State tokens whose outputs are read by the head.
        let queries = if last_only {
            QueryRows { offset: seq - 2, stride: 3, count: 1 }
        } else {
            QueryRows { offset: 1, stride: 3, count: k }
        };
        let picked: Vec<usize> =
            (0..b).flat_map(|bi| (0..queries.count).map(move |i| bi * seq + queries.position(i))).collect();

        let mut h = forward_layer_norm(g, tokens, bound[EMBED_LN])?;
        h = drop(g, h);
        for blk in 0..cfg.layers {
            let last = blk + 1 == cfg.layers;
            let rows = if last { queries } else { QueryRows::all(seq) };
            let base = FIRST_BLOCK + blk * PER_BLOCK;
            let x = forward_layer_norm(g, h, bound[base + LN1])?;
            let x = causal_self_attention(
                g,
                x,
                bound[base + QKV],
                bound[base + PROJ],
                b,
                seq,
                cfg.heads,
                Some(&key_valid),
                rows,
            )?;
            let x = drop(g, x);
            if last {
                h = g.gather_rows(h, picked.clone())?;
            }
            h = g.add(h, x)?;
            let x = forward_layer_norm(g, h, bound[base + LN2])?;
            let x = forward_linear(g, x, bound[base + FC_IN])?;
            let x = g.gelu(x);
            let x = forward_linear(g, x, bound[base + FC_OUT])?;
            let x = drop(g, x);
            h = g.add(h, x)?;
        }
        if cfg.layers == 0 {
            h = g.gather_rows(h, picked)?;
        }
        let n = self.layers.len();
        let h = forward_layer_norm(g, h, bound[n - 2])?;
        let out = forward_linear(g, h, bound[n - 1])?;
        let out = g.tanh(out);
        Ok((out, bound))
    }

    /// Inference-mode predictions, `[batch, context, act_dim]` flattened.
    pub fn predict(&self, input: &DtInput<S>) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let (out, _) = self.forward(&mut g, input, false, None)?;
        Ok(g.value(out).to_vec())
    }

    /// Inference-mode prediction at the final slot of each window,
    /// `[batch, act_dim]` flattened.
    pub fn predict_last(&self, input: &DtInput<S>) -> Result<Vec<S>> {
        let mut g = Graph::new();
        let (out, _) = self.forward_slots(&mut g, input, false, None, true)?;
        Ok(g.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DtConfig {
        DtConfig { context: 4, embed_dim: 16, layers: 2, heads: 2, max_timestep: 50, ..DtConfig::default() }
    }

    fn random_input(cfg: &DtConfig, batch: usize, seed: u64) -> DtInput<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = DtInput::zeros(batch, cfg.context, cfg.state_dim, cfg.act_dim);
        input.rtg.iter_mut().for_each(|x| *x = rng.random_range(0.0..50.0));
        input.states.iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
        input.actions.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        input.timesteps.iter_mut().enumerate().for_each(|(i, t)| *t = i % cfg.context + 3);
        input.valid.iter_mut().for_each(|v| *v = true);
        input
    }

    #[test]
    fn default_parameter_count() {
        let m = DecisionTransformer::<f32>::build(&DtConfig::default(), 0).unwrap();
        assert_eq!(m.num_params(), 625_672);
        let again = DecisionTransformer::<f32>::build(&DtConfig::default(), 0).unwrap();
        assert_eq!(m, again);
        let other = DecisionTransformer::<f32>::build(&DtConfig::default(), 1).unwrap();
        assert_ne!(m.layers()[1].params.weight, other.layers()[1].params.weight);
    }

    #[test]
    fn biases_start_at_zero() {
        let m = DecisionTransformer::<f32>::build(&small(), 3).unwrap();
        for l in m.layers() {
            if l.params.kind == LayerKind::Linear {
                assert!(l.params.bias.as_ref().unwrap().data().iter().all(|&b| b == 0.0), "{}", l.name);
            }
        }
    }

    #[test]
    fn default_forward_shape_and_range() {
        let cfg = DtConfig::default();
        let m = DecisionTransformer::<f32>::build(&cfg, 0).unwrap();
        let input = random_input(&cfg, 4, 1);
        let out = m.predict(&input).unwrap();
        assert_eq!(out.len(), 4 * 20 * 8);
        assert!(out.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn single_slot_window() {
        let cfg = DtConfig { context: 1, ..small() };
        let m = DecisionTransformer::<f32>::build(&cfg, 0).unwrap();
        let out = m.predict(&random_input(&cfg, 2, 0)).unwrap();
        assert_eq!(out.len(), 2 * 8);
    }

    #[test]
    fn last_action_token_does_not_leak() {
        let cfg = small();
        let m = DecisionTransformer::<f32>::build(&cfg, 5).unwrap();
        let input = random_input(&cfg, 3, 2);
        let base = m.predict(&input).unwrap();
        let mut perturbed = input.clone();
        for b in 0..3 {
            let slot = b * cfg.context + cfg.context - 1;
            perturbed.actions[slot * 8..(slot + 1) * 8].iter_mut().for_each(|a| *a += 0.7);
        }
        assert_eq!(base, m.predict(&perturbed).unwrap());
    }

    #[test]
    fn timestep_overflow_is_rejected() {
        let cfg = small();
        let m = DecisionTransformer::<f32>::build(&cfg, 0).unwrap();
        let mut input = random_input(&cfg, 1, 0);
        input.timesteps[2] = cfg.max_timestep;
        assert!(matches!(m.predict(&input), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = DtConfig { heads: 3, ..small() };
        assert!(matches!(DecisionTransformer::<f32>::build(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn f64_copy_agrees() {
        let cfg = small();
        let m = DecisionTransformer::<f32>::build(&cfg, 9).unwrap();
        let input = random_input(&cfg, 2, 4);
        let a = m.predict(&input).unwrap();
        let m64: DecisionTransformer<f64> = m.cast();
        let input64 = DtInput {
            batch: input.batch,
            context: input.context,
            rtg: input.rtg.iter().map(|&x| x as f64).collect(),
            states: input.states.iter().map(|&x| x as f64).collect(),
            actions: input.actions.iter().map(|&x| x as f64).collect(),
            timesteps: input.timesteps.clone(),
            valid: input.valid.clone(),
        };
        let b = m64.predict(&input64).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((*x as f64 - y).abs() < 1e-4);
        }
    }

    #[test]
    fn last_slot_prediction_matches_full_forward() {
        let cfg = small();
        let m = DecisionTransformer::<f32>::build(&cfg, 2).unwrap();
        let mut input = random_input(&cfg, 3, 8);
        input.valid[4] = false;
        let full = m.predict(&input).unwrap();
        let last = m.predict_last(&input).unwrap();
        assert_eq!(last.len(), 3 * cfg.act_dim);
        for b in 0..3 {
            let at = (b * cfg.context + cfg.context - 1) * cfg.act_dim;
            for (x, y) in full[at..at + cfg.act_dim].iter().zip(&last[b * cfg.act_dim..]) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }
}
