use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, QueryRows, Var};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    LayerNorm,
    Embedding,
}

/// Affine grid of a uniformly quantized tensor: `value = min + code * step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantGrid {
    pub bits: u8,
    pub min: f32,
    pub step: f32,
}

/// Quantization metadata attached to a layer after fake quantization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerQuant {
    pub weight: QuantGrid,
    pub bias: Option<QuantGrid>,
}

/// Parameters of one layer plus the compression state that travels with them.
///
/// For `LayerNorm` the weight is the gain and the bias the shift; for
/// `Embedding` the weight is the `[rows, dim]` lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S: Scalar = f32> {
    pub kind: LayerKind,
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    /// Unstructured pruning mask over `weight` (true = kept).
    pub mask: Option<Vec<bool>>,
    pub quant: Option<LayerQuant>,
}

/// Graph handles of a layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl<S: Scalar> LayerParams<S> {
    pub fn linear<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        LayerParams {
            kind: LayerKind::Linear,
            weight: Tensor::randn(&[out_dim, in_dim], std, rng),
            bias: Some(Tensor::zeros(&[out_dim])),
            mask: None,
            quant: None,
        }
    }

    pub fn layer_norm(dim: usize) -> Self {
        LayerParams {
            kind: LayerKind::LayerNorm,
            weight: Tensor::filled(&[dim], S::one()),
            bias: Some(Tensor::zeros(&[dim])),
            mask: None,
            quant: None,
        }
    }

    pub fn embedding<R: Rng + ?Sized>(rows: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        LayerParams {
            kind: LayerKind::Embedding,
            weight: Tensor::randn(&[rows, dim], std, rng),
            bias: None,
            mask: None,
            quant: None,
        }
    }

    /// Build a layer from explicit tensors, validating the per-kind shape rules.
    pub fn from_parts(kind: LayerKind, weight: Tensor<S>, bias: Option<Tensor<S>>) -> Result<Self> {
        let layer = LayerParams { kind, weight, bias, mask: None, quant: None };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        match self.kind {
            LayerKind::Linear => {
                if ws.len() != 2 {
                    return Err(Error::dim("linear weight", ws, &[0, 0]));
                }
                if let Some(b) = &self.bias {
                    if b.shape() != [ws[0]] {
                        return Err(Error::dim("linear bias", ws, b.shape()));
                    }
                }
            }
            LayerKind::LayerNorm => {
                let b = self.bias.as_ref().map(|b| b.shape());
                if ws.len() != 1 || b != Some(ws) {
                    return Err(Error::dim("layer_norm", ws, b.unwrap_or(&[])));
                }
            }
            LayerKind::Embedding => {
                if ws.len() != 2 || self.bias.is_some() {
                    return Err(Error::dim("embedding", ws, &[0, 0]));
                }
            }
        }
        if let Some(m) = &self.mask {
            if m.len() != self.weight.numel() {
                return Err(Error::dim("mask", ws, &[m.len()]));
            }
        }
        Ok(())
    }

    /// Only fully connected layers take part in compression.
    pub fn eligible(&self) -> bool {
        self.kind == LayerKind::Linear
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[self.weight.shape().len() - 1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }

    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> BoundLayer {
        BoundLayer {
            weight: g.leaf(&self.weight, trainable),
            bias: self.bias.as_ref().map(|b| g.leaf(b, trainable)),
        }
    }

    /// Zero every masked-out weight.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, &keep) in self.weight.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *w = S::zero();
                }
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> LayerParams<T> {
        LayerParams {
            kind: self.kind,
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.cast()),
            mask: self.mask.clone(),
            quant: self.quant,
        }
    }
}

/// `y = x·Wᵀ + b` for `x: [B, T, in]`.
pub fn forward_linear<S: Scalar>(g: &mut Graph<S>, x: Var, layer: BoundLayer) -> Result<Var> {
    g.linear(x, layer.weight, layer.bias)
}

pub fn forward_layer_norm<S: Scalar>(g: &mut Graph<S>, x: Var, layer: BoundLayer) -> Result<Var> {
    let beta = layer
        .bias
        .ok_or_else(|| Error::Contract("layer norm without shift parameter".into()))?;
    g.layer_norm(x, layer.weight, beta)
}

/// Causal self-attention sublayer: packed QKV projection, masked softmax
/// attention, output projection. `x` is `[batch*seq, d]`; the output holds
/// the rows selected by `queries`.
#[allow(clippy::too_many_arguments)]
pub fn causal_self_attention<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    qkv: BoundLayer,
    proj: BoundLayer,
    batch: usize,
    seq: usize,
    heads: usize,
    key_valid: Option<&[bool]>,
    queries: QueryRows,
) -> Result<Var> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("embed dim {d} not divisible by {heads} heads")));
    }
    let packed = g.linear(x, qkv.weight, qkv.bias)?;
    let attended = g.causal_attention_rows(packed, batch, seq, heads, key_valid, queries)?;
    g.linear(attended, proj.weight, proj.bias)
}
