use crate::dt::DecisionTransformer;
use crate::error::{Error, Result};
use crate::nn::LayerParams;
use crate::scalar::Scalar;

fn check_fraction(what: &str, p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} fraction must be in [0, 1), got {p}")))
    }
}

/// Unstructured mask of one layer's weight (true = kept).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub name: String,
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn pruned(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned() as f64 / self.keep.len().max(1) as f64
    }
}

/// Pruning record of a model: per-layer weight masks plus the kept
/// feed-forward units of every block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PruneMask {
    pub layers: Vec<LayerMask>,
    pub kept_hidden: Option<Vec<Vec<usize>>>,
}

impl PruneMask {
    pub fn of(model: &DecisionTransformer<impl Scalar>) -> Self {
        let layers = model
            .layers()
            .iter()
            .filter_map(|l| l.params.mask.as_ref().map(|m| LayerMask { name: l.name.clone(), keep: m.clone() }))
            .collect();
        PruneMask { layers, kept_hidden: model.compression.kept_hidden.clone() }
    }

    pub fn pruned(&self) -> usize {
        self.layers.iter().map(LayerMask::pruned).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.keep.len()).sum()
    }

    pub fn sparsity(&self) -> f64 {
        self.pruned() as f64 / self.total().max(1) as f64
    }
}

/// Keep-mask dropping the `⌊p·N⌋` smallest magnitudes, ties to the lowest
/// index.
pub fn magnitude_mask<S: Scalar>(weights: &[S], p: f64) -> Vec<bool> {
    let n = weights.len();
    let k = ((p * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| weights[a].abs().as_f64().total_cmp(&weights[b].abs().as_f64()).then(a.cmp(&b)));
    let mut keep = vec![true; n];
    for &i in &order[..k] {
        keep[i] = false;
    }
    keep
}

/// Zero the smallest-magnitude weights of every eligible layer. Biases are
/// never pruned. An existing mask is intersected with the new one.
pub fn prune_unstructured<S: Scalar>(
    model: &DecisionTransformer<S>,
    p_u: f64,
) -> Result<(DecisionTransformer<S>, PruneMask)> {
    check_fraction("unstructured pruning", p_u)?;
    let mut out = model.clone();
    for layer in out.layers_mut() {
        let p = &mut layer.params;
        if !p.eligible() {
            continue;
        }
        let mut keep = magnitude_mask(p.weight.data(), p_u);
        if let Some(old) = &p.mask {
            keep.iter_mut().zip(old).for_each(|(k, &o)| *k &= o);
        }
        p.mask = Some(keep);
        p.apply_mask();
    }
    let mask = PruneMask::of(&out);
    Ok((out, mask))
}

/// Indices of the rows kept after removing the `⌊p·rows⌋` rows of smallest
/// L2 norm (ties remove the lowest index first), in increasing order.
pub fn rows_to_keep<S: Scalar>(weight: &[S], cols: usize, p: f64) -> Vec<usize> {
    let norms: Vec<f64> = weight
        .chunks_exact(cols)
        .map(|r| r.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt())
        .collect();
    let rows = norms.len();
    let k = (p * rows as f64).floor() as usize;
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut kept = order[k.min(rows)..].to_vec();
    kept.sort_unstable();
    kept
}

fn select_rows<S: Scalar>(layer: &mut LayerParams<S>, keep: &[usize]) {
    let cols = layer.in_dim();
    let pick = |data: &[S], width: usize| keep.iter().flat_map(|&r| data[r * width..(r + 1) * width].iter().copied()).collect();
    let w: Vec<S> = pick(layer.weight.data(), cols);
    layer.weight.replace(vec![keep.len(), cols], w);
    if let Some(b) = layer.bias.as_mut() {
        let v: Vec<S> = pick(b.data(), 1);
        b.replace(vec![keep.len()], v);
    }
    if let Some(m) = layer.mask.as_mut() {
        *m = keep.iter().flat_map(|&r| m[r * cols..(r + 1) * cols].iter().copied()).collect();
    }
}

fn select_cols<S: Scalar>(layer: &mut LayerParams<S>, keep: &[usize]) {
    let (rows, cols) = (layer.out_dim(), layer.in_dim());
    let pick = |data: &[S]| -> Vec<S> { (0..rows).flat_map(|r| keep.iter().map(move |&c| data[r * cols + c])).collect() };
    let w = pick(layer.weight.data());
    layer.weight.replace(vec![rows, keep.len()], w);
    if let Some(m) = layer.mask.as_mut() {
        *m = (0..rows).flat_map(|r| keep.iter().map(|&c| m[r * cols + c]).collect::<Vec<_>>()).collect();
    }
}

/// Remove the weakest feed-forward hidden units of every block: rows of
/// `fc_in` (and its bias) and the matching columns of `fc_out`.
pub fn prune_structured<S: Scalar>(model: &DecisionTransformer<S>, p_s: f64) -> Result<DecisionTransformer<S>> {
    check_fraction("structured pruning", p_s)?;
    let mut out = model.clone();
    let blocks = out.config.layers;
    let mut kept_all = match &out.compression.kept_hidden {
        Some(k) => k.clone(),
        None => out.mlp_widths().into_iter().map(|w| (0..w).collect()).collect::<Vec<Vec<usize>>>(),
    };
    for b in 0..blocks {
        let (fc_in, fc_out) = out.mlp_mut(b);
        let hidden = fc_in.out_dim();
        let keep = rows_to_keep(fc_in.weight.data(), fc_in.in_dim(), p_s);
        if keep.is_empty() {
            return Err(Error::Config(format!("structured fraction {p_s} removes all {hidden} hidden units of block {b}")));
        }
        if keep.len() == hidden {
            continue;
        }
        select_rows(fc_in, &keep);
        select_cols(fc_out, &keep);
        kept_all[b] = keep.iter().map(|&i| kept_all[b][i]).collect();
    }
    if out.mlp_widths() != model.mlp_widths() || model.compression.kept_hidden.is_some() {
        out.compression.kept_hidden = Some(kept_all);
    }
    Ok(out)
}
