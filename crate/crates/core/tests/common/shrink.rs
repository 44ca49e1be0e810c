use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinydt::compress::prune_structured;
use tinydt::dt::DtInput;
use tinydt::trajectory::{ACT_DIM, STATE_DIM};
use tinydt::DtModel;

pub fn random_input(seed: u64, batch: usize, context: usize) -> DtInput<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DtInput::zeros(batch, context, STATE_DIM, ACT_DIM);
    x.rtg.iter_mut().for_each(|v| *v = rng.random_range(0.0..50.0));
    x.states.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
    x.actions.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    for (i, t) in x.timesteps.iter_mut().enumerate() {
        *t = 10 + i % context;
    }
    x.valid.iter_mut().for_each(|v| *v = true);
    x
}

/// Largest output gap between the structurally pruned model and a dense copy
/// whose removed units have their fc_in row, bias and fc_out column zeroed.
pub fn shrink_equivalence_gap(dense: &DtModel, p_s: f64) -> f32 {
    let shrunk = prune_structured(dense, p_s).unwrap();
    let kept = shrunk.compression.kept_hidden.clone().unwrap();
    let mut zeroed = dense.clone();
    let hidden = dense.config.mlp_hidden();
    let d = dense.config.embed_dim;
    for (b, keep) in kept.iter().enumerate() {
        assert_eq!(keep.len(), hidden - (p_s * hidden as f64).floor() as usize);
        let (fc_in, fc_out) = zeroed.mlp_mut(b);
        for u in (0..hidden).filter(|u| !keep.contains(u)) {
            fc_in.weight.data_mut()[u * d..(u + 1) * d].fill(0.0);
            fc_in.bias.as_mut().unwrap().data_mut()[u] = 0.0;
            for r in 0..d {
                fc_out.weight.data_mut()[r * hidden + u] = 0.0;
            }
        }
    }
    let x = random_input(p_s.to_bits(), 3, dense.config.context);
    let a = shrunk.predict(&x).unwrap();
    let b = zeroed.predict(&x).unwrap();
    a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max)
}
