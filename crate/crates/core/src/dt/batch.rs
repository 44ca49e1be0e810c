use rand::Rng;

use crate::dt::model::DtInput;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trajectory::{apply_norm, returns_to_go, NormStats, Trajectory, ACT_DIM, STATE_DIM};

/// A demonstration prepared for window sampling: normalised states, raw
/// actions and the return-to-go channel.
#[derive(Debug, Clone)]
pub struct PreparedEpisode<S: Scalar = f32> {
    pub states: Vec<S>,
    pub actions: Vec<S>,
    pub rtg: Vec<S>,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingSet<S: Scalar = f32> {
    pub episodes: Vec<PreparedEpisode<S>>,
}

impl<S: Scalar> TrainingSet<S> {
    pub fn new(dataset: &[Trajectory], norm: &NormStats) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("training needs at least one trajectory".into()));
        }
        let episodes = dataset
            .iter()
            .map(|t| {
                let conv = |x: f32| S::from_f64_lossy(x as f64);
                PreparedEpisode {
                    states: t.states.iter().flat_map(|s| apply_norm(s, norm)).map(conv).collect(),
                    actions: t.actions.iter().flatten().copied().map(conv).collect(),
                    rtg: returns_to_go(&t.rewards).into_iter().map(conv).collect(),
                    len: t.len(),
                }
            })
            .collect::<Vec<_>>();
        if let Some(i) = episodes.iter().position(|e| e.len == 0) {
            return Err(Error::Data(format!("trajectory {i} is empty")));
        }
        Ok(TrainingSet { episodes })
    }

    pub fn max_len(&self) -> usize {
        self.episodes.iter().map(|e| e.len).max().unwrap_or(0)
    }
}

/// Model inputs plus regression targets. `weights` is 1 for real slots and
/// 0 for padding.
#[derive(Debug, Clone)]
pub struct TrainBatch<S: Scalar = f32> {
    pub input: DtInput<S>,
    pub targets: Vec<S>,
    pub weights: Vec<S>,
}

/// Copy the window `[start, start + context)` of `ep` into batch row `row`,
/// clipped at the episode end and left-padded.
pub fn fill_window<S: Scalar>(batch: &mut TrainBatch<S>, row: usize, ep: &PreparedEpisode<S>, start: usize) {
    let k = batch.input.context;
    let end = (start + k).min(ep.len);
    let n = end - start;
    let pad = k - n;
    let input = &mut batch.input;
    for i in 0..k {
        let slot = row * k + i;
        let st = &mut input.states[slot * STATE_DIM..(slot + 1) * STATE_DIM];
        let act = &mut input.actions[slot * ACT_DIM..(slot + 1) * ACT_DIM];
        let tgt = &mut batch.targets[slot * ACT_DIM..(slot + 1) * ACT_DIM];
        if i < pad {
            st.fill(S::zero());
            act.fill(S::zero());
            tgt.fill(S::zero());
            input.rtg[slot] = S::zero();
            input.timesteps[slot] = 0;
            input.valid[slot] = false;
            batch.weights[slot] = S::zero();
        } else {
            let t = start + i - pad;
            st.copy_from_slice(&ep.states[t * STATE_DIM..(t + 1) * STATE_DIM]);
            act.copy_from_slice(&ep.actions[t * ACT_DIM..(t + 1) * ACT_DIM]);
            tgt.copy_from_slice(&ep.actions[t * ACT_DIM..(t + 1) * ACT_DIM]);
            input.rtg[slot] = ep.rtg[t];
            input.timesteps[slot] = t;
            input.valid[slot] = true;
            batch.weights[slot] = S::one();
        }
    }
}

/// Sample `batch` windows: a trajectory uniformly, then a start index
/// uniformly within it.
pub fn sample_batch<S: Scalar, R: Rng + ?Sized>(
    set: &TrainingSet<S>,
    context: usize,
    batch: usize,
    rng: &mut R,
) -> TrainBatch<S> {
    let mut out = TrainBatch {
        input: DtInput::zeros(batch, context, STATE_DIM, ACT_DIM),
        targets: vec![S::zero(); batch * context * ACT_DIM],
        weights: vec![S::zero(); batch * context],
    };
    for row in 0..batch {
        let ep = &set.episodes[rng.random_range(0..set.episodes.len())];
        let start = rng.random_range(0..ep.len);
        fill_window(&mut out, row, ep, start);
    }
    out
}
