use crate::dt::model::{DecisionTransformer, DtInput};
use crate::env::{EnvConfig, SurrogateEnv};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trajectory::{apply_norm, augment_trajectory, compute_reward, Action, State, Trajectory, ACT_DIM, STATE_DIM};

/// A conditioned episode together with the return-to-go fed at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutLog {
    pub seed: u64,
    pub trajectory: Trajectory,
    /// `rtg[t]` is the conditioning value at step `t`; the final entry is the
    /// value left after the last reward.
    pub rtg: Vec<f32>,
}

/// Next conditioning value after realising `reward`.
pub fn decrement_rtg(rtg: f32, reward: f32) -> f32 {
    (rtg - reward).max(0.0)
}

struct Episode {
    seed: u64,
    env: SurrogateEnv,
    states: Vec<State>,
    norm_states: Vec<[f32; STATE_DIM]>,
    actions: Vec<Action>,
    rtg: Vec<f32>,
}

/// Run one episode conditioned on `target_return`.
pub fn rollout<S: Scalar>(
    model: &DecisionTransformer<S>,
    env_cfg: &EnvConfig,
    seed: u64,
    target_return: f32,
) -> Result<RolloutLog> {
    Ok(rollout_batch(model, env_cfg, &[seed], target_return)?.remove(0))
}

/// Run several episodes in lockstep, one model call per time step. Each
/// episode's result is identical to running it alone.
pub fn rollout_batch<S: Scalar>(
    model: &DecisionTransformer<S>,
    env_cfg: &EnvConfig,
    seeds: &[u64],
    target_return: f32,
) -> Result<Vec<RolloutLog>> {
    if !(target_return >= 0.0) || !target_return.is_finite() {
        return Err(Error::Contract(format!("target return {target_return} must be finite and non-negative")));
    }
    if seeds.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &model.config;
    cfg.check_horizon(env_cfg.horizon)?;
    let k = cfg.context;
    let mut episodes = seeds
        .iter()
        .map(|&seed| {
            let (env, s) = SurrogateEnv::reset(env_cfg, seed)?;
            Ok(Episode {
                seed,
                env,
                states: vec![s],
                norm_states: vec![apply_norm(&s, &model.norm)],
                actions: Vec::new(),
                rtg: vec![target_return],
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let conv = |x: f32| S::from_f64_lossy(x as f64);
    for t in 0..env_cfg.horizon {
        let lo = (t + 1).saturating_sub(k);
        let n = t + 1 - lo;
        let pad = k - n;
        let mut input = DtInput::<S>::zeros(episodes.len(), k, STATE_DIM, ACT_DIM);
        for (row, ep) in episodes.iter().enumerate() {
            for i in 0..n {
                let step = lo + i;
                let slot = row * k + pad + i;
                input.rtg[slot] = conv(ep.rtg[step]);
                for (dst, &src) in input.states[slot * STATE_DIM..(slot + 1) * STATE_DIM].iter_mut().zip(&ep.norm_states[step]) {
                    *dst = conv(src);
                }
                if step < t {
                    for (dst, &src) in input.actions[slot * ACT_DIM..(slot + 1) * ACT_DIM].iter_mut().zip(&ep.actions[step]) {
                        *dst = conv(src);
                    }
                }
                input.timesteps[slot] = step;
                input.valid[slot] = true;
            }
        }
        let pred = model.predict_last(&input)?;
        for (row, ep) in episodes.iter_mut().enumerate() {
            let at = row * ACT_DIM;
            let mut action = [0.0f32; ACT_DIM];
            for (a, &p) in action.iter_mut().zip(&pred[at..at + ACT_DIM]) {
                *a = p.as_f32();
            }
            let wrap = |e: Error| Error::Episode { episode: row, seed: ep.seed, source: Box::new(e) };
            let s = ep.states[t];
            let reward = compute_reward(&s.imu, &s.prev_action, &action).map_err(wrap)?;
            let (next, _) = ep.env.step(&action).map_err(wrap)?;
            ep.actions.push(action);
            ep.rtg.push(decrement_rtg(ep.rtg[t], reward));
            ep.states.push(next);
            ep.norm_states.push(apply_norm(&next, &model.norm));
        }
    }

    episodes
        .into_iter()
        .map(|mut ep| {
            ep.states.truncate(env_cfg.horizon);
            let trajectory = augment_trajectory(ep.states, ep.actions)?;
            Ok(RolloutLog { seed: ep.seed, trajectory, rtg: ep.rtg })
        })
        .collect()
}
