//! Stochastic quadruped surrogate: a first-order forward-velocity response
//! to how closely joint targets follow a sinusoidal trot reference.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{augment_trajectory, Action, ImuReading, State, Trajectory, ACT_DIM};

/// Expert noise levels cycled across demonstration episodes.
pub const EXPERT_SIGMAS: [f32; 4] = [0.0, 0.1, 0.3, 0.6];

/// RNG stream used for expert action noise (the environment uses stream 0).
const EXPERT_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub horizon: usize,
    /// Control period in seconds.
    pub dt: f32,
    /// Nominal top forward speed, m/s.
    pub v_max: f32,
    /// First-order velocity response per step.
    pub response: f32,
    /// Gait angular frequency, rad/s.
    pub gait_freq: f32,
    /// Reference joint amplitude, rad.
    pub amplitude: f32,
    /// Per-joint phase offsets: diagonal leg pairs in phase.
    pub phase_offsets: [f32; ACT_DIM],
    pub sigma_v: f32,
    pub sigma_omega: f32,
    /// Vertical bounce per unit change of mean joint target.
    pub bounce_gain: f32,
    /// Roll rate per unit tracking error.
    pub wobble_gain: f32,
    /// Per-episode multiplier on `v_max`, drawn uniformly from this range.
    pub v_max_scale: (f32, f32),
    /// Per-episode gait phase shift, drawn uniformly from `[lo, hi)`.
    pub phase_shift: (f32, f32),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 200,
            dt: 0.05,
            v_max: 2.0,
            response: 0.2,
            gait_freq: 2.0 * PI,
            amplitude: 0.8,
            phase_offsets: [0.0, PI, 0.0, PI, PI, 0.0, PI, 0.0],
            sigma_v: 0.02,
            sigma_omega: 0.05,
            bounce_gain: 0.5,
            wobble_gain: 0.3,
            v_max_scale: (0.9, 1.1),
            phase_shift: (0.0, 0.0),
        }
    }
}

impl EnvConfig {
    /// Deterministic dynamics: no sensor noise and no per-episode variation.
    pub fn noiseless() -> Self {
        EnvConfig { sigma_v: 0.0, sigma_omega: 0.0, v_max_scale: (1.0, 1.0), ..Self::default() }
    }

    /// Actions are clipped to `±1.5·amplitude`.
    pub fn action_limit(&self) -> f32 {
        1.5 * self.amplitude
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon == 0 {
            return bad("horizon must be positive");
        }
        if !(self.dt > 0.0) || !(self.amplitude > 0.0) {
            return bad("dt and amplitude must be positive");
        }
        if !(0.0..=1.0).contains(&self.response) {
            return bad("response must lie in [0, 1]");
        }
        if !(self.sigma_v >= 0.0) || !(self.sigma_omega >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        let (lo, hi) = self.v_max_scale;
        if !(lo > 0.0 && lo <= hi) {
            return bad("v_max_scale must be a positive range with lo <= hi");
        }
        let (lo, hi) = self.phase_shift;
        if !(lo <= hi) {
            return bad("phase_shift range must have lo <= hi");
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn normal(rng: &mut ChaCha8Rng, sigma: f32) -> f32 {
    let z: f32 = rng.sample(StandardNormal);
    sigma * z
}

#[derive(Debug, Clone)]
pub struct SurrogateEnv {
    cfg: EnvConfig,
    t: usize,
    vel: [f32; 3],
    ang_vel: [f32; 3],
    accel: [f32; 3],
    prev_action: Action,
    v_max_scale: f32,
    phase: f32,
    rng: ChaCha8Rng,
}

impl SurrogateEnv {
    /// Start an episode at rest. The episode's speed scale and phase shift are
    /// the first two draws from the seeded stream.
    pub fn reset(cfg: &EnvConfig, seed: u64) -> Result<(Self, State)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v_max_scale = uniform(&mut rng, cfg.v_max_scale);
        let phase = uniform(&mut rng, cfg.phase_shift);
        let env = SurrogateEnv {
            cfg: cfg.clone(),
            t: 0,
            vel: [0.0; 3],
            ang_vel: [0.0; 3],
            accel: [0.0; 3],
            prev_action: [0.0; ACT_DIM],
            v_max_scale,
            phase,
            rng,
        };
        let s = env.observe();
        Ok((env, s))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.cfg.horizon
    }

    pub fn v_max_scale(&self) -> f32 {
        self.v_max_scale
    }

    pub fn phase_shift(&self) -> f32 {
        self.phase
    }

    pub fn observe(&self) -> State {
        State {
            prev_action: self.prev_action,
            imu: ImuReading { lin_vel: self.vel, ang_vel: self.ang_vel, lin_acc: self.accel },
        }
    }

    /// Trot reference `A·sin(ω·t·dt + ρ_j + φ)` at step `t`.
    pub fn reference(&self, t: usize) -> Action {
        let c = &self.cfg;
        let base = c.gait_freq * (t as f32 * c.dt) + self.phase;
        let mut r = [0.0; ACT_DIM];
        for (rj, rho) in r.iter_mut().zip(&c.phase_offsets) {
            *rj = c.amplitude * (base + rho).sin();
        }
        r
    }

    pub fn clip_action(&self, action: &Action) -> Action {
        let lim = self.cfg.action_limit();
        action.map(|a| a.clamp(-lim, lim))
    }

    /// Advance one control period. Returns the next observation and the IMU
    /// reading it carries.
    pub fn step(&mut self, action: &Action) -> Result<(State, ImuReading)> {
        if self.is_done() {
            return Err(Error::EpisodeFinished { t: self.t, horizon: self.cfg.horizon });
        }
        if let Some(j) = action.iter().position(|a| !a.is_finite()) {
            return Err(Error::Data(format!("non-finite action component {j} at step {}", self.t)));
        }
        let c = &self.cfg;
        let a = self.clip_action(action);
        let r = self.reference(self.t);
        let n = ACT_DIM as f32;
        let err = a.iter().zip(&r).map(|(a, r)| (a - r).abs()).sum::<f32>() / n;
        let quality = (1.0 - err / c.amplitude).max(0.0);
        let mean_a = a.iter().sum::<f32>() / n;
        let mean_prev = self.prev_action.iter().sum::<f32>() / n;

        let old = self.vel;
        let vx = (1.0 - c.response) * old[0]
            + c.response * c.v_max * self.v_max_scale * quality
            + normal(&mut self.rng, c.sigma_v);
        let vy = normal(&mut self.rng, c.sigma_v);
        let vz = c.bounce_gain * (mean_a - mean_prev).abs() + normal(&mut self.rng, c.sigma_v);
        let wx = c.wobble_gain * err + normal(&mut self.rng, c.sigma_omega);
        let wy = normal(&mut self.rng, c.sigma_omega);
        let wz = normal(&mut self.rng, c.sigma_omega);

        self.vel = [vx, vy, vz];
        self.ang_vel = [wx, wy, wz];
        for k in 0..3 {
            self.accel[k] = (self.vel[k] - old[k]) / c.dt;
        }
        self.prev_action = a;
        self.t += 1;
        let s = self.observe();
        Ok((s, s.imu))
    }
}

/// Scripted trot: the reference plus Gaussian noise, clipped to the action box.
pub fn expert_action(env: &SurrogateEnv, sigma_e: f32, rng: &mut ChaCha8Rng) -> Action {
    let mut a = env.reference(env.t());
    for x in &mut a {
        *x += normal(rng, sigma_e);
    }
    env.clip_action(&a)
}

/// Run one scripted episode to the horizon.
pub fn expert_episode(cfg: &EnvConfig, seed: u64, sigma_e: f32) -> Result<Trajectory> {
    let (mut env, mut s) = SurrogateEnv::reset(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EXPERT_STREAM);
    let mut states = Vec::with_capacity(cfg.horizon);
    let mut actions = Vec::with_capacity(cfg.horizon);
    while !env.is_done() {
        let a = expert_action(&env, sigma_e, &mut rng);
        states.push(s);
        actions.push(a);
        s = env.step(&a)?.0;
    }
    augment_trajectory(states, actions)
}

/// Episode `i` uses seed `seed + i` and noise level `EXPERT_SIGMAS[i % 4]`.
pub fn collect_demonstrations(n_envs: usize, cfg: &EnvConfig, seed: u64) -> Result<Vec<Trajectory>> {
    if n_envs == 0 {
        return Err(Error::Config("n_envs must be positive".into()));
    }
    cfg.validate()?;
    (0..n_envs)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            expert_episode(cfg, s, EXPERT_SIGMAS[i % EXPERT_SIGMAS.len()])
                .map_err(|e| Error::Episode { episode: i, seed: s, source: Box::new(e) })
        })
        .collect()
}
