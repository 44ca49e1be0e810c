//! Demonstration data: IMU-bearing states, reward augmentation,
//! returns-to-go, JSON-lines persistence and state normalisation.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACT_DIM: usize = 8;
pub const IMU_DIM: usize = 9;
pub const STATE_DIM: usize = ACT_DIM + IMU_DIM;
pub const DATASET_VERSION: u32 = 1;

/// Smallest standard deviation used for z-scoring.
pub const STD_FLOOR: f32 = 1e-6;

pub type Action = [f32; ACT_DIM];

/// Reward coefficients: planar speed, vertical speed, roll/pitch rate, yaw
/// rate, action change.
const W_VXY: f32 = 2.0;
const W_VZ: f32 = 1.0;
const W_WXY: f32 = 0.05;
const W_WZ: f32 = 0.5;
const W_DELTA: f32 = 0.01;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuReading {
    /// m/s
    pub lin_vel: [f32; 3],
    /// rad/s
    pub ang_vel: [f32; 3],
    /// m/s²
    pub lin_acc: [f32; 3],
}

impl ImuReading {
    pub fn is_finite(&self) -> bool {
        self.lin_vel.iter().chain(&self.ang_vel).chain(&self.lin_acc).all(|x| x.is_finite())
    }
}

/// Observation: the previous joint targets followed by the IMU reading.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct State {
    pub prev_action: Action,
    pub imu: ImuReading,
}

impl State {
    /// Layout `[prev_action(8), lin_vel(3), ang_vel(3), lin_acc(3)]`.
    pub fn flatten(&self) -> [f32; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[..ACT_DIM].copy_from_slice(&self.prev_action);
        out[ACT_DIM..ACT_DIM + 3].copy_from_slice(&self.imu.lin_vel);
        out[ACT_DIM + 3..ACT_DIM + 6].copy_from_slice(&self.imu.ang_vel);
        out[ACT_DIM + 6..].copy_from_slice(&self.imu.lin_acc);
        out
    }

    pub fn from_flat(v: &[f32; STATE_DIM]) -> Self {
        let mut prev_action = [0.0; ACT_DIM];
        prev_action.copy_from_slice(&v[..ACT_DIM]);
        let mut imu = ImuReading::default();
        imu.lin_vel.copy_from_slice(&v[ACT_DIM..ACT_DIM + 3]);
        imu.ang_vel.copy_from_slice(&v[ACT_DIM + 3..ACT_DIM + 6]);
        imu.lin_acc.copy_from_slice(&v[ACT_DIM + 6..]);
        State { prev_action, imu }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f32>,
    pub total_return: f32,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.actions.len() || self.states.len() != self.rewards.len() {
            return Err(Error::Data(format!(
                "length mismatch: {} states, {} actions, {} rewards",
                self.states.len(),
                self.actions.len(),
                self.rewards.len()
            )));
        }
        if let Some((t, r)) = self.rewards.iter().enumerate().find(|(_, r)| !(**r >= 0.0)) {
            return Err(Error::Data(format!("reward {r} at step {t} is not a non-negative number")));
        }
        let total = sum_left_to_right(&self.rewards);
        if total.to_bits() != self.total_return.to_bits() {
            return Err(Error::Data(format!(
                "total_return {} does not equal the reward sum {total}",
                self.total_return
            )));
        }
        Ok(())
    }
}

fn sum_left_to_right(xs: &[f32]) -> f32 {
    xs.iter().fold(0.0f32, |acc, &x| acc + x)
}

fn planar(a: f32, b: f32) -> f32 {
    (a * a + b * b).sqrt()
}

/// L2 distance between two actions.
pub fn action_delta(prev: &[f32], action: &[f32]) -> f32 {
    prev.iter().zip(action).map(|(p, a)| (a - p) * (a - p)).sum::<f32>().sqrt()
}

/// Locomotion reward for one step, clamped at zero.
///
/// `2·v_xy − v_z − 0.05·ω_xy + 0.5·ω_z − 0.01·‖a_t − a_{t−1}‖₂` where the
/// planar terms are magnitudes and the vertical/yaw terms are signed.
pub fn compute_reward(imu: &ImuReading, prev_action: &[f32], action: &[f32]) -> Result<f32> {
    if prev_action.len() != action.len() {
        return Err(Error::dim("compute_reward", &[prev_action.len()], &[action.len()]));
    }
    if !imu.is_finite() {
        return Err(Error::Data(format!("non-finite IMU reading {imu:?}")));
    }
    let [vx, vy, vz] = imu.lin_vel;
    let [wx, wy, wz] = imu.ang_vel;
    let raw = W_VXY * planar(vx, vy) - W_VZ * vz - W_WXY * planar(wx, wy) + W_WZ * wz
        - W_DELTA * action_delta(prev_action, action);
    Ok(raw.max(0.0))
}

/// Attach rewards to a demonstration: `r_t` uses the IMU reading and
/// previous action stored in `states[t]` and the action taken at `t`.
pub fn augment_trajectory(states: Vec<State>, actions: Vec<Action>) -> Result<Trajectory> {
    if states.len() != actions.len() {
        return Err(Error::Data(format!(
            "length mismatch: {} states vs {} actions",
            states.len(),
            actions.len()
        )));
    }
    if states.is_empty() {
        return Err(Error::Data("cannot augment an empty trajectory".into()));
    }
    let rewards = states
        .iter()
        .zip(&actions)
        .map(|(s, a)| compute_reward(&s.imu, &s.prev_action, a))
        .collect::<Result<Vec<_>>>()?;
    let total_return = sum_left_to_right(&rewards);
    Ok(Trajectory { states, actions, rewards, total_return })
}

/// `rtg[t] = Σ_{t' ≥ t} rewards[t']`, accumulated right to left.
pub fn returns_to_go(rewards: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; rewards.len()];
    let mut acc = 0.0f32;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    version: u32,
    states: Vec<[f32; STATE_DIM]>,
    actions: Vec<Action>,
    rewards: Vec<f32>,
    total_return: f32,
}

impl From<&Trajectory> for Record {
    fn from(t: &Trajectory) -> Self {
        Record {
            version: DATASET_VERSION,
            states: t.states.iter().map(State::flatten).collect(),
            actions: t.actions.clone(),
            rewards: t.rewards.clone(),
            total_return: t.total_return,
        }
    }
}

/// Write one JSON object per trajectory, one per line.
pub fn save_dataset(trajectories: &[Trajectory], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(trajectories, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(trajectories: &[Trajectory], w: &mut W) -> Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut *w, &Record::from(t))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { path: path.to_path_buf(), line: lineno, msg };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.version != DATASET_VERSION {
            return Err(parse_err(format!(
                "dataset version {} is not supported (expected {DATASET_VERSION})",
                rec.version
            )));
        }
        let traj = Trajectory {
            states: rec.states.iter().map(State::from_flat).collect(),
            actions: rec.actions,
            rewards: rec.rewards,
            total_return: rec.total_return,
        };
        traj.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(traj);
    }
    Ok(out)
}

/// Per-dimension z-score statistics over flattened states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Stats that leave states unchanged.
    pub fn identity(dim: usize) -> Self {
        NormStats { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Mean and population standard deviation of every state dimension, with
/// f64 accumulation.
pub fn fit_norm_stats(dataset: &[Trajectory]) -> Result<NormStats> {
    let count: usize = dataset.iter().map(Trajectory::len).sum();
    if count == 0 {
        return Err(Error::Data("cannot fit normalisation on an empty dataset".into()));
    }
    let mut sum = [0.0f64; STATE_DIM];
    for s in dataset.iter().flat_map(|t| &t.states) {
        for (acc, x) in sum.iter_mut().zip(s.flatten()) {
            *acc += x as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = [0.0f64; STATE_DIM];
    for s in dataset.iter().flat_map(|t| &t.states) {
        for ((acc, x), m) in sq.iter_mut().zip(s.flatten()).zip(&mean) {
            let d = x as f64 - m;
            *acc += d * d;
        }
    }
    Ok(NormStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: sq.iter().map(|&v| ((v / count as f64).sqrt() as f32).max(STD_FLOOR)).collect(),
    })
}

pub fn apply_norm(state: &State, stats: &NormStats) -> [f32; STATE_DIM] {
    let mut v = state.flatten();
    for ((x, m), s) in v.iter_mut().zip(&stats.mean).zip(&stats.std) {
        *x = (*x - m) / s;
    }
    v
}
