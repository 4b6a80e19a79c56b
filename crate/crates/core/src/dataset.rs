//! Offline trajectories: scripted behavior policies, collection, the binary
//! dataset file, and summary statistics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dt::compute_rtg;
use crate::env::{EnvConfig, EnvObservation, MecEnv, TraceSplit, ACTION_PER_USER};
use crate::error::{Error, Result};
use crate::nn::params::Reader;

/// Raw actions produced by the scripted policies stay this far inside (0,1).
pub const ACTION_MARGIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub env_id: String,
    pub rtg: Vec<f32>,
    /// Row-major `[T, state_dim]`.
    pub states: Vec<f32>,
    /// Row-major `[T, action_dim]`, raw values in (0,1).
    pub actions: Vec<f32>,
    pub rewards: Vec<f32>,
}

impl Trajectory {
    pub fn from_steps(env_id: impl Into<String>, states: Vec<f32>, actions: Vec<f32>, rewards: Vec<f32>) -> Self {
        let rtg = compute_rtg(&rewards);
        Trajectory { env_id: env_id.into(), rtg, states, actions, rewards }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rtg.first().map_or(0.0, |&r| f64::from(r))
    }

    pub fn state(&self, t: usize, state_dim: usize) -> &[f32] {
        &self.states[t * state_dim..(t + 1) * state_dim]
    }

    pub fn action(&self, t: usize, action_dim: usize) -> &[f32] {
        &self.actions[t * action_dim..(t + 1) * action_dim]
    }

    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let n = self.len();
        if self.rtg.len() != n || self.states.len() != n * state_dim || self.actions.len() != n * action_dim {
            return Err(Error::Schema(format!("trajectory {} has inconsistent lengths", self.env_id)));
        }
        if let Some(v) = self.actions.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::Schema(format!("trajectory {} stores raw action {v} outside (0,1)", self.env_id)));
        }
        if self.rtg != compute_rtg(&self.rewards) {
            return Err(Error::Schema(format!("trajectory {} breaks the return-to-go suffix sums", self.env_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub policy: String,
    pub seed: u64,
    pub env_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub provenance: Provenance,
    pub split: TraceSplit,
    pub trajectories: Vec<Trajectory>,
}

impl OfflineDataset {
    pub fn new(config: &EnvConfig, policy: impl Into<String>, seed: u64, split: TraceSplit) -> Self {
        OfflineDataset {
            state_dim: config.state_dim(),
            action_dim: config.action_dim(),
            provenance: Provenance { policy: policy.into(), seed, env_hash: config.hash() },
            split,
            trajectories: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn ensure_trainable(&self) -> Result<()> {
        if self.trajectories.iter().all(Trajectory::is_empty) {
            return Err(Error::usage("dataset has no transitions to train on"));
        }
        Ok(())
    }

    /// Fails unless the dataset was collected under `config`.
    pub fn ensure_matches(&self, config: &EnvConfig) -> Result<()> {
        if self.state_dim != config.state_dim() || self.action_dim != config.action_dim() {
            return Err(Error::Schema(format!(
                "dataset dims {}/{} do not match environment dims {}/{}",
                self.state_dim,
                self.action_dim,
                config.state_dim(),
                config.action_dim()
            )));
        }
        let hash = config.hash();
        if self.provenance.env_hash != hash {
            return Err(Error::Schema(format!(
                "dataset was collected under env config {} but {} is in use",
                self.provenance.env_hash, hash
            )));
        }
        Ok(())
    }

    pub fn max_return(&self) -> Option<f64> {
        self.trajectories.iter().filter(|t| !t.is_empty()).map(Trajectory::episode_return).reduce(f64::max)
    }

    /// Union of several datasets; provenance of the first is kept with the
    /// policy label listing all parts.
    pub fn merged(parts: &[&OfflineDataset]) -> Result<OfflineDataset> {
        let first = parts.first().ok_or_else(|| Error::usage("nothing to merge"))?;
        let mut out = OfflineDataset {
            state_dim: first.state_dim,
            action_dim: first.action_dim,
            provenance: Provenance {
                policy: parts.iter().map(|p| p.provenance.policy.as_str()).collect::<Vec<_>>().join("+"),
                seed: first.provenance.seed,
                env_hash: "merged".into(),
            },
            split: first.split,
            trajectories: Vec::new(),
        };
        for p in parts {
            if p.state_dim != out.state_dim || p.action_dim != out.action_dim {
                return Err(Error::Schema("cannot merge datasets of different dims".into()));
            }
            out.trajectories.extend(p.trajectories.iter().cloned());
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BehaviorPolicy {
    Heuristic { noise: f64 },
    Random,
}

impl BehaviorPolicy {
    pub fn label(&self) -> String {
        match self {
            BehaviorPolicy::Heuristic { noise } => format!("heuristic({noise})"),
            BehaviorPolicy::Random => "random".into(),
        }
    }

    pub fn act(&self, obs: &EnvObservation, rng: &mut impl Rng) -> Vec<f64> {
        match *self {
            BehaviorPolicy::Heuristic { noise } => behavior_heuristic(obs, rng, noise),
            BehaviorPolicy::Random => (0..obs.users.len() * ACTION_PER_USER)
                .map(|_| rng.random_range(ACTION_MARGIN..1.0 - ACTION_MARGIN))
                .collect(),
        }
    }
}

/// Equal resource shares and count-driven ratio knobs, perturbed by uniform
/// noise in `[-noise, noise]`.
pub fn behavior_heuristic(obs: &EnvObservation, rng: &mut impl Rng, noise: f64) -> Vec<f64> {
    let users = obs.users.len();
    let mut jitter = |v: f64| {
        let u = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
        (v + u).clamp(ACTION_MARGIN, 1.0 - ACTION_MARGIN)
    };
    let mut raw = Vec::with_capacity(users * ACTION_PER_USER);
    for u in &obs.users {
        let share = 1.0 / users as f64;
        for _ in 0..3 {
            raw.push(jitter(share));
        }
        let total = f64::from(u.counts.total().max(1));
        for m in u.counts.as_f64().to_array() {
            raw.push(jitter(0.2 + 0.6 * m / total));
        }
    }
    raw
}

/// Runs one full episode and records it.
pub fn run_episode(env: &mut MecEnv, policy: &BehaviorPolicy, rng: &mut impl Rng, env_id: &str) -> Result<Trajectory> {
    let (s_dim, a_dim) = (env.config().state_dim(), env.config().action_dim());
    let n = env.config().episode_len;
    let mut states = Vec::with_capacity(n * s_dim);
    let mut actions = Vec::with_capacity(n * a_dim);
    let mut rewards = Vec::with_capacity(n);
    let mut obs = env.reset()?;
    loop {
        let raw = policy.act(&obs, rng);
        states.extend(obs.flatten().into_iter().map(|v| v as f32));
        actions.extend(raw.iter().map(|&v| v as f32));
        let out = env.step(&raw)?;
        rewards.push(out.reward as f32);
        obs = out.observation;
        if out.done {
            break;
        }
    }
    Ok(Trajectory::from_steps(env_id, states, actions, rewards))
}

pub fn collect(
    config: &EnvConfig,
    split: TraceSplit,
    plan: &[(BehaviorPolicy, usize)],
    seed: u64,
) -> Result<OfflineDataset> {
    if plan.iter().map(|p| p.1).sum::<usize>() == 0 {
        return Err(Error::usage("collect needs at least one episode"));
    }
    let label = plan.iter().map(|(p, n)| format!("{}x{n}", p.label())).collect::<Vec<_>>().join("+");
    let mut ds = OfflineDataset::new(config, label, seed, split);
    let mut env = MecEnv::new(config.clone(), split, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fb0_11c7);
    for (policy, episodes) in plan {
        for _ in 0..*episodes {
            ds.trajectories.push(run_episode(&mut env, policy, &mut rng, &config.profile.name)?);
        }
    }
    Ok(ds)
}

/// 200 episodes of the ε = 0.2 heuristic and 50 uniform-random episodes.
pub fn default_plan() -> Vec<(BehaviorPolicy, usize)> {
    vec![(BehaviorPolicy::Heuristic { noise: 0.2 }, 200), (BehaviorPolicy::Random, 50)]
}

pub const DATASET_MAGIC: &[u8; 4] = b"FSDS";
pub const DATASET_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u16()? as usize;
    std::str::from_utf8(r.take(n)?).map(str::to_string).map_err(|_| Error::format("string is not UTF-8"))
}

pub fn dataset_to_bytes(ds: &OfflineDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    put_str(&mut out, &ds.provenance.env_hash);
    put_str(&mut out, &ds.provenance.policy);
    out.extend_from_slice(&ds.provenance.seed.to_le_bytes());
    out.push(match ds.split {
        TraceSplit::Train => 0,
        TraceSplit::Test => 1,
    });
    out.extend_from_slice(&(ds.state_dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.action_dim as u32).to_le_bytes());
    out.extend_from_slice(&(ds.trajectories.len() as u32).to_le_bytes());
    for t in &ds.trajectories {
        put_str(&mut out, &t.env_id);
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for i in 0..t.len() {
            out.extend_from_slice(&t.rtg[i].to_le_bytes());
            for v in t.state(i, ds.state_dim).iter().chain(t.action(i, ds.action_dim)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&t.rewards[i].to_le_bytes());
        }
    }
    out
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<OfflineDataset> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::format("bad dataset magic"));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::format(format!("unsupported dataset version {version}")));
    }
    let env_hash = get_str(&mut r)?;
    let policy = get_str(&mut r)?;
    let seed = r.u64()?;
    let split = match r.u8()? {
        0 => TraceSplit::Train,
        1 => TraceSplit::Test,
        s => return Err(Error::format(format!("unknown split marker {s}"))),
    };
    let state_dim = r.u32()? as usize;
    let action_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut trajectories = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let env_id = get_str(&mut r)?;
        let n = r.u32()? as usize;
        let mut t = Trajectory {
            env_id,
            rtg: Vec::with_capacity(n),
            states: Vec::with_capacity(n * state_dim),
            actions: Vec::with_capacity(n * action_dim),
            rewards: Vec::with_capacity(n),
        };
        for _ in 0..n {
            t.rtg.push(r.f32()?);
            t.states.extend(r.f32s(state_dim)?);
            t.actions.extend(r.f32s(action_dim)?);
            t.rewards.push(r.f32()?);
        }
        t.validate(state_dim, action_dim)?;
        trajectories.push(t);
    }
    if !r.is_done() {
        return Err(Error::format("trailing bytes after dataset"));
    }
    Ok(OfflineDataset { state_dim, action_dim, provenance: Provenance { policy, seed, env_hash }, split, trajectories })
}

pub fn save_dataset(ds: &OfflineDataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(ds))?;
    Ok(())
}

/// Loads a dataset and checks it against the environment it will be used with.
pub fn load_dataset(path: &Path, config: &EnvConfig) -> Result<OfflineDataset> {
    let ds = dataset_from_bytes(&std::fs::read(path)?)?;
    ds.ensure_matches(config)?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub episodes: usize,
    pub transitions: usize,
    pub return_min: Option<f64>,
    pub return_mean: Option<f64>,
    pub return_max: Option<f64>,
    /// Per raw action coordinate.
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

pub fn dataset_stats(ds: &OfflineDataset) -> DatasetStats {
    let returns: Vec<f64> = ds.trajectories.iter().filter(|t| !t.is_empty()).map(Trajectory::episode_return).collect();
    let transitions: usize = ds.trajectories.iter().map(Trajectory::len).sum();
    let mut sum = vec![0.0; ds.action_dim];
    let mut sq = vec![0.0; ds.action_dim];
    for t in &ds.trajectories {
        for row in t.actions.chunks_exact(ds.action_dim.max(1)) {
            for (i, &a) in row.iter().enumerate() {
                sum[i] += f64::from(a);
                sq[i] += f64::from(a) * f64::from(a);
            }
        }
    }
    let (action_mean, action_std) = if transitions == 0 {
        (Vec::new(), Vec::new())
    } else {
        let n = transitions as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0).sqrt()).collect();
        (mean, std)
    };
    DatasetStats {
        episodes: ds.len(),
        transitions,
        return_min: returns.iter().copied().reduce(f64::min),
        return_mean: (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64),
        return_max: returns.iter().copied().reduce(f64::max),
        action_mean,
        action_std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EnvConfig {
        EnvConfig { episode_len: 100, ..EnvConfig::default() }
    }

    #[test]
    fn stats_of_two_unit_rewards() {
        let cfg = small_config();
        let mut ds = OfflineDataset::new(&cfg, "manual", 0, TraceSplit::Train);
        ds.state_dim = 1;
        ds.action_dim = 1;
        ds.trajectories.push(Trajectory::from_steps("e", vec![0.0, 0.0], vec![0.5, 0.5], vec![1.0, 1.0]));
        let s = dataset_stats(&ds);
        assert_eq!((s.return_min, s.return_mean, s.return_max), (Some(2.0), Some(2.0), Some(2.0)));
        assert_eq!(s.action_mean, vec![0.5]);

        let empty = dataset_stats(&OfflineDataset::new(&cfg, "none", 0, TraceSplit::Train));
        assert_eq!((empty.return_min, empty.return_mean, empty.return_max), (None, None, None));
        assert!(empty.action_mean.is_empty());
    }

    #[test]
    fn heuristic_without_noise_is_deterministic() {
        let obs = EnvObservation::from_flat(&[1e8, 0.0, 0.0, 0.0, 0.0, 4.0, 9.0, 3.0, 1.0].repeat(4)).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        let x = behavior_heuristic(&obs, &mut a, 0.0);
        assert_eq!(x, behavior_heuristic(&obs, &mut b, 0.0));
        assert_eq!(
            &x[..6],
            &[0.25, 0.25, 0.25, 0.2 + 0.6 * 4.0 / 16.0, 0.2 + 0.6 * 9.0 / 16.0, 0.2 + 0.6 * 3.0 / 16.0]
        );
    }

    #[test]
    fn behavior_outputs_stay_open() {
        let obs = EnvObservation::from_flat(&[1e8, 0.0, 0.0, 0.0, 0.0, 16.0, 0.0, 0.0, 1.0].repeat(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for policy in [BehaviorPolicy::Heuristic { noise: 0.9 }, BehaviorPolicy::Random] {
            for _ in 0..200 {
                assert!(policy.act(&obs, &mut rng).iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}
