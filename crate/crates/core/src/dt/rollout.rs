use super::{last_actions, observation_scale, ContextBatch, SplitModel};
use crate::dataset::Trajectory;
use crate::env::MecEnv;
use crate::error::Result;
use crate::nn::Float;

/// Sigmoid outputs are pulled this far inside (0,1) before decoding, since
/// 32-bit saturation can return exactly 0 or 1.
pub const RAW_ACTION_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub user_qoe: Vec<f64>,
    pub user_latency_s: Vec<f64>,
}

/// What a policy rollout needs from an environment.
pub trait RolloutEnv {
    fn env_id(&self) -> String;
    fn reset_flat(&mut self) -> Result<Vec<f64>>;
    fn step_flat(&mut self, raw: &[f64]) -> Result<Transition>;
}

impl RolloutEnv for MecEnv {
    fn env_id(&self) -> String {
        self.config().profile.name.clone()
    }

    fn reset_flat(&mut self) -> Result<Vec<f64>> {
        Ok(self.reset()?.flatten())
    }

    fn step_flat(&mut self, raw: &[f64]) -> Result<Transition> {
        let out = self.step(raw)?;
        Ok(Transition {
            observation: out.observation.flatten(),
            reward: out.reward,
            done: out.done,
            user_qoe: out.users.iter().map(|u| u.qoe).collect(),
            user_latency_s: out.users.iter().map(|u| u.latency.total_s).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub trajectory: Trajectory,
    pub episode_return: f64,
    /// Return-to-go fed to the model at each slot.
    pub conditioning: Vec<f64>,
    /// Per slot, per user.
    pub user_qoe: Vec<f64>,
    pub user_latency_s: Vec<f64>,
}

struct Live {
    id: String,
    states: Vec<f32>,
    actions: Vec<f32>,
    rewards: Vec<f32>,
    conditioning: Vec<f64>,
    qoe: Vec<f64>,
    latency: Vec<f64>,
    obs: Vec<f64>,
    rtg: f64,
    done: bool,
}

/// Runs one episode in every environment, batching the model calls across
/// environments. Each slot feeds the latest `≤ L` tuples, with the current
/// action slot zeroed, and conditions the next slot on `RTG - r`.
pub fn rollout_episodes<T: Float, E: RolloutEnv>(
    model: &SplitModel<T>,
    envs: &mut [E],
    target_return: f64,
) -> Result<Vec<EpisodeRecord>> {
    let cfg = &model.config;
    let (sd, ad, l) = (cfg.state_dim, cfg.action_dim, cfg.context_len);
    let scale = observation_scale(sd);
    let mut live = Vec::with_capacity(envs.len());
    for env in envs.iter_mut() {
        live.push(Live {
            id: env.env_id(),
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            conditioning: Vec::new(),
            qoe: Vec::new(),
            latency: Vec::new(),
            obs: env.reset_flat()?,
            rtg: target_return,
            done: false,
        });
    }
    loop {
        let active: Vec<usize> = (0..live.len()).filter(|&i| !live[i].done).collect();
        if active.is_empty() {
            break;
        }
        let mut batch = ContextBatch::zeros(active.len(), l, cfg);
        for (row, &i) in active.iter().enumerate() {
            let ep = &mut live[i];
            ep.states.extend(ep.obs.iter().map(|&v| v as f32));
            ep.conditioning.push(ep.rtg);
            let t = ep.conditioning.len() - 1;
            let start = (t + 1).saturating_sub(l);
            let pad = l - (t + 1 - start);
            for (k, s) in (start..=t).enumerate() {
                let idx = row * l + pad + k;
                batch.rtg[idx] = (ep.conditioning[s] / cfg.rtg_scale) as f32;
                let dst = &mut batch.states[idx * sd..(idx + 1) * sd];
                for ((d, &v), &k) in dst.iter_mut().zip(&ep.states[s * sd..(s + 1) * sd]).zip(&scale) {
                    *d = v * k;
                }
                if s < t {
                    batch.actions[idx * ad..(idx + 1) * ad].copy_from_slice(&ep.actions[s * ad..(s + 1) * ad]);
                }
                batch.timesteps[idx] = s.min(cfg.max_timestep - 1);
                batch.pad_mask[idx] = true;
            }
        }
        let raw = last_actions(model, &batch)?;
        for (row, &i) in active.iter().enumerate() {
            let a: Vec<f64> =
                raw[row * ad..(row + 1) * ad].iter().map(|v| v.clamp(RAW_ACTION_EPS, 1.0 - RAW_ACTION_EPS)).collect();
            let out = envs[i].step_flat(&a)?;
            let ep = &mut live[i];
            ep.actions.extend(a.iter().map(|&v| v as f32));
            ep.rewards.push(out.reward as f32);
            ep.qoe.extend(&out.user_qoe);
            ep.latency.extend(&out.user_latency_s);
            ep.rtg -= out.reward;
            ep.obs = out.observation;
            ep.done = out.done;
        }
    }
    Ok(live
        .into_iter()
        .map(|ep| {
            let trajectory = Trajectory::from_steps(ep.id, ep.states, ep.actions, ep.rewards);
            EpisodeRecord {
                episode_return: trajectory.episode_return(),
                trajectory,
                conditioning: ep.conditioning,
                user_qoe: ep.qoe,
                user_latency_s: ep.latency,
            }
        })
        .collect())
}

pub fn rollout_episode<T: Float, E: RolloutEnv>(
    model: &SplitModel<T>,
    env: &mut E,
    target_return: f64,
) -> Result<EpisodeRecord> {
    let mut out = rollout_episodes(model, std::slice::from_mut(env), target_return)?;
    Ok(out.pop().expect("one episode"))
}
