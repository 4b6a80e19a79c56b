use serde::{Deserialize, Serialize};

use super::stats::BoxStats;
use super::sub_seed;
use crate::dt::{rollout_episodes, SplitModel};
use crate::env::{EnvConfig, MecEnv, TraceSplit};
use crate::error::{Error, Result};

/// One client environment to evaluate and the model that serves it.
#[derive(Clone, Copy, Debug)]
pub struct EvalTarget<'a> {
    pub client: &'a str,
    pub env: &'a EnvConfig,
    pub model: &'a SplitModel<f32>,
    /// Return-to-go the rollout is conditioned on.
    pub target_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub client: String,
    pub episode: usize,
    pub episode_return: f64,
    pub mean_qoe: f64,
    pub mean_latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub algo: String,
    pub seed: u64,
    pub episodes: Vec<EpisodeResult>,
    /// Episode-mean QoE of every user, by client, episode, then user.
    pub user_qoe: Vec<f64>,
    /// Episode-mean end-to-end latency of every user in milliseconds.
    pub user_latency_ms: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Rolls out `episodes` test-split episodes per target, batched per target.
/// Environment seeds depend only on `seed`, the target index and the episode.
pub fn run_eval(algo: &str, targets: &[EvalTarget], episodes: usize, seed: u64) -> Result<EvalRecord> {
    let mut out =
        EvalRecord { algo: algo.into(), seed, episodes: Vec::new(), user_qoe: Vec::new(), user_latency_ms: Vec::new() };
    for (i, t) in targets.iter().enumerate() {
        let traces = t.env.gaze_traces(TraceSplit::Test)?;
        let mut envs = (0..episodes)
            .map(|e| MecEnv::with_traces(t.env.clone(), traces.clone(), sub_seed(seed, ((i as u64) << 32) + e as u64)))
            .collect::<Result<Vec<_>>>()?;
        let users = t.env.users;
        for (e, rec) in rollout_episodes(t.model, &mut envs, t.target_return)?.into_iter().enumerate() {
            let slots = rec.user_qoe.len() / users;
            let per_user =
                |values: &[f64], u: usize| mean(&(0..slots).map(|s| values[s * users + u]).collect::<Vec<_>>());
            let qoe: Vec<f64> = (0..users).map(|u| per_user(&rec.user_qoe, u)).collect();
            let latency: Vec<f64> = (0..users).map(|u| 1e3 * per_user(&rec.user_latency_s, u)).collect();
            out.episodes.push(EpisodeResult {
                client: t.client.into(),
                episode: e,
                episode_return: rec.episode_return,
                mean_qoe: mean(&qoe),
                mean_latency_ms: mean(&latency),
            });
            out.user_qoe.extend(qoe);
            out.user_latency_ms.extend(latency);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMean {
    pub seed: u64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    #[serde(flatten)]
    pub stats: BoxStats,
    pub per_seed: Vec<SeedMean>,
}

/// Pooled distributions over seeds, environments and users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub algo: String,
    pub reward: MetricSummary,
    pub qoe: MetricSummary,
    pub latency_ms: MetricSummary,
}

fn metric(records: &[EvalRecord], pick: impl Fn(&EvalRecord) -> Vec<f64>) -> Result<MetricSummary> {
    let mut pooled = Vec::new();
    let mut per_seed = Vec::with_capacity(records.len());
    for r in records {
        let v = pick(r);
        per_seed.push(SeedMean { seed: r.seed, mean: mean(&v) });
        pooled.extend(v);
    }
    let stats = BoxStats::from_samples(&pooled).ok_or_else(|| Error::usage("no finite samples to summarize"))?;
    Ok(MetricSummary { stats, per_seed })
}

/// Summary of one method's records, ordered by seed.
pub fn summarize(records: &[EvalRecord]) -> Result<EvalSummary> {
    let mut records = records.to_vec();
    records.sort_by_key(|r| r.seed);
    let algo = records.first().map(|r| r.algo.clone()).ok_or_else(|| Error::usage("no evaluation records"))?;
    Ok(EvalSummary {
        reward: metric(&records, |r| r.episodes.iter().map(|e| e.episode_return).collect())?,
        qoe: metric(&records, |r| r.user_qoe.clone())?,
        latency_ms: metric(&records, |r| r.user_latency_ms.clone())?,
        algo,
    })
}
