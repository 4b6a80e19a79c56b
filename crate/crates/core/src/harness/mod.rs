//! Run configuration, evaluation, summaries and report files.

mod eval;
mod run;
mod stats;

pub use eval::{run_eval, summarize, EpisodeResult, EvalRecord, EvalSummary, EvalTarget, MetricSummary, SeedMean};
pub use run::{
    client_slug, collect_client_data, eval_algo, load_client_data, report, train_algo, ClientDatasets, Layout,
};
pub use stats::{moving_average, quantile, BoxStats};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{default_plan, BehaviorPolicy};
use crate::dt::{split_counts, DtConfig};
use crate::env::{EnvConfig, RatProfile};
use crate::error::{Error, Result};
use crate::fed::FedConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub policy: BehaviorPolicy,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    /// Training corpus per client.
    pub plan: Vec<PlanEntry>,
    /// Held-out corpus per client, collected on the test split of the gaze traces.
    pub heldout: Vec<PlanEntry>,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            plan: default_plan().into_iter().map(|(policy, episodes)| PlanEntry { policy, episodes }).collect(),
            heldout: vec![PlanEntry { policy: BehaviorPolicy::Heuristic { noise: 0.2 }, episodes: 20 }],
        }
    }
}

fn plan_pairs(entries: &[PlanEntry]) -> Vec<(BehaviorPolicy, usize)> {
    entries.iter().map(|e| (e.policy, e.episodes)).collect()
}

impl CollectConfig {
    pub fn train_plan(&self) -> Vec<(BehaviorPolicy, usize)> {
        plan_pairs(&self.plan)
    }

    pub fn heldout_plan(&self) -> Vec<(BehaviorPolicy, usize)> {
        plan_pairs(&self.heldout)
    }
}

/// Everything a `collect`/`train`/`eval`/`report` run needs, usually read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Test episodes per client environment and seed.
    pub eval_episodes: usize,
    pub moving_average: usize,
    /// Environment template; each client substitutes its own RAT profile.
    pub env: EnvConfig,
    pub model: DtConfig,
    pub fed: FedConfig,
    pub collect: CollectConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0, 1, 2],
            out: PathBuf::from("runs"),
            eval_episodes: 100,
            moving_average: 10,
            env: EnvConfig::default(),
            model: DtConfig::default(),
            fed: FedConfig::default(),
            collect: CollectConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let run: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        run.validate()?;
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_episodes == 0 || self.moving_average == 0 {
            return Err(Error::Config("eval_episodes and moving_average must be positive".into()));
        }
        if self.collect.plan.iter().all(|e| e.episodes == 0) {
            return Err(Error::Config("the collection plan has no episodes".into()));
        }
        self.env.validate()?;
        self.model.validate()?;
        self.fed.validate()?;
        for c in &self.fed.clients {
            self.client_env(c)?;
        }
        if self.model.state_dim != self.env.state_dim() || self.model.action_dim != self.env.action_dim() {
            return Err(Error::Config(format!(
                "model dims {}/{} do not match {} users ({}/{})",
                self.model.state_dim,
                self.model.action_dim,
                self.env.users,
                self.env.state_dim(),
                self.env.action_dim()
            )));
        }
        Ok(())
    }

    /// The environment of one client.
    pub fn client_env(&self, client: &str) -> Result<EnvConfig> {
        let profile = RatProfile::builtin(client).map_err(|e| Error::Config(e.to_string()))?;
        Ok(EnvConfig { profile, ..self.env.clone() })
    }
}

/// Independent sub-seed for `stream` under a run seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Subnetwork sizes of the split model.
pub const REFERENCE_COUNTS: [(&str, usize); 3] =
    [("decoder", 4_738_560), ("embedding", 42_496), ("prediction", 15_677)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub part: String,
    pub params: usize,
    pub mib: f64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitTable {
    pub rows: Vec<SplitRow>,
    pub total: usize,
    pub total_mib: f64,
}

impl SplitTable {
    pub fn new(config: &DtConfig) -> Self {
        let c = split_counts(config);
        let total = c.total();
        let rows = [("decoder", c.decoder), ("embedding", c.embed), ("prediction", c.predict)]
            .into_iter()
            .map(|(part, n)| SplitRow {
                part: part.into(),
                params: n.params,
                mib: n.mib(),
                percent: 100.0 * n.params as f64 / total as f64,
            })
            .collect();
        SplitTable { rows, total, total_mib: (total * 4) as f64 / (1u64 << 20) as f64 }
    }

    pub fn row(&self, part: &str) -> Option<&SplitRow> {
        self.rows.iter().find(|r| r.part == part)
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<12} {:>12} {:>10} {:>8}\n", "part", "params", "MiB", "%");
        for r in &self.rows {
            out.push_str(&format!("{:<12} {:>12} {:>10.3} {:>8.2}\n", r.part, r.params, r.mib, r.percent));
        }
        out.push_str(&format!("{:<12} {:>12} {:>10.3}\n", "total", self.total, self.total_mib));
        out
    }
}

/// Fails when the default model no longer has the reference subnetwork sizes.
pub fn check_reference_counts() -> Result<()> {
    let table = SplitTable::new(&DtConfig::default());
    for (part, expected) in REFERENCE_COUNTS {
        let got = table.row(part).map(|r| r.params);
        if got != Some(expected) {
            return Err(Error::Contract(format!("default {part} has {got:?} parameters, expected {expected}")));
        }
    }
    Ok(())
}
