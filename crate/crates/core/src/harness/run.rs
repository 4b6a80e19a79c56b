//! On-disk layout and the collect/train/eval/report steps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::eval::{run_eval, summarize, EvalRecord, EvalTarget};
use super::stats::moving_average;
use super::{sub_seed, RunConfig, SplitTable};
use crate::dataset::{collect, dataset_stats, load_dataset, save_dataset, OfflineDataset};
use crate::dt::{split_counts, SplitModel};
use crate::env::TraceSplit;
use crate::error::{Error, Result};
use crate::fed::{comm_cost, train, Algo, ClientData, CommLedger, TrainOutcome};

/// "UMB/UMi" becomes "umb-umi".
pub fn client_slug(name: &str) -> String {
    name.to_ascii_lowercase().replace('/', "-")
}

/// Paths under a run's output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn dataset(&self, seed: u64, client: &str, kind: &str) -> PathBuf {
        self.seed_dir(seed).join("data").join(format!("{}.{kind}.fsds", client_slug(client)))
    }

    pub fn algo_dir(&self, seed: u64, algo: Algo) -> PathBuf {
        self.seed_dir(seed).join(algo.as_str())
    }

    pub fn checkpoint(&self, seed: u64, algo: Algo, domain: &str) -> PathBuf {
        self.algo_dir(seed, algo).join("checkpoints").join(format!("{}.fsdt", client_slug(domain)))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

#[derive(Clone, Debug)]
pub struct ClientDatasets {
    pub client: String,
    pub train: OfflineDataset,
    pub heldout: OfflineDataset,
}

/// Collects every client's training and held-out corpora and writes them,
/// with their statistics, under the seed directory.
pub fn collect_client_data(run: &RunConfig, seed: u64) -> Result<Vec<ClientDatasets>> {
    let layout = Layout::new(&run.out);
    let mut out = Vec::with_capacity(run.fed.clients.len());
    for (i, client) in run.fed.clients.iter().enumerate() {
        let env = run.client_env(client)?;
        let i = i as u64;
        let train = collect(&env, TraceSplit::Train, &run.collect.train_plan(), sub_seed(seed, 2 * i))?;
        let heldout = collect(&env, TraceSplit::Test, &run.collect.heldout_plan(), sub_seed(seed, 2 * i + 1))?;
        for (kind, ds) in [("train", &train), ("heldout", &heldout)] {
            let path = layout.dataset(seed, client, kind);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            save_dataset(ds, &path)?;
            write_json(&path.with_extension("stats.json"), &dataset_stats(ds))?;
        }
        out.push(ClientDatasets { client: client.clone(), train, heldout });
    }
    Ok(out)
}

/// Loads previously collected corpora, checking them against the run's
/// environments.
pub fn load_client_data(run: &RunConfig, seed: u64) -> Result<Vec<ClientDatasets>> {
    let layout = Layout::new(&run.out);
    run.fed
        .clients
        .iter()
        .map(|client| {
            let env = run.client_env(client)?;
            Ok(ClientDatasets {
                client: client.clone(),
                train: load_dataset(&layout.dataset(seed, client, "train"), &env)?,
                heldout: load_dataset(&layout.dataset(seed, client, "heldout"), &env)?,
            })
        })
        .collect()
}

fn load_or_collect(run: &RunConfig, seed: u64) -> Result<Vec<ClientDatasets>> {
    let layout = Layout::new(&run.out);
    let present = run
        .fed
        .clients
        .iter()
        .all(|c| layout.dataset(seed, c, "train").exists() && layout.dataset(seed, c, "heldout").exists());
    if present {
        load_client_data(run, seed)
    } else {
        collect_client_data(run, seed)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    algo: &'a str,
    seed: u64,
    total_steps: usize,
    run: &'a RunConfig,
}

/// Trains one method for one seed, collecting data first if it is missing.
/// Writes the loss CSV, the exchange ledger, a manifest, one checkpoint per
/// agent type and, for the split method, the per-round phase checks.
pub fn train_algo(run: &RunConfig, algo: Algo, seed: u64) -> Result<TrainOutcome> {
    run.validate()?;
    let data = load_or_collect(run, seed)?;
    let clients: Vec<ClientData> =
        data.iter().map(|d| ClientData { train: &d.train, heldout: Some(&d.heldout) }).collect();
    let outcome = train(algo, &run.fed, &run.model, &clients, seed)?;

    let layout = Layout::new(&run.out);
    let dir = layout.algo_dir(seed, algo);
    write(&dir.join("losses.csv"), outcome.losses_csv())?;
    write_json(&dir.join("comm_ledger.json"), &outcome.ledger)?;
    if algo == Algo::Fsdt {
        write_json(&dir.join("phase_checks.json"), &outcome.checks)?;
    }
    let manifest = Manifest { algo: algo.as_str(), seed, total_steps: run.fed.total_steps(), run };
    write(&dir.join("manifest.toml"), toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?)?;
    for m in &outcome.models {
        write(&layout.checkpoint(seed, algo, &m.domain), m.model.to_checkpoint()?)?;
    }
    Ok(outcome)
}

/// Evaluates one trained method for one seed on the test split and writes
/// `eval.json`. The rollout target for a client is the best return in its
/// training corpus.
pub fn eval_algo(run: &RunConfig, algo: Algo, seed: u64) -> Result<EvalRecord> {
    run.validate()?;
    let layout = Layout::new(&run.out);
    let data = load_client_data(run, seed)?;
    let mut models: BTreeMap<String, SplitModel<f32>> = BTreeMap::new();
    for domain in run.fed.domains() {
        let path = layout.checkpoint(seed, algo, &domain);
        let bytes = fs::read(&path)
            .map_err(|e| Error::usage(format!("missing checkpoint {}: {e}; run train first", path.display())))?;
        models.insert(domain, SplitModel::from_checkpoint(run.model.clone(), &bytes)?);
    }
    let envs = run.fed.clients.iter().map(|c| run.client_env(c)).collect::<Result<Vec<_>>>()?;
    let targets = data
        .iter()
        .zip(&envs)
        .map(|(d, env)| {
            Ok(EvalTarget {
                client: &d.client,
                env,
                model: &models[crate::fed::domain_of(&d.client)],
                target_return: d.train.max_return().ok_or_else(|| Error::usage("empty training corpus"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let record = run_eval(algo.as_str(), &targets, run.eval_episodes, seed)?;
    write_json(&layout.algo_dir(seed, algo).join("eval.json"), &record)?;
    Ok(record)
}

#[derive(Serialize)]
struct CommReport {
    p_tot: usize,
    p_local: usize,
    rounds: usize,
    batch_size: usize,
    features_per_batch: u64,
    methods: BTreeMap<String, crate::fed::CommCost>,
}

/// Writes `rewards.csv`, `qoe_box.json`, `latency_box.json`,
/// `split_table.json` and `comm_cost.json` from the evaluated runs found
/// under the output directory. Returns the written paths.
pub fn report(run: &RunConfig) -> Result<Vec<PathBuf>> {
    run.validate()?;
    let layout = Layout::new(&run.out);
    let dir = layout.report_dir();
    let mut qoe = BTreeMap::new();
    let mut latency = BTreeMap::new();
    let mut rewards = String::from("method,episode,reward,moving_average\n");
    let mut ledgers: BTreeMap<String, CommLedger> = BTreeMap::new();
    for algo in Algo::ALL {
        let mut records = Vec::new();
        for &seed in &run.seeds {
            let path = layout.algo_dir(seed, algo).join("eval.json");
            if path.exists() {
                records.push(serde_json::from_slice::<EvalRecord>(&fs::read(&path)?)?);
            }
            let ledger = layout.algo_dir(seed, algo).join("comm_ledger.json");
            if algo != Algo::Cdt && ledger.exists() && !ledgers.contains_key(algo.as_str()) {
                ledgers.insert(algo.as_str().into(), serde_json::from_slice(&fs::read(&ledger)?)?);
            }
        }
        if records.is_empty() {
            continue;
        }
        let summary = summarize(&records)?;
        qoe.insert(algo.as_str().to_string(), summary.qoe);
        latency.insert(algo.as_str().to_string(), summary.latency_ms);
        let curve = episode_curve(&records);
        for (e, (r, ma)) in curve.iter().zip(moving_average(&curve, run.moving_average)).enumerate() {
            rewards.push_str(&format!("{},{e},{r},{ma}\n", algo.as_str()));
        }
    }
    if qoe.is_empty() {
        return Err(Error::usage(format!("no evaluation results under {}; run eval first", run.out.display())));
    }

    let counts = split_counts(&run.model);
    let comm = CommReport {
        p_tot: counts.total(),
        p_local: counts.local(),
        rounds: run.fed.rounds,
        batch_size: run.fed.batch_size,
        features_per_batch: (run.fed.batch_size * 3 * run.model.context_len * run.model.hidden_dim) as u64,
        methods: ledgers.iter().map(|(k, l)| (k.clone(), comm_cost(l, counts.total(), counts.local()))).collect(),
    };

    let paths = [
        dir.join("rewards.csv"),
        dir.join("qoe_box.json"),
        dir.join("latency_box.json"),
        dir.join("split_table.json"),
        dir.join("comm_cost.json"),
    ];
    write(&paths[0], rewards)?;
    write_json(&paths[1], &qoe)?;
    write_json(&paths[2], &latency)?;
    write_json(&paths[3], &SplitTable::new(&run.model))?;
    write_json(&paths[4], &comm)?;
    Ok(paths.to_vec())
}

/// Mean return of episode `e` over seeds and clients.
fn episode_curve(records: &[EvalRecord]) -> Vec<f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        for e in &r.episodes {
            let s = sums.entry(e.episode).or_default();
            s.0 += e.episode_return;
            s.1 += 1;
        }
    }
    sums.values().map(|(s, n)| s / *n as f64).collect()
}
