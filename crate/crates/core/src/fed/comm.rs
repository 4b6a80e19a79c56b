//! Exchange metering for federated and split training.

use serde::{Deserialize, Serialize};

/// Scalars one client exchanged with the server in one round.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub round: usize,
    pub client: String,
    /// Model parameters uploaded plus downloaded.
    pub params: u64,
    /// Activations sent across the split points.
    pub features: u64,
    /// Gradients returned across the split points.
    pub gradients: u64,
    /// Batches whose activations crossed the split points.
    pub split_batches: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub algo: String,
    pub rounds: usize,
    pub batch_size: usize,
    pub context_len: usize,
    pub hidden_dim: usize,
    pub clients: Vec<String>,
    pub entries: Vec<RoundTraffic>,
}

impl CommLedger {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.params + e.features + e.gradients).sum()
    }

    pub fn client_total(&self, client: &str) -> u64 {
        self.entries.iter().filter(|e| e.client == client).map(|e| e.params + e.features + e.gradients).sum()
    }

    pub fn client_split_batches(&self, client: &str) -> u64 {
        self.entries.iter().filter(|e| e.client == client).map(|e| e.split_batches).sum()
    }

    /// Scalars crossing one split point for one batch: `B·3L·hidden`.
    pub fn features_per_batch(&self) -> u64 {
        (self.batch_size * 3 * self.context_len * self.hidden_dim) as u64
    }
}

/// Full-model federated learning: every round each client downloads and
/// uploads all `p_tot` parameters, `2·R·P_tot`.
pub fn fl_cost(rounds: usize, p_tot: usize) -> u64 {
    2 * rounds as u64 * p_tot as u64
}

/// Split federated learning for one client: `split_batches` batches each
/// cross both split points with `features` activations out and `gradients`
/// back, plus a round trip of the `p_local` edge parameters per round.
pub fn fsdt_cost(rounds: usize, p_local: usize, split_batches: u64, features: u64, gradients: u64) -> u64 {
    2 * split_batches * (features + gradients) + 2 * rounds as u64 * p_local as u64
}

/// Analytic and metered exchange for one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientCost {
    pub client: String,
    pub analytic: u64,
    pub metered: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommCost {
    pub algo: String,
    pub rounds: usize,
    pub per_client: Vec<ClientCost>,
    pub analytic_total: u64,
    pub metered_total: u64,
}

/// Compares a ledger against the closed forms. `p_tot` and `p_local` are the
/// full and edge-side parameter counts of the model that was trained.
pub fn comm_cost(ledger: &CommLedger, p_tot: usize, p_local: usize) -> CommCost {
    let f = ledger.features_per_batch();
    let per_client: Vec<ClientCost> = ledger
        .clients
        .iter()
        .map(|c| {
            let analytic = match ledger.algo.as_str() {
                "fsdt" => fsdt_cost(ledger.rounds, p_local, ledger.client_split_batches(c), f, f),
                "fdt" => fl_cost(ledger.rounds, p_tot),
                _ => 0,
            };
            ClientCost { client: c.clone(), analytic, metered: ledger.client_total(c) }
        })
        .collect();
    CommCost {
        algo: ledger.algo.clone(),
        rounds: ledger.rounds,
        analytic_total: per_client.iter().map(|c| c.analytic).sum(),
        metered_total: per_client.iter().map(|c| c.metered).sum(),
        per_client,
    }
}
