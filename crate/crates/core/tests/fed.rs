use fsdt_core::dataset::{collect, BehaviorPolicy, OfflineDataset};
use fsdt_core::dt::{evaluate_loss, sample_batch, DtConfig, SplitModel};
use fsdt_core::env::{EnvConfig, RatProfile, TraceSplit};
use fsdt_core::fed::{
    comm_cost, fedavg, train, train_cdt, train_fdt, train_fsdt, train_server, update_local, Algo, ClientData,
    ClientState, FedConfig, Phase,
};
use fsdt_core::nn::{ParamSet, Tensor};
use fsdt_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPISODE: usize = 20;

fn env_config(name: &str) -> EnvConfig {
    EnvConfig { episode_len: EPISODE, ..EnvConfig::for_profile(name).unwrap() }
}

fn model_config() -> DtConfig {
    DtConfig { hidden_dim: 16, n_heads: 2, n_blocks: 1, context_len: 4, max_timestep: EPISODE, ..DtConfig::default() }
}

fn data(name: &str, episodes: usize, noise: f64, seed: u64) -> OfflineDataset {
    collect(&env_config(name), TraceSplit::Train, &[(BehaviorPolicy::Heuristic { noise }, episodes)], seed).unwrap()
}

struct Fixture {
    train: Vec<OfflineDataset>,
    heldout: Vec<OfflineDataset>,
}

impl Fixture {
    fn new(clients: &[String]) -> Self {
        Fixture {
            train: clients.iter().enumerate().map(|(i, c)| data(c, 4, 0.2, i as u64)).collect(),
            heldout: clients.iter().enumerate().map(|(i, c)| data(c, 2, 0.2, 100 + i as u64)).collect(),
        }
    }

    fn clients(&self) -> Vec<ClientData<'_>> {
        self.train.iter().zip(&self.heldout).map(|(t, h)| ClientData { train: t, heldout: Some(h) }).collect()
    }
}

fn small_fed(clients: &[&str]) -> FedConfig {
    FedConfig {
        clients: clients.iter().map(|s| s.to_string()).collect(),
        rounds: 3,
        client_steps: 2,
        server_steps: 3,
        batch_size: 4,
        lr: 1e-3,
        heldout_batch: 8,
        ..FedConfig::default()
    }
}

fn all_clients() -> Vec<&'static str> {
    RatProfile::BUILTIN_NAMES.to_vec()
}

fn init(seed: u64) -> SplitModel<f32> {
    SplitModel::new(model_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn local_update_leaves_the_decoder_alone() {
    let cfg = model_config();
    let ds = data("UMB/UMi", 3, 0.2, 0);
    let model = init(0);
    let opt = FedConfig { lr: 1e-3, ..FedConfig::default() }.optimizer();
    let mut client = ClientState::new("UMB/UMi", &model, 0, 0);
    let mut decoder = model.decoder.clone();
    let before = (client.fingerprint(), decoder.fingerprint());

    let idle = update_local(&mut client, &ds, &mut decoder, &cfg, &opt, 0, 4).unwrap();
    assert!(idle.losses.is_empty() && idle.traffic.forward == 0);
    assert_eq!((client.fingerprint(), decoder.fingerprint()), before);

    let stats = update_local(&mut client, &ds, &mut decoder, &cfg, &opt, 5, 4).unwrap();
    assert_eq!(stats.losses.len(), 5);
    assert_eq!(decoder.fingerprint(), before.1);
    assert_ne!(client.fingerprint(), before.0);
    assert_eq!(decoder.step(), 0);
    assert_eq!(client.embed.step(), 5);
    let crossing = (4 * 3 * cfg.context_len * cfg.hidden_dim) as u64;
    assert_eq!(stats.traffic.forward, 5 * 2 * crossing);
    assert_eq!(stats.traffic.backward, 5 * 2 * crossing);
}

#[test]
fn local_update_usually_lowers_the_loss() {
    let cfg = model_config();
    let opt = FedConfig { lr: 1e-3, ..FedConfig::default() }.optimizer();
    let mut improved = 0;
    for seed in 0..10 {
        let ds = data("Sub6GHz/InH", 3, 0.1, seed);
        let model = init(seed);
        let probe = sample_batch(&ds.trajectories, &cfg, 32, &mut ChaCha8Rng::seed_from_u64(seed + 50)).unwrap();
        let pre = evaluate_loss(&model, &probe).unwrap();
        let mut client = ClientState::new("Sub6GHz/InH", &model, seed, 0);
        let mut decoder = model.decoder.clone();
        update_local(&mut client, &ds, &mut decoder, &cfg, &opt, 30, 16).unwrap();
        let after =
            SplitModel { config: cfg.clone(), embed: client.embed.clone(), decoder, predict: client.predict.clone() };
        if evaluate_loss(&after, &probe).unwrap() <= pre {
            improved += 1;
        }
    }
    assert!(improved >= 9, "loss fell in {improved} of 10 runs");
}

#[test]
fn server_phase_leaves_client_modules_alone() {
    let cfg = model_config();
    let names = all_clients();
    let sets: Vec<OfflineDataset> = names.iter().enumerate().map(|(i, n)| data(n, 2, 0.2, i as u64)).collect();
    let refs: Vec<&OfflineDataset> = sets.iter().collect();
    let model = init(1);
    let opt = FedConfig::default().optimizer();
    let mut clients: Vec<ClientState> =
        names.iter().enumerate().map(|(i, n)| ClientState::new(*n, &model, 1, i)).collect();
    let mut decoder = model.decoder.clone();
    let locals: Vec<[u8; 32]> = clients.iter().map(ClientState::fingerprint).collect();

    let idle = train_server(&mut clients, &refs, &mut decoder, &cfg, &opt, 0, 4).unwrap();
    assert!(idle.iter().all(|s| s.losses.is_empty()));
    assert_eq!(decoder.fingerprint(), model.decoder.fingerprint());

    let stats = train_server(&mut clients, &refs, &mut decoder, &cfg, &opt, 100, 4).unwrap();
    assert_eq!(decoder.step(), 100);
    assert_eq!(stats.iter().map(|s| s.losses.len()).collect::<Vec<_>>(), vec![20; 5]);
    assert_ne!(decoder.fingerprint(), model.decoder.fingerprint());
    assert_eq!(clients.iter().map(ClientState::fingerprint).collect::<Vec<_>>(), locals);
    assert!(clients.iter().all(|c| c.embed.step() == 0 && c.predict.step() == 0));

    assert!(train_server(&mut clients, &refs[..2], &mut decoder, &cfg, &opt, 1, 4).is_err());
}

#[test]
fn split_run_records_every_round_and_meters_its_traffic() {
    let fed = small_fed(&all_clients());
    let fx = Fixture::new(&fed.clients);
    let cfg = model_config();
    let out = train_fsdt(&fed, &cfg, &fx.clients(), 4).unwrap();

    assert_eq!(out.checks.len(), fed.rounds);
    assert!(out.checks.iter().all(|c| c.holds()));
    assert_eq!(out.heldout_curve().len(), fed.rounds + 1);
    for round in 1..=fed.rounds {
        for phase in [Phase::Phase1, Phase::Phase2, Phase::Heldout] {
            let n = out.history.iter().filter(|h| h.round == round && h.phase == phase).count();
            // clients whose phase-2 share is zero log nothing for it
            let want = if phase == Phase::Phase2 { fed.server_steps } else { fed.clients.len() };
            assert_eq!(n, want, "round {round} {phase:?}");
        }
    }
    assert_eq!(out.trace.len(), fed.total_steps());
    assert!(out.trace.iter().all(|l| l.is_finite()));
    assert_eq!(out.models.iter().map(|m| m.domain.as_str()).collect::<Vec<_>>(), ["UMB", "Sub6GHz", "WiFi"]);
    assert!(out.model_for("UMB/InH").is_some());
    assert!(out.losses_csv().starts_with("round,client,phase,loss\n"));

    let counts = init(0).counts();
    let cost = comm_cost(&out.ledger, counts.total(), counts.local());
    assert_eq!(out.ledger.entries.len(), fed.rounds * fed.clients.len());
    for c in &cost.per_client {
        assert_eq!(c.analytic, c.metered, "{}", c.client);
    }
    // two phase-1 steps plus a share of three phase-2 steps per round
    let batches: Vec<u64> = fed.clients.iter().map(|c| out.ledger.client_split_batches(c)).collect();
    assert_eq!(batches, vec![9, 9, 9, 6, 6]);
}

#[test]
fn clients_of_one_agent_type_share_edge_modules() {
    let fed = small_fed(&["UMB/UMi", "UMB/InH", "WiFi/InH"]);
    let fx = Fixture::new(&fed.clients);
    let out = train_fsdt(&fed, &model_config(), &fx.clients(), 2).unwrap();
    assert_eq!(out.models.len(), 2);
    let (umb, wifi) = (out.model_for("UMB/UMi").unwrap(), out.model_for("WiFi/InH").unwrap());
    assert_eq!(umb.decoder.fingerprint(), wifi.decoder.fingerprint());
    assert_ne!(umb.embed.fingerprint(), wifi.embed.fingerprint());
}

#[test]
fn full_model_baseline_exchanges_the_whole_model() {
    let fed = small_fed(&all_clients());
    let fx = Fixture::new(&fed.clients);
    let out = train_fdt(&fed, &model_config(), &fx.clients(), 4).unwrap();
    let p_tot = init(0).counts().total() as u64;
    assert_eq!(out.ledger.entries.len(), fed.rounds * fed.clients.len());
    assert!(out.ledger.entries.iter().all(|e| e.params == 2 * p_tot && e.features == 0 && e.split_batches == 0));
    let cost = comm_cost(&out.ledger, p_tot as usize, 0);
    assert!(cost.per_client.iter().all(|c| c.analytic == c.metered && c.metered == 2 * 3 * p_tot));
    assert_eq!(out.trace.len(), fed.total_steps());
    let first = &out.models[0].model;
    assert!(out.models.iter().all(|m| m.model.decoder.fingerprint() == first.decoder.fingerprint()));
    assert!(out.checks.is_empty());
}

#[test]
fn one_client_full_model_run_replays_the_centralized_run() {
    let fed = small_fed(&["WiFi/InH"]);
    let fx = Fixture::new(&fed.clients);
    let cfg = model_config();
    let fdt = train_fdt(&fed, &cfg, &fx.clients(), 8).unwrap();
    let cdt = train_cdt(&fed, &cfg, &fx.clients(), 8).unwrap();
    assert_eq!(fdt.trace.len(), cdt.trace.len());
    assert!(fdt.trace.iter().zip(&cdt.trace).all(|(a, b)| a.to_bits() == b.to_bits()));
    let (a, b) = (&fdt.models[0].model, &cdt.models[0].model);
    assert_eq!(a.embed.fingerprint(), b.embed.fingerprint());
    assert_eq!(a.decoder.fingerprint(), b.decoder.fingerprint());
    assert_eq!(a.predict.fingerprint(), b.predict.fingerprint());
    assert!(cdt.ledger.entries.is_empty() && cdt.ledger.clients.is_empty());
}

#[test]
fn runs_are_reproducible_per_seed() {
    let fed = small_fed(&["UMB/UMi", "Sub6GHz/UMi"]);
    let fx = Fixture::new(&fed.clients);
    let cfg = model_config();
    for algo in Algo::ALL {
        let a = train(algo, &fed, &cfg, &fx.clients(), 5).unwrap();
        let b = train(algo, &fed, &cfg, &fx.clients(), 5).unwrap();
        let c = train(algo, &fed, &cfg, &fx.clients(), 6).unwrap();
        assert_eq!(a.trace, b.trace, "{algo}");
        assert_eq!(a.history, b.history, "{algo}");
        assert_ne!(a.trace, c.trace, "{algo}");
        for (x, y) in a.models.iter().zip(&b.models) {
            assert_eq!(x.model.decoder.fingerprint(), y.model.decoder.fingerprint());
            assert_eq!(x.model.embed.fingerprint(), y.model.embed.fingerprint());
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let fed = small_fed(&["UMB/UMi", "WiFi/InH"]);
    let fx = Fixture::new(&fed.clients);
    let cfg = model_config();
    let one = &fx.clients()[..1];
    assert!(matches!(train_fsdt(&fed, &cfg, one, 0), Err(Error::Config(_))));
    let wrong_dims = DtConfig { state_dim: 35, ..cfg.clone() };
    assert!(matches!(train_fdt(&fed, &wrong_dims, &fx.clients(), 0), Err(Error::Schema(_))));
    let empty = OfflineDataset::new(&env_config("UMB/UMi"), "none", 0, TraceSplit::Train);
    let data = [ClientData { train: &empty, heldout: None }, fx.clients()[1]];
    assert!(train_cdt(&fed, &cfg, &data, 0).is_err());
    let dup = FedConfig { clients: vec!["UMB/UMi".into(), "UMB/UMi".into()], ..fed };
    assert!(matches!(train_fsdt(&dup, &cfg, &fx.clients(), 0), Err(Error::Config(_))));
}

#[test]
fn centralized_model_can_memorize_a_small_dataset() {
    let fed = FedConfig {
        clients: vec!["UMB/UMi".into()],
        rounds: 1,
        client_steps: 1500,
        server_steps: 0,
        batch_size: 16,
        lr: 3e-3,
        weight_decay: 0.0,
        heldout_batch: 64,
    };
    let cfg = DtConfig { hidden_dim: 32, dropout: 0.0, ..model_config() };
    let train_set = data("UMB/UMi", 10, 0.0, 3);
    let out = train_cdt(&fed, &cfg, &[ClientData { train: &train_set, heldout: Some(&train_set) }], 0).unwrap();
    let curve = out.heldout_curve();
    assert!(curve[1] < 1e-3, "training-set action MSE {curve:?}");
}

fn set(values: &[f64]) -> ParamSet<f64> {
    let mut ps = ParamSet::new();
    ps.push("a", Tensor::from_vec(&[2], values[..2].to_vec()).unwrap()).unwrap();
    ps.push("b", Tensor::from_vec(&[1, 2], values[2..4].to_vec()).unwrap()).unwrap();
    ps
}

fn flat(ps: &ParamSet<f64>) -> Vec<f64> {
    ps.iter().flat_map(|p| p.value.data().to_vec()).collect()
}

proptest! {
    #[test]
    fn fedavg_is_the_elementwise_mean(
        rows in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 4), 1..6),
        shift in -10.0..10.0f64,
        k in 0.1..10.0f64,
    ) {
        let sets: Vec<ParamSet<f64>> = rows.iter().map(|r| set(r)).collect();
        let avg = flat(&fedavg(&sets.iter().collect::<Vec<_>>()).unwrap());
        let n = rows.len() as f64;
        for (j, v) in avg.iter().enumerate() {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            prop_assert!((v - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        }
        // affine maps commute with averaging
        let moved: Vec<ParamSet<f64>> =
            rows.iter().map(|r| set(&r.iter().map(|x| k * x + shift).collect::<Vec<_>>())).collect();
        let moved_avg = flat(&fedavg(&moved.iter().collect::<Vec<_>>()).unwrap());
        for (a, b) in avg.iter().zip(&moved_avg) {
            prop_assert!((k * a + shift - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let mut reversed: Vec<&ParamSet<f64>> = sets.iter().collect();
        reversed.reverse();
        for (a, b) in avg.iter().zip(flat(&fedavg(&reversed).unwrap())) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
