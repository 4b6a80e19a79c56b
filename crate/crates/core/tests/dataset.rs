use fsdt_core::dataset::{
    collect, dataset_from_bytes, dataset_stats, dataset_to_bytes, load_dataset, save_dataset, BehaviorPolicy,
    OfflineDataset, Trajectory,
};
use fsdt_core::env::{EnvConfig, RatProfile, TraceSplit};

fn heuristic(noise: f64) -> BehaviorPolicy {
    BehaviorPolicy::Heuristic { noise }
}

fn mean_return(ds: &OfflineDataset) -> f64 {
    dataset_stats(ds).return_mean.unwrap()
}

#[test]
fn collected_episodes_are_complete_and_consistent() {
    for name in RatProfile::BUILTIN_NAMES {
        let cfg = EnvConfig::for_profile(name).unwrap();
        let ds = collect(&cfg, TraceSplit::Train, &[(heuristic(0.2), 100)], 3).unwrap();
        assert_eq!(ds.len(), 100);
        for t in &ds.trajectories {
            assert_eq!(t.len(), cfg.episode_len);
            t.validate(cfg.state_dim(), cfg.action_dim()).unwrap();
            let sum: f64 = t.rewards.iter().map(|&r| f64::from(r)).sum();
            assert!((f64::from(t.rtg[0]) - sum).abs() <= 1e-4 * sum.abs().max(1.0));
            assert_eq!(*t.rtg.last().unwrap(), *t.rewards.last().unwrap());
            assert_eq!(t.env_id, name);
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let cfg = EnvConfig::for_profile("WiFi/InH").unwrap();
    let plan = [(heuristic(0.2), 6), (BehaviorPolicy::Random, 2)];
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.fsds"), dir.path().join("b.fsds"));
    save_dataset(&collect(&cfg, TraceSplit::Train, &plan, 11).unwrap(), &a).unwrap();
    save_dataset(&collect(&cfg, TraceSplit::Train, &plan, 11).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let other = collect(&cfg, TraceSplit::Train, &plan, 12).unwrap();
    assert_ne!(dataset_to_bytes(&other), std::fs::read(&a).unwrap());

    let back = load_dataset(&a, &cfg).unwrap();
    assert_eq!(back, collect(&cfg, TraceSplit::Train, &plan, 11).unwrap());
}

#[test]
fn loading_under_a_different_environment_fails() {
    let cfg = EnvConfig::for_profile("UMB/InH").unwrap();
    let ds = collect(&cfg, TraceSplit::Test, &[(heuristic(0.0), 1)], 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.fsds");
    save_dataset(&ds, &path).unwrap();

    let fewer_users = EnvConfig { users: 3, ..cfg.clone() };
    assert!(matches!(load_dataset(&path, &fewer_users), Err(fsdt_core::Error::Schema(_))));
    let other_rat = EnvConfig::for_profile("UMB/UMi").unwrap();
    assert!(matches!(load_dataset(&path, &other_rat), Err(fsdt_core::Error::Schema(_))));
    assert!(load_dataset(&path, &cfg).is_ok());
}

#[test]
fn corrupted_bytes_are_rejected() {
    let cfg = EnvConfig::default();
    let ds = collect(&cfg, TraceSplit::Train, &[(heuristic(0.2), 2)], 1).unwrap();
    let bytes = dataset_to_bytes(&ds);
    assert!(dataset_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(dataset_from_bytes(&magic).is_err());

    let mut bad = ds.clone();
    bad.trajectories[1].rtg[5] += 1.0;
    assert!(dataset_from_bytes(&dataset_to_bytes(&bad)).is_err());
    let mut out_of_range = ds;
    out_of_range.trajectories[0].actions[0] = 1.0;
    assert!(dataset_from_bytes(&dataset_to_bytes(&out_of_range)).is_err());
}

#[test]
fn empty_dataset_round_trips_but_cannot_train() {
    let cfg = EnvConfig::default();
    let mut ds = OfflineDataset::new(&cfg, "none", 4, TraceSplit::Train);
    assert_eq!(dataset_from_bytes(&dataset_to_bytes(&ds)).unwrap(), ds);
    assert!(ds.ensure_trainable().is_err());
    let s = dataset_stats(&ds);
    assert_eq!((s.episodes, s.transitions), (0, 0));
    assert!(s.return_max.is_none() && s.action_mean.is_empty());
    assert!(ds.max_return().is_none());

    ds.trajectories.push(Trajectory::from_steps("e", vec![], vec![], vec![]));
    assert!(ds.ensure_trainable().is_err());
    assert!(collect(&cfg, TraceSplit::Train, &[(BehaviorPolicy::Random, 0)], 0).is_err());
}

#[test]
fn max_return_is_the_best_episode() {
    let cfg = EnvConfig::for_profile("Sub6GHz/UMi").unwrap();
    let ds = collect(&cfg, TraceSplit::Train, &[(heuristic(0.3), 5), (BehaviorPolicy::Random, 5)], 2).unwrap();
    let best =
        ds.trajectories.iter().map(|t| t.rewards.iter().map(|&r| f64::from(r)).sum::<f64>()).fold(f64::MIN, f64::max);
    assert!((ds.max_return().unwrap() - best).abs() < 1e-6 * best.abs());
    assert_eq!(dataset_stats(&ds).return_max, ds.max_return());
}

#[test]
fn heuristic_beats_random_behavior() {
    let cfg = EnvConfig::default();
    for seed in 0..3 {
        let good = collect(&cfg, TraceSplit::Train, &[(heuristic(0.1), 100)], seed).unwrap();
        let bad = collect(&cfg, TraceSplit::Train, &[(BehaviorPolicy::Random, 100)], seed).unwrap();
        assert!(mean_return(&good) > mean_return(&bad), "seed {seed}: {} vs {}", mean_return(&good), mean_return(&bad));
    }
}
