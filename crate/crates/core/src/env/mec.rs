use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::action::{decode_action, EnvAction, UserAction, ACTION_PER_USER};
use super::media::{latencies, Allocation, ComputeModel, GopPlan, LatencyBreakdown, LatencyLimits, PerQuality};
use super::qoe::{qoe, reward_terms, QoeParams, RewardTerms};
use super::radio::{dbm_to_w, downlink_rate, LinkState, RatProfile, REFERENCE_DISTANCE_M, THERMAL_NOISE_DBM_HZ};
use crate::error::{Error, Result};
use crate::gaze::{synth_trace, temporal_split, tile_quality_map, GazePoint, GazeTrace, TileRadii};

/// Observation values per user: rate, comm/encode/render/total delay, tile
/// counts high/med/low, QoE.
pub const OBS_PER_USER: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GazeConfig {
    pub videos: usize,
    pub frames_per_video: usize,
    pub smoothness: f64,
    pub seed: u64,
    pub train_ratio: f64,
}

impl Default for GazeConfig {
    fn default() -> Self {
        GazeConfig { videos: 8, frames_per_video: 1000, smoothness: 0.05, seed: 0, train_ratio: 0.8 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceSplit {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub profile: RatProfile,
    pub compute: ComputeModel,
    pub qoe: QoeParams,
    /// B_{q,max}, bits per tile.
    pub max_bitrates: PerQuality<f64>,
    pub users: usize,
    pub episode_len: usize,
    pub noise_psd_dbm_hz: f64,
    pub noise_figure_db: f64,
    pub compression: f64,
    pub threshold_s: f64,
    pub latency_cap_s: f64,
    pub radii: TileRadii,
    pub gaze: GazeConfig,
}

impl Default for RatProfile {
    fn default() -> Self {
        RatProfile::builtin("UMB/UMi").unwrap()
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        let max_bitrates = PerQuality::new(12.4e6, 1.4e6, 0.5e6);
        EnvConfig {
            profile: RatProfile::default(),
            compute: ComputeModel::default(),
            qoe: QoeParams::with_max_bitrates(max_bitrates),
            max_bitrates,
            users: 4,
            episode_len: 100,
            noise_psd_dbm_hz: THERMAL_NOISE_DBM_HZ,
            noise_figure_db: 7.0,
            compression: 300.0,
            threshold_s: 0.2,
            latency_cap_s: 1.0,
            radii: TileRadii::default(),
            gaze: GazeConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn for_profile(name: &str) -> Result<Self> {
        Ok(EnvConfig { profile: RatProfile::builtin(name)?, ..EnvConfig::default() })
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.compute.validate()?;
        self.qoe.validate()?;
        self.radii.validate()?;
        let ok = self.users > 0
            && self.episode_len > 0
            && self.compression > 0.0
            && self.threshold_s > 0.0
            && self.latency_cap_s > 0.0
            && self.max_bitrates.to_array().iter().all(|&b| b > 0.0)
            && self.gaze.videos > 0
            && self.gaze.frames_per_video > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid environment configuration {self:?}")))
        }
    }

    pub fn state_dim(&self) -> usize {
        self.users * OBS_PER_USER
    }

    pub fn action_dim(&self) -> usize {
        self.users * ACTION_PER_USER
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn limits(&self) -> LatencyLimits {
        LatencyLimits { threshold_s: self.threshold_s, compression: self.compression, cap_s: self.latency_cap_s }
    }

    /// Synthetic gaze videos, split in time, one part per video.
    pub fn gaze_traces(&self, split: TraceSplit) -> Result<Vec<GazeTrace>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.gaze.seed);
        (0..self.gaze.videos)
            .map(|i| {
                let trace =
                    synth_trace(format!("video-{i}"), self.gaze.frames_per_video, &mut rng, self.gaze.smoothness)?;
                let (train, test) = temporal_split(&trace, self.gaze.train_ratio)?;
                Ok(match split {
                    TraceSplit::Train => train,
                    TraceSplit::Test => test,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserObservation {
    pub rate_bps: f64,
    pub comm_s: f64,
    pub encode_s: f64,
    pub render_s: f64,
    pub total_s: f64,
    /// Tile request of the next GoP.
    pub counts: PerQuality<u32>,
    pub qoe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvObservation {
    pub users: Vec<UserObservation>,
}

impl EnvObservation {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.users.len() * OBS_PER_USER);
        for u in &self.users {
            out.extend_from_slice(&[u.rate_bps, u.comm_s, u.encode_s, u.render_s, u.total_s]);
            out.extend(u.counts.as_f64().to_array());
            out.push(u.qoe);
        }
        out
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(OBS_PER_USER) {
            return Err(Error::shape(format!("observation length {} not a multiple of {OBS_PER_USER}", values.len())));
        }
        let users = values
            .chunks_exact(OBS_PER_USER)
            .map(|v| UserObservation {
                rate_bps: v[0],
                comm_s: v[1],
                encode_s: v[2],
                render_s: v[3],
                total_s: v[4],
                counts: PerQuality::new(v[5] as u32, v[6] as u32, v[7] as u32),
                qoe: v[8],
            })
            .collect();
        Ok(EnvObservation { users })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub rate_bps: f64,
    pub latency: LatencyBreakdown,
    pub counts: PerQuality<u32>,
    pub qoe: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: EnvObservation,
    pub reward: f64,
    pub terms: RewardTerms,
    pub users: Vec<UserMetrics>,
    pub done: bool,
}

/// Large-scale link of one user, fixed for an episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserLink {
    pub distance_m: f64,
    pub shadowing_db: f64,
}

/// Serves one GoP to one user and scores it.
pub fn slot_metrics(
    config: &EnvConfig,
    link: UserLink,
    action: &UserAction,
    counts: PerQuality<u32>,
    prev_ratios: PerQuality<f64>,
    fading: f64,
) -> Result<UserMetrics> {
    let plan = GopPlan { tile_counts: counts, resolution_ratios: action.ratios, max_bitrates: config.max_bitrates };
    let state = LinkState {
        distance_m: link.distance_m,
        shadowing_db: link.shadowing_db,
        fading,
        bw_share: action.bw_share,
        noise_psd: dbm_to_w(config.noise_psd_dbm_hz),
        noise_figure_db: config.noise_figure_db,
    };
    let rate_bps = downlink_rate(&state, &config.profile)?;
    let alloc = Allocation {
        cpu_hz: action.cpu_share * config.compute.cpu_capacity,
        gpu_px_per_s: action.gpu_share * config.compute.gpu_capacity,
    };
    let latency = latencies(&plan, &config.compute, alloc, rate_bps, config.limits());
    let qoe = qoe(&plan, prev_ratios, &latency, &config.qoe);
    Ok(UserMetrics { rate_bps, latency, counts, qoe })
}

/// Raw action that decodes to equal shares and mid-interval ratios.
pub fn neutral_raw_action(users: usize) -> Vec<f64> {
    vec![0.5; users * ACTION_PER_USER]
}

/// Episodic multi-user MEC environment.
///
/// Each episode drops users uniformly in a square centred on the base station,
/// draws one shadowing value per user, and assigns every user a gaze trace
/// window. Rayleigh fading is redrawn each slot. `reset` serves a warm-up GoP
/// with the neutral action so that the first observation carries real rates
/// and delays.
pub struct MecEnv {
    config: EnvConfig,
    traces: Vec<GazeTrace>,
    rng: ChaCha8Rng,
    links: Vec<UserLink>,
    cursors: Vec<(usize, usize)>,
    prev_ratios: Vec<PerQuality<f64>>,
    slot: usize,
    started: bool,
}

impl MecEnv {
    pub fn new(config: EnvConfig, split: TraceSplit, seed: u64) -> Result<Self> {
        let traces = config.gaze_traces(split)?;
        Self::with_traces(config, traces, seed)
    }

    pub fn with_traces(config: EnvConfig, traces: Vec<GazeTrace>, seed: u64) -> Result<Self> {
        config.validate()?;
        if traces.iter().all(|t| t.is_empty()) {
            return Err(Error::Config("no gaze frames available".into()));
        }
        for t in &traces {
            t.validate()?;
        }
        let traces = traces.into_iter().filter(|t| !t.is_empty()).collect();
        Ok(MecEnv {
            config,
            traces,
            rng: ChaCha8Rng::seed_from_u64(seed),
            links: Vec::new(),
            cursors: Vec::new(),
            prev_ratios: Vec::new(),
            slot: 0,
            started: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn links(&self) -> &[UserLink] {
        &self.links
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn is_done(&self) -> bool {
        self.started && self.slot >= self.config.episode_len
    }

    fn gaze_at(&self, user: usize, frame: usize) -> GazePoint {
        let (trace, offset) = self.cursors[user];
        let frames = &self.traces[trace].frames;
        frames[(offset + frame) % frames.len()].point()
    }

    fn counts_at(&self, user: usize, frame: usize) -> Result<PerQuality<u32>> {
        Ok(tile_quality_map(self.gaze_at(user, frame), self.config.radii)?.counts)
    }

    pub fn reset(&mut self) -> Result<EnvObservation> {
        let cfg = &self.config;
        let half = cfg.profile.max_dist_m / 2.0;
        let shadow = Normal::new(0.0, cfg.profile.shadow_sigma_db).map_err(|e| Error::Domain(e.to_string()))?;
        let needed = cfg.episode_len + 2;
        let mut links = Vec::with_capacity(cfg.users);
        let mut cursors = Vec::with_capacity(cfg.users);
        for _ in 0..cfg.users {
            let x = self.rng.random_range(-half..=half);
            let y = self.rng.random_range(-half..=half);
            let distance_m = x.hypot(y).max(REFERENCE_DISTANCE_M);
            let shadowing_db = shadow.sample(&mut self.rng);
            links.push(UserLink { distance_m, shadowing_db });
            let trace = self.rng.random_range(0..self.traces.len());
            let len = self.traces[trace].len();
            let offset = if len > needed { self.rng.random_range(0..=len - needed) } else { 0 };
            cursors.push((trace, offset));
        }
        self.links = links;
        self.cursors = cursors;
        self.slot = 0;
        self.started = true;
        let warmup = decode_action(&neutral_raw_action(self.config.users), self.config.users)?;
        self.prev_ratios = warmup.ratios();
        let (metrics, _) = self.serve(&warmup, 0)?;
        self.observe(&metrics, 1)
    }

    pub fn step(&mut self, raw: &[f64]) -> Result<StepOutcome> {
        if !self.started {
            return Err(Error::usage("step called before reset"));
        }
        if self.is_done() {
            return Err(Error::usage("episode already finished; call reset"));
        }
        let action = decode_action(raw, self.config.users)?;
        let (users, terms) = self.serve(&action, self.slot + 1)?;
        self.slot += 1;
        let observation = self.observe(&users, self.slot + 1)?;
        Ok(StepOutcome { observation, reward: terms.reward, terms, users, done: self.is_done() })
    }

    fn serve(&mut self, action: &EnvAction, frame: usize) -> Result<(Vec<UserMetrics>, RewardTerms)> {
        let mut metrics = Vec::with_capacity(self.config.users);
        for k in 0..self.config.users {
            let g2: f64 = Exp1.sample(&mut self.rng);
            let counts = self.counts_at(k, frame)?;
            let m =
                slot_metrics(&self.config, self.links[k], &action.users[k], counts, self.prev_ratios[k], g2.sqrt())?;
            metrics.push(m);
        }
        self.prev_ratios = action.ratios();
        let qoes: Vec<f64> = metrics.iter().map(|m| m.qoe).collect();
        let sentinel = metrics.iter().filter(|m| m.latency.saturated && m.qoe >= self.config.qoe.qoe_min).count();
        let terms = reward_terms(&qoes, action, &self.config.qoe, sentinel)?;
        Ok((metrics, terms))
    }

    fn observe(&self, metrics: &[UserMetrics], next_frame: usize) -> Result<EnvObservation> {
        let users = metrics
            .iter()
            .enumerate()
            .map(|(k, m)| {
                Ok(UserObservation {
                    rate_bps: m.rate_bps,
                    comm_s: m.latency.comm_s,
                    encode_s: m.latency.encode_s,
                    render_s: m.latency.render_s,
                    total_s: m.latency.total_s,
                    counts: self.counts_at(k, next_frame)?,
                    qoe: m.qoe,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EnvObservation { users })
    }
}
