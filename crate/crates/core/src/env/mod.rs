//! Multi-RAT MEC environment: radio channel, GoP data sizes, rendering and
//! encoding delays, QoE, reward, and the episodic wrapper around them.

pub mod action;
pub mod mec;
pub mod media;
pub mod qoe;
pub mod radio;

pub use action::{decode_action, EnvAction, UserAction, ACTION_PER_USER};
pub use mec::{
    neutral_raw_action, slot_metrics, EnvConfig, EnvObservation, GazeConfig, MecEnv, StepOutcome, TraceSplit, UserLink,
    UserMetrics, UserObservation, OBS_PER_USER,
};
pub use media::{
    gop_data_size, gop_pixels, latencies, Allocation, ComputeModel, GopData, GopPlan, LatencyBreakdown, LatencyLimits,
    PerQuality, RATIO_BOUNDS,
};
pub use qoe::{fairness_penalty, population_std, qoe, quality_score, reward, reward_terms, QoeParams, RewardTerms};
pub use radio::{downlink_rate, path_loss_db, LinkState, RatProfile};
