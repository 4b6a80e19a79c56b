use rand::Rng;

use super::DtConfig;
use crate::dataset::Trajectory;
use crate::env::OBS_PER_USER;
use crate::error::{Error, Result};

/// Undiscounted suffix sums, accumulated in f64.
pub fn compute_rtg(rewards: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0f64;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += f64::from(r);
        *o = acc as f32;
    }
    out
}

/// Fixed per-feature scale applied to raw observations before embedding: rate
/// in Gbit/s, delays in units of 100 ms, tile counts as fractions of the frame,
/// QoE unchanged. Dimensions that are not a whole number of users are left as is.
pub fn observation_scale(state_dim: usize) -> Vec<f32> {
    const PER_USER: [f32; OBS_PER_USER] = [1e-9, 10.0, 10.0, 10.0, 10.0, 1.0 / 16.0, 1.0 / 16.0, 1.0 / 16.0, 1.0];
    if state_dim.is_multiple_of(OBS_PER_USER) {
        PER_USER.iter().copied().cycle().take(state_dim).collect()
    } else {
        vec![1.0; state_dim]
    }
}

/// `B` left-padded windows of `L` slots. Padded slots hold zeros and a false
/// mask entry; every array is row-major with the batch index outermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    pub batch: usize,
    pub len: usize,
    /// `[B, L, 1]`, already divided by the RTG scale.
    pub rtg: Vec<f32>,
    /// `[B, L, state_dim]`, already feature-scaled.
    pub states: Vec<f32>,
    /// `[B, L, action_dim]`
    pub actions: Vec<f32>,
    pub timesteps: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl ContextBatch {
    pub fn zeros(batch: usize, len: usize, config: &DtConfig) -> Self {
        let n = batch * len;
        ContextBatch {
            batch,
            len,
            rtg: vec![0.0; n],
            states: vec![0.0; n * config.state_dim],
            actions: vec![0.0; n * config.action_dim],
            timesteps: vec![0; n],
            pad_mask: vec![false; n],
        }
    }

    pub fn validate(&self, config: &DtConfig) -> Result<()> {
        let n = self.batch * self.len;
        let ok = self.rtg.len() == n
            && self.states.len() == n * config.state_dim
            && self.actions.len() == n * config.action_dim
            && self.timesteps.len() == n
            && self.pad_mask.len() == n;
        if !ok {
            return Err(Error::shape(format!("batch arrays do not match [{}, {}]", self.batch, self.len)));
        }
        if let Some(&t) = self.timesteps.iter().find(|&&t| t >= config.max_timestep) {
            return Err(Error::Shape(format!("timestep {t} exceeds the table of {}", config.max_timestep)));
        }
        Ok(())
    }

    /// Writes slot `t` of `traj` (features scaled) into row `b`, position `pos`.
    pub fn set_slot(&mut self, config: &DtConfig, scale: &[f32], b: usize, pos: usize, traj: &Trajectory, t: usize) {
        let (sd, ad) = (config.state_dim, config.action_dim);
        let i = b * self.len + pos;
        self.rtg[i] = (f64::from(traj.rtg[t]) / config.rtg_scale) as f32;
        for ((dst, &s), &k) in self.states[i * sd..(i + 1) * sd].iter_mut().zip(traj.state(t, sd)).zip(scale) {
            *dst = s * k;
        }
        self.actions[i * ad..(i + 1) * ad].copy_from_slice(traj.action(t, ad));
        self.timesteps[i] = t;
        self.pad_mask[i] = true;
    }
}

/// Uniform trajectory and end index; the window is the `≤ L` slots ending there.
pub fn sample_batch(
    trajectories: &[Trajectory],
    config: &DtConfig,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<ContextBatch> {
    let usable: Vec<&Trajectory> = trajectories.iter().filter(|t| !t.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::usage("cannot sample from an empty dataset"));
    }
    let l = config.context_len;
    let scale = observation_scale(config.state_dim);
    let mut out = ContextBatch::zeros(batch, l, config);
    for b in 0..batch {
        let traj = usable[rng.random_range(0..usable.len())];
        let end = rng.random_range(0..traj.len());
        let start = (end + 1).saturating_sub(l);
        let pad = l - (end + 1 - start);
        for (k, t) in (start..=end).enumerate() {
            out.set_slot(config, &scale, b, pad + k, traj, t);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rtg_examples() {
        assert_eq!(compute_rtg(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert!(compute_rtg(&[]).is_empty());
        assert_eq!(compute_rtg(&[0.0; 4]), vec![0.0; 4]);
    }

    fn tiny() -> DtConfig {
        DtConfig { state_dim: 2, action_dim: 1, context_len: 5, ..DtConfig::default() }
    }

    fn traj(n: usize) -> Trajectory {
        let states = (0..n * 2).map(|v| v as f32).collect();
        let actions = (0..n).map(|t| (t as f32 + 1.0) / (n as f32 + 2.0)).collect();
        Trajectory::from_steps("t", states, actions, vec![1.0; n])
    }

    #[test]
    fn short_trajectory_left_padded() {
        let cfg = tiny();
        let ds = vec![traj(3)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b = sample_batch(&ds, &cfg, 1, &mut rng).unwrap();
            b.validate(&cfg).unwrap();
            let real = b.pad_mask.iter().filter(|&&m| m).count();
            assert!(real <= 3);
            // padding on the left only, then consecutive timesteps from 0 or later
            assert!(b.pad_mask[..5 - real].iter().all(|&m| !m));
            assert!(b.pad_mask[5 - real..].iter().all(|&m| m));
            let ts = &b.timesteps[5 - real..];
            assert!(ts.windows(2).all(|w| w[1] == w[0] + 1));
            assert_eq!(b.rtg[4], (3 - ts[real - 1]) as f32 / 100.0);
        }
    }

    #[test]
    fn window_ends_anywhere_and_is_deterministic() {
        let cfg = tiny();
        let ds = vec![traj(12), traj(7)];
        let a = sample_batch(&ds, &cfg, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&ds, &cfg, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let ends: std::collections::BTreeSet<usize> = (0..64).map(|r| a.timesteps[r * 5 + 4]).collect();
        assert!(ends.len() > 5);
        assert!(sample_batch(&[], &cfg, 1, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }
}
