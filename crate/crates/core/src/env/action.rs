use serde::{Deserialize, Serialize};

use super::media::{PerQuality, RATIO_BOUNDS};
use crate::error::{Error, Result};

/// Raw action values per user: cpu, bandwidth and gpu shares, then the
/// high/med/low ratio knobs.
pub const ACTION_PER_USER: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserAction {
    pub cpu_share: f64,
    pub bw_share: f64,
    pub gpu_share: f64,
    pub ratios: PerQuality<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvAction {
    pub users: Vec<UserAction>,
}

impl EnvAction {
    pub fn share_sums(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for u in &self.users {
            s[0] += u.cpu_share;
            s[1] += u.bw_share;
            s[2] += u.gpu_share;
        }
        s
    }

    pub fn ratios(&self) -> Vec<PerQuality<f64>> {
        self.users.iter().map(|u| u.ratios).collect()
    }
}

/// Maps y ∈ (0,1) onto the open interval (lo, hi), staying strictly inside
/// even where rounding would land on an endpoint.
fn open_affine(y: f64, (lo, hi): (f64, f64)) -> f64 {
    (lo + y * (hi - lo)).clamp(lo.next_up(), hi.next_down())
}

pub fn decode_action(raw: &[f64], users: usize) -> Result<EnvAction> {
    if raw.len() != users * ACTION_PER_USER {
        return Err(Error::shape(format!("raw action has {} values, expected {}", raw.len(), users * ACTION_PER_USER)));
    }
    if let Some((i, v)) = raw.iter().enumerate().find(|(_, v)| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::Contract(format!("raw action[{i}] = {v} outside (0,1)")));
    }
    let mut sums = [0.0; 3];
    for u in raw.chunks_exact(ACTION_PER_USER) {
        for (s, v) in sums.iter_mut().zip(u) {
            *s += v;
        }
    }
    let scale = sums.map(|s| if s > 1.0 { 1.0 / s } else { 1.0 });
    let users = raw
        .chunks_exact(ACTION_PER_USER)
        .map(|u| UserAction {
            cpu_share: u[0] * scale[0],
            bw_share: u[1] * scale[1],
            gpu_share: u[2] * scale[2],
            ratios: PerQuality::new(
                open_affine(u[3], RATIO_BOUNDS.high),
                open_affine(u[4], RATIO_BOUNDS.med),
                open_affine(u[5], RATIO_BOUNDS.low),
            ),
        })
        .collect();
    Ok(EnvAction { users })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neutral_action() {
        let a = decode_action(&[0.5; 24], 4).unwrap();
        for u in &a.users {
            assert_eq!(u.ratios, PerQuality::new(0.875, 0.375, 0.1875));
            assert_eq!((u.cpu_share, u.bw_share, u.gpu_share), (0.25, 0.25, 0.25));
        }
    }

    #[test]
    fn projection_inactive_below_one() {
        let mut raw = [0.5; 24];
        for (k, s) in [0.1, 0.2, 0.3, 0.2].iter().enumerate() {
            raw[k * 6] = *s;
        }
        let a = decode_action(&raw, 4).unwrap();
        let cpu: Vec<f64> = a.users.iter().map(|u| u.cpu_share).collect();
        assert_eq!(cpu, vec![0.1, 0.2, 0.3, 0.2]);
    }

    #[test]
    fn endpoints_stay_open() {
        let mut raw = [0.5; 24];
        raw[5] = f64::MIN_POSITIVE;
        raw[3] = 1.0 - f64::EPSILON / 2.0;
        let a = decode_action(&raw, 4).unwrap();
        assert!(a.users[0].ratios.low > 0.125 && a.users[0].ratios.low < 0.1251);
        assert!(a.users[0].ratios.high < 1.0);
    }

    #[test]
    fn contract_errors() {
        let mut raw = [0.5; 24];
        raw[7] = 1.0;
        assert!(matches!(decode_action(&raw, 4), Err(Error::Contract(_))));
        raw[7] = f64::NAN;
        assert!(matches!(decode_action(&raw, 4), Err(Error::Contract(_))));
        assert!(matches!(decode_action(&[0.5; 23], 4), Err(Error::Shape(_))));
    }
}
