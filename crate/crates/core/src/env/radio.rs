use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 2.998e8;
pub const REFERENCE_DISTANCE_M: f64 = 1.0;
pub const THERMAL_NOISE_DBM_HZ: f64 = -174.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatProfile {
    pub name: String,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
    /// Path-loss exponent α.
    pub ple: f64,
    pub shadow_sigma_db: f64,
    /// Side of the square region users are dropped in.
    pub max_dist_m: f64,
    pub tx_power_dbm: f64,
}

impl RatProfile {
    pub const BUILTIN_NAMES: [&'static str; 5] = ["UMB/UMi", "UMB/InH", "Sub6GHz/UMi", "Sub6GHz/InH", "WiFi/InH"];

    #[allow(clippy::too_many_arguments)]
    fn row(name: &str, bw_mhz: f64, fc_ghz: f64, ple: f64, sigma: f64, dist: f64, power: f64) -> Self {
        RatProfile {
            name: name.to_string(),
            bandwidth_hz: bw_mhz * 1e6,
            carrier_hz: fc_ghz * 1e9,
            ple,
            shadow_sigma_db: sigma,
            max_dist_m: dist,
            tx_power_dbm: power,
        }
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let p = match name {
            "UMB/UMi" => Self::row(name, 200.0, 6.75, 2.56, 6.53, 230.0, 33.0),
            "UMB/InH" => Self::row(name, 200.0, 6.75, 2.72, 9.21, 65.0, 33.0),
            "Sub6GHz/UMi" => Self::row(name, 100.0, 2.90, 2.90, 2.90, 230.0, 30.0),
            "Sub6GHz/InH" => Self::row(name, 100.0, 2.90, 3.10, 6.50, 65.0, 30.0),
            "WiFi/InH" => Self::row(name, 160.0, 2.40, 2.52, 5.75, 65.0, 24.0),
            _ => return Err(Error::Config(format!("unknown RAT profile {name:?}"))),
        };
        Ok(p)
    }

    pub fn builtins() -> Vec<Self> {
        Self::BUILTIN_NAMES.iter().map(|n| Self::builtin(n).unwrap()).collect()
    }

    /// Agent type, i.e. the part of the name before the clutter.
    pub fn domain(&self) -> &str {
        self.name.split('/').next().unwrap_or(&self.name)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.bandwidth_hz > 0.0
            && self.carrier_hz > 0.0
            && self.ple >= 2.0
            && self.max_dist_m > 0.0
            && self.shadow_sigma_db >= 0.0
            && self.tx_power_dbm.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid RAT profile {self:?}")))
        }
    }

    pub fn tx_power_w(&self) -> f64 {
        dbm_to_w(self.tx_power_dbm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub distance_m: f64,
    pub shadowing_db: f64,
    /// Rayleigh amplitude g; the channel power gain is g².
    pub fading: f64,
    pub bw_share: f64,
    /// W/Hz.
    pub noise_psd: f64,
    pub noise_figure_db: f64,
}

pub fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn path_loss_db(profile: &RatProfile, distance_m: f64, shadowing_db: f64) -> Result<f64> {
    if distance_m.is_nan() || distance_m < REFERENCE_DISTANCE_M {
        return Err(Error::Domain(format!("distance {distance_m} m below the 1 m reference")));
    }
    let fspl = 20.0 * (4.0 * std::f64::consts::PI * profile.carrier_hz * REFERENCE_DISTANCE_M / SPEED_OF_LIGHT).log10();
    Ok(fspl + 10.0 * profile.ple * (distance_m / REFERENCE_DISTANCE_M).log10() + shadowing_db)
}

/// Shannon rate over the allocated bandwidth. Zero allocated bandwidth yields
/// a rate of 0.
pub fn downlink_rate(link: &LinkState, profile: &RatProfile) -> Result<f64> {
    let bw = link.bw_share * profile.bandwidth_hz;
    if bw <= 0.0 {
        return Ok(0.0);
    }
    let pl = path_loss_db(profile, link.distance_m, link.shadowing_db)?;
    let h = db_to_linear(-pl);
    let noise = link.noise_psd * bw * db_to_linear(link.noise_figure_db);
    let snr = profile.tx_power_w() * link.fading * link.fading * h / noise;
    Ok(bw * (1.0 + snr).log2())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link(bw_share: f64, fading: f64) -> LinkState {
        LinkState {
            distance_m: 100.0,
            shadowing_db: 0.0,
            fading,
            bw_share,
            noise_psd: dbm_to_w(THERMAL_NOISE_DBM_HZ),
            noise_figure_db: 7.0,
        }
    }

    #[test]
    fn table_rows() {
        let p = RatProfile::builtin("Sub6GHz/InH").unwrap();
        assert_eq!(p.bandwidth_hz, 100e6);
        assert_eq!(p.carrier_hz, 2.9e9);
        assert_eq!((p.ple, p.shadow_sigma_db, p.max_dist_m, p.tx_power_dbm), (3.10, 6.50, 65.0, 30.0));
        assert_eq!(p.domain(), "Sub6GHz");
        for p in RatProfile::builtins() {
            p.validate().unwrap();
        }
        assert!(RatProfile::builtin("LTE").is_err());
    }

    #[test]
    fn path_loss_examples() {
        let umb = RatProfile::builtin("UMB/UMi").unwrap();
        // 4π·6.75e9/2.998e8 = 282.93196, 20·log10 of that = 49.03364
        let fspl = 49.03364;
        assert!((path_loss_db(&umb, 1.0, 0.0).unwrap() - fspl).abs() < 1e-4);
        assert!((path_loss_db(&umb, 1.0, 0.0).unwrap() - 49.03).abs() < 0.005);
        assert!((path_loss_db(&umb, 100.0, 0.0).unwrap() - 100.23).abs() < 0.005);
        assert!((path_loss_db(&umb, 1.0, 5.0).unwrap() - fspl - 5.0).abs() < 1e-4);
        assert!(path_loss_db(&umb, 0.5, 0.0).is_err());
    }

    #[test]
    fn rate_examples() {
        // 50 MHz, 2 W, 100 dB path loss: SNR = 2e-10 / (3.98e-21·5e7·10^0.7) ≈ 200.6
        let p = RatProfile {
            name: "t".into(),
            bandwidth_hz: 50e6,
            carrier_hz: 6.75e9,
            ple: 2.0,
            shadow_sigma_db: 0.0,
            max_dist_m: 100.0,
            tx_power_dbm: 10.0 * (2000.0f64).log10(),
        };
        let mut l = link(1.0, 1.0);
        l.shadowing_db = 100.0 - path_loss_db(&p, 100.0, 0.0).unwrap();
        let r = downlink_rate(&l, &p).unwrap();
        let noise: f64 = 3.981e-21 * 50e6 * 5.0119;
        let want = 50e6 * (1.0 + 2e-10 / noise).log2();
        assert!((r - want).abs() / want < 1e-3, "{r} vs {want}");
        assert!((r - 3.83e8).abs() < 0.01e8);

        assert_eq!(downlink_rate(&link(1.0, 0.0), &p).unwrap(), 0.0);
        assert_eq!(downlink_rate(&link(0.0, 1.0), &p).unwrap(), 0.0);

        // g → 2g multiplies SNR by 4, i.e. about +2 bits/s/Hz at high SNR
        let hi = RatProfile { tx_power_dbm: 60.0, ..p.clone() };
        let r1 = downlink_rate(&link(1.0, 1.0), &hi).unwrap();
        let r2 = downlink_rate(&link(1.0, 2.0), &hi).unwrap();
        assert!(((r2 - r1) / 50e6 - 2.0).abs() < 0.01);
    }
}
