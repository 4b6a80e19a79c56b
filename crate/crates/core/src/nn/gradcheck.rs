//! Central-difference gradient checking.
//!
//! Only forward evaluations are used here, so this stays independent of the
//! backward rules it is meant to verify.

use super::params::ParamSet;

/// Largest relative discrepancy between an analytic gradient and central
/// differences of `loss` over every parameter entry.
///
/// The relative error is `|a - n| / max(|a| + |n|, floor)`; `floor` keeps
/// entries whose true gradient is ~0 from dominating.
pub fn max_relative_error(
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    h: f64,
    floor: f64,
    mut loss: impl FnMut(&ParamSet<f64>) -> f64,
) -> f64 {
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let n = params.get(&name).unwrap().value.len();
        for i in 0..n {
            let orig = params.get(&name).unwrap().value.data()[i];
            probe.get_mut(&name).unwrap().value.data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(&name).unwrap().value.data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(&name).unwrap().grad.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}
